"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; each test prints its verdict
line even when output capture is on.
"""

import time

import numpy as np
import pytest

from cmust.artifacts import load_task_model, save_task_model, write_results
from cmust.data import (
    Batch,
    TaskData,
    compute_norm_stats,
    denormalize,
    generate_synthetic,
    make_windows,
    normalize,
    split_7_1_2,
)
from cmust.gradcheck import analytic_gradients, compare, stagewise_finite_difference
from cmust.harness import ExperimentConfig, TrainConfig, evaluate, run_experiment, snapshot_task_model
from cmust.msti import (
    CROSS_STAGES,
    STAGES,
    TEMPORAL_CROSS_STAGES,
    MSTIModel,
    ModelConfig,
    cross_attention_block,
    positional_encoding,
)
from cmust.numerics import Parameter, Tensor, huber_loss
from cmust.roada import RoAdaConfig, apply_freeze, daily_average_sample, refine, variance_partition, warmup_rolling

SEEDS = (0, 1, 2)


def verdict(capsys, number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] C{number} {title}: {detail}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def _random_batch(rng, B, T, N, L_t=48):
    return Batch(
        x=rng.normal(0.0, 3.0, size=(B, T, N, 1)),
        tod=rng.integers(0, L_t, size=(B, T)),
        dow=rng.integers(0, 7, size=(B, T)),
        ts=rng.random((B, T, 6)),
        y=rng.normal(size=(B, T, N, 1)),
        y_raw=np.zeros((B, T, N, 1)),
    )


def _tiny_model(seed, N=4):
    model = MSTIModel(ModelConfig.profile("tiny", num_nodes=N), seed=seed)
    model.set_prompt("task", np.random.default_rng(seed + 1).normal(size=model.prompt_shape))
    return model


# ---------------------------------------------------------------------------


def test_c01_gradient_suite(capsys):
    model = _tiny_model(0)
    assert model.layout.d_h == 32 and model.config.heads == 2
    rng = np.random.default_rng(0)
    batch = _random_batch(rng, B=2, T=12, N=4)
    coords = rng.random((4, 2))
    t0 = time.perf_counter()
    analytic = analytic_gradients(model, batch, coords, "task")
    numeric = stagewise_finite_difference(model, batch, coords, "task", h=1e-5)
    elapsed = time.perf_counter() - t0
    rows = compare(analytic, numeric)
    n_params = sum(r.size for r in rows)
    worst = max(r.rel_error for r in rows)
    # elements above 1e-4 elementwise must be roundoff around a true zero
    noisy = [r for r in rows if r.max_elem_rel_error > 1e-4]
    roundoff_ok = all(r.max_abs_diff < 1e-9 for r in noisy)
    ok = len(rows) == len(model.all_params()) and worst <= 1e-4 and roundoff_ok and elapsed <= 60.0
    verdict(capsys, 1, "gradient suite", ok,
            f"{len(rows)} tensors / {n_params} elements, max per-parameter rel err {worst:.2e} <= 1e-4; "
            f"{len(noisy)} tensors with elementwise rel err > 1e-4, max |a-b| there "
            f"{max((r.max_abs_diff for r in noisy), default=0.0):.1e} < 1e-9; {elapsed:.1f} s <= 60 s")


def test_c02_attention_normalisation(capsys):
    worst = 0.0
    stages_seen = set()
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        model = _tiny_model(trial)
        _, maps = model.forward(_random_batch(rng, B=2, T=12, N=4), rng.random((4, 2)), "task")
        stages_seen |= set(maps.scores)
        for arr in maps.scores.values():
            worst = max(worst, float(np.abs(arr.sum(axis=-1) - 1.0).max()))
    ok = stages_seen == set(STAGES) and worst <= 1e-9
    verdict(capsys, 2, "attention normalisation", ok,
            f"100 trials x {len(stages_seen)} stages x 2 heads, max |row sum - 1| = {worst:.1e} <= 1e-9")


def test_c03_slice_locality(capsys):
    model = _tiny_model(0)
    lay = model.layout
    results = {}
    for stage, q, kv in CROSS_STAGES + TEMPORAL_CROSS_STAGES:
        p = {leaf: model.params[f"block0/{stage}/{leaf}"].tensor
             for leaf in ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
                          "ln2_g", "ln2_b")}
        ok = True
        for trial in range(20):
            H = Tensor(np.random.default_rng(trial).normal(size=(2, 12, 4, lay.d_h)))
            out, _ = cross_attention_block(H, lay, q, kv, p, heads=2)
            for key in "ostp":
                same = np.array_equal(out.data[..., lay[key]], H.data[..., lay[key]])
                ok &= same == (key != kv)
        results[f"({q},{kv})"] = ok
    verdict(capsys, 3, "slice locality", all(results.values()),
            ", ".join(f"{k} {'only kv rewritten' if v else 'VIOLATED'}" for k, v in results.items())
            + " over 20 random inputs each")


def test_c04_numeric_exactness(capsys):
    vals = [float(huber_loss(Tensor(np.array([r])), np.array([0.0]), 1.0).data) for r in (0.0, 0.5, 2.0)]
    pe = positional_encoding(1, 8)[0]
    quad = float(huber_loss(Tensor(np.array([1.0 - 1e-16])), np.array([0.0]), 1.0).data)
    lin = float(huber_loss(Tensor(np.array([1.0])), np.array([0.0]), 1.0).data)
    ok = vals == [0.0, 0.125, 1.5] and pe.tolist() == [0, 1] * 4 and abs(quad - lin) <= 1e-15
    verdict(capsys, 4, "numeric exactness", ok,
            f"huber(0, 0.5, 2) = {vals}; PE(0,:) = {pe.astype(int).tolist()}; "
            f"quadratic vs linear branch at |r|=1: {abs(quad - lin):.1e} <= 1e-15")


def test_c05_variance_freeze_oracle(capsys):
    rng = np.random.default_rng(5)
    worst = 0.0
    partition_ok = True
    mono_ok = True
    prm = Parameter("w", np.zeros((3, 4)))
    accumulated = np.zeros((3, 4), dtype=bool)
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        scale = 10.0 ** rng.uniform(-5, 0, size=(3, 4))
        snaps = [{"w": rng.normal(size=(3, 4)) * scale} for _ in range(n)]
        rep = variance_partition(snaps, 1e-6)
        var = rep.entries["w"].variance
        for idx in np.ndindex(3, 4):
            xs = [float(s["w"][idx]) for s in snaps]
            mu = sum(xs) / n
            ref = sum((x - mu) ** 2 for x in xs) / n
            worst = max(worst, abs(float(var[idx]) - ref))
        stable = rep.entries["w"].stable
        dynamic = var >= 1e-6
        partition_ok &= not (stable & dynamic).any() and bool((stable | dynamic).all())
        before = prm.freeze_mask.copy()
        apply_freeze({"w": prm}, rep)
        accumulated |= stable
        mono_ok &= bool((prm.freeze_mask >= before).all()) and np.array_equal(prm.freeze_mask, accumulated)
    ok = worst <= 1e-12 and partition_ok and mono_ok
    verdict(capsys, 5, "variance/freeze oracle", ok,
            f"1000 histories, max |var - two-pass| = {worst:.1e} <= 1e-12; partition disjoint+exhaustive: "
            f"{partition_ok}; OR-monotone: {mono_ok}")


def test_c06_freeze_invariance_end_to_end(capsys, tmp_path):
    t0 = time.perf_counter()
    sets = generate_synthetic(0, 2, 8, 672, interval_minutes=30)
    data = [TaskData(d) for d in sets]
    model = MSTIModel(ModelConfig.profile("tiny", num_nodes=8), seed=0)
    for td in data:
        model.set_prompt(td.name, np.zeros(model.prompt_shape))
    cfg = RoAdaConfig(max_epochs_warmup=3, max_epochs_rolling=3, max_epochs_refine=3, patience=3)
    frozen = {}
    epochs = {}
    violations = []

    def observer(phase, epoch, m):
        epochs[phase] = max(epochs.get(phase, 0), epoch)
        if phase == "warmup/revisit" and epoch == 0:
            for name, p in m.params.items():
                frozen[name] = (p.freeze_mask.copy(), p.value[p.freeze_mask].copy())
        for name, (mask, vals) in frozen.items():
            if not np.array_equal(m.params[name].value[mask], vals):
                violations.append((phase, epoch, name))

    warm = warmup_rolling(model, data, cfg, observer=observer)
    for td in data:
        refine(model, td, warm.shared_state, cfg)
        save_task_model(tmp_path / td.name, snapshot_task_model(model, td.name, td))
        loaded, _, _, _ = load_task_model(tmp_path / td.name)
        for name, (mask, vals) in frozen.items():
            if not np.array_equal(loaded.params[name].value[mask], vals):
                violations.append(("checkpoint", td.name, name))
    elapsed = time.perf_counter() - t0
    n_frozen = sum(int(m.sum()) for m, _ in frozen.values())
    n_total = sum(m.size for m, _ in frozen.values())
    ok = (not violations and epochs.get("warmup/1", 0) >= 3 and epochs.get("warmup/2", 0) >= 3
          and epochs.get("warmup/revisit", 0) >= 1 and n_frozen > 0 and elapsed <= 180.0)
    verdict(capsys, 6, "freeze invariance end-to-end", ok,
            f"epochs task1={epochs.get('warmup/1')}, task2={epochs.get('warmup/2')}, "
            f"revisit={epochs.get('warmup/revisit')}; {n_frozen}/{n_total} elements frozen after task 2, "
            f"{len(violations)} changed across revisit epochs and 2 refined checkpoints; {elapsed:.0f} s <= 180 s")


def test_c07_data_pipeline_oracles(capsys):
    rng = np.random.default_rng(7)
    x = rng.normal(50.0, 20.0, size=(500, 6, 2))
    stats = compute_norm_stats(x[:350])
    rt = float(np.abs(denormalize(normalize(x, stats), stats) - x).max())
    ds = generate_synthetic(3, 1, 5, 48 * 9 + 17, interval_minutes=30, start_timestamp="2024-03-05T07:30:00Z")[0]
    got = daily_average_sample(ds)
    ref = np.zeros_like(got)
    cnt = np.zeros(48)
    for t in range(ds.manifest.T_all):
        slot = (15 + t) % 48  # 07:30 is slot 15
        ref[slot] += ds.observations[t]
        cnt[slot] += 1
    ref /= cnt[:, None, None]
    daily = float(np.abs(got - ref).max())
    split = split_7_1_2(100)
    lens = tuple(b - a for a, b in split)
    n_windows = len(make_windows(30, 12, 12))
    ok = rt <= 1e-9 and daily <= 1e-12 and lens == (70, 10, 20) and n_windows == 7
    verdict(capsys, 7, "data pipeline oracles", ok,
            f"norm round trip {rt:.1e} <= 1e-9; daily average vs group-by {daily:.1e} <= 1e-12; "
            f"split(100) = {lens}; windows(30, 12, 12) = {n_windows}")


def _small_roada_config(seed=0):
    return ExperimentConfig(
        seed=seed,
        train=TrainConfig(max_epochs=2, patience=2),
        roada=RoAdaConfig(max_epochs_warmup=2, max_epochs_rolling=3, max_epochs_refine=2, patience=2),
    )


def test_c08_determinism(capsys, tmp_path):
    sets = generate_synthetic(0, 2, 4, 336, interval_minutes=30)
    dirs = []
    for k in range(2):
        results = run_experiment("roada", sets, _small_roada_config())
        dirs.append(write_results(results, tmp_path / f"run{k}")[0])
    files = sorted(p.relative_to(dirs[0]) for p in (dirs[0] / "checkpoints").rglob("*") if p.is_file())
    files.append(dirs[0].joinpath("metrics.json").relative_to(dirs[0]))
    same = [(dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes() for f in files]
    ok = len(files) > 2 and all(same)
    verdict(capsys, 8, "determinism", ok,
            f"{sum(same)}/{len(files)} files byte-identical (metrics.json + checkpoint blobs, masks, meta)")


# ---------------------------------------------------------------------------
# directional experiments on the coupled synthetic triple
# ---------------------------------------------------------------------------


def _triple_config(seed):
    return ExperimentConfig(
        seed=seed,
        train=TrainConfig(max_epochs=10, patience=3),
        roada=RoAdaConfig(max_epochs_warmup=10, max_epochs_rolling=3, max_epochs_refine=10, patience=3),
        ablations=["no_interaction"],
    )


@pytest.fixture(scope="module")
def triple_runs():
    out = {}
    for seed in SEEDS:
        sets = generate_synthetic(seed, 3, 16, 1344, interval_minutes=15, coupling=1.0, noise_sd=0.1)
        cfg = _triple_config(seed)
        row = {}
        for mode in ("single", "roada", "ablation"):
            t0 = time.process_time()
            (res,) = run_experiment(mode, sets, cfg)
            row[mode] = (res, time.process_time() - t0)
        out[seed] = row
    return out


@pytest.mark.slow
def test_c09_multitask_gain(capsys, triple_runs):
    wins = 0
    parts = []
    cpu = 0.0
    for seed, row in triple_runs.items():
        single, t_single = row["single"]
        roada, t_roada = row["roada"]
        cpu += t_single + t_roada
        win = roada.mean_mae <= single.mean_mae
        wins += win
        frozen = roada.freeze_reports[0].frozen_fraction
        parts.append(f"seed {seed}: roada {roada.mean_mae:.4f} vs single {single.mean_mae:.4f} "
                     f"({'<=' if win else '>'}; frozen after task 2 {frozen:.0%})")
    ok = wins >= 2 and cpu <= 1200.0
    verdict(capsys, 9, "multi-task gain", ok, "; ".join(parts) + f"; {wins}/3 seeds; {cpu / 60:.1f} CPU min <= 20")


@pytest.mark.slow
def test_c10_ablation_direction(capsys, triple_runs):
    wins = 0
    parts = []
    cpu = 0.0
    for seed, row in triple_runs.items():
        roada, t_roada = row["roada"]
        abl, t_abl = row["ablation"]
        cpu += t_roada + t_abl
        win = abl.mean_mae >= roada.mean_mae
        wins += win
        parts.append(f"seed {seed}: no-interaction {abl.mean_mae:.4f} vs full {roada.mean_mae:.4f}")
    ok = wins >= 2 and cpu <= 1200.0
    verdict(capsys, 10, "ablation direction", ok, "; ".join(parts) + f"; {wins}/3 seeds; {cpu / 60:.1f} CPU min <= 20")


def test_c11_checkpoint_round_trip(capsys, tmp_path):
    sets = generate_synthetic(1, 2, 4, 336, interval_minutes=30)
    (res,) = run_experiment("roada", sets, _small_roada_config(1))
    out = write_results([res], tmp_path)[0]
    worst = 0.0
    for m, ds in zip(res.metrics, sets):
        model, task, stats, _ = load_task_model(out / "checkpoints" / m["task"])
        rep = evaluate(model, TaskData(ds, stats=stats), task, "test")
        worst = max(worst, abs(rep.mae - m["MAE"]))
    verdict(capsys, 11, "checkpoint round trip", worst <= 1e-9,
            f"{len(res.metrics)} task checkpoints, max |MAE(loaded) - MAE(recorded)| = {worst:.1e} <= 1e-9")
