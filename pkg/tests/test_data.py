import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmust.data import (
    DatasetError,
    DatasetManifest,
    STDataset,
    TaskData,
    WindowedSplit,
    compute_norm_stats,
    denormalize,
    generate_synthetic,
    load_dataset,
    make_windows,
    normalize,
    normalized_coords,
    save_dataset,
    split_7_1_2,
    temporal_indicators,
)
from cmust.harness import sparsity_transform
from cmust.roada import daily_average_sample


def _dataset(T=20, N=3, C=2, interval=60, seed=0, start="2024-01-01T00:00:00Z"):
    rng = np.random.default_rng(seed)
    m = DatasetManifest("d", T, N, C, interval, start, [[float(i), 0.5 * i] for i in range(N)],
                        [f"c{c}" for c in range(C)])
    return STDataset(m, rng.normal(size=(T, N, C)))


def test_split_boundaries_closed_form():
    assert split_7_1_2(100) == ((0, 70), (70, 80), (80, 100))


def test_window_count_closed_form():
    assert len(make_windows(30, 12, 12)) == 7


@given(st.integers(24, 5000))
def test_split_is_exhaustive_and_ordered(T):
    (a0, a1), (b0, b1), (c0, c1) = split_7_1_2(T)
    assert a0 == 0 and a1 == b0 and b1 == c0 and c1 == T
    assert a1 == int(0.7 * T) or a1 == (7 * T) // 10


@given(st.integers(24, 400), st.integers(1, 12), st.integers(1, 12), st.integers(1, 5))
def test_windows_stay_inside_range(L, T, Tp, stride):
    if L < T + Tp:
        with pytest.raises(DatasetError):
            make_windows(L, T, Tp, stride)
        return
    w = make_windows(L, T, Tp, stride)
    assert w[0] == 0 and w[-1] + T + Tp <= L
    assert len(w) == (L - T - Tp) // stride + 1


def test_short_split_rejected():
    with pytest.raises(DatasetError):
        WindowedSplit.build(50, 12, 12)


def test_normalisation_round_trip(rng):
    x = rng.normal(3.0, 5.0, size=(200, 4, 2))
    stats = compute_norm_stats(x[:140])
    np.testing.assert_allclose(denormalize(normalize(x, stats), stats), x, atol=1e-9)


def test_norm_stats_floor_constant_channel():
    stats = compute_norm_stats(np.ones((10, 2, 1)))
    assert stats.std[0] == 1e-8


def test_temporal_indicators_monday_midnight():
    m = _dataset(interval=15).manifest
    tod, dow, ts = temporal_indicators(m, 0)
    assert (tod, dow) == (0, 0)  # 2024-01-01 is a Monday
    tod, dow, ts = temporal_indicators(m, 96 + 5)
    assert (tod, dow) == (5, 1)
    np.testing.assert_allclose(ts, [1 / 12, 2 / 31, 1 / 7, 1 / 24, 15 / 60, 0.0])


def test_normalized_coords_unit_box():
    c = normalized_coords([[-74.0, 40.7], [-73.9, 40.9], [-73.95, 40.8]])
    assert c.min() == 0.0 and c.max() == 1.0


def test_csv_round_trip_exact(tmp_path):
    ds = _dataset()
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.observations, ds.observations)
    assert back.manifest == ds.manifest


def test_load_reports_nan_location(tmp_path):
    save_dataset(_dataset(), tmp_path)
    lines = (tmp_path / "observations.csv").read_text().splitlines()
    cells = lines[3].split(",")
    cells[2] = "nan"
    lines[3] = ",".join(cells)
    (tmp_path / "observations.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="row 2, column 2"):
        load_dataset(tmp_path)


def test_load_row_count_mismatch(tmp_path):
    save_dataset(_dataset(), tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["T_all"] = 21
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DatasetError, match="rows"):
        load_dataset(tmp_path)


def test_manifest_validation():
    with pytest.raises(DatasetError):
        DatasetManifest("x", 10, 2, 1, 7, "2024-01-01T00:00:00Z", [[0, 0], [1, 1]], ["v"])
    with pytest.raises(DatasetError):
        DatasetManifest("x", 10, 2, 1, 15, "2024-01-01T00:00:00Z", [[0, 0]], ["v"])


def test_synthetic_deterministic_and_shaped():
    a = generate_synthetic(3, 2, 5, 200, interval_minutes=15)
    b = generate_synthetic(3, 2, 5, 200, interval_minutes=15)
    assert [d.name for d in a] == ["task0", "task1"]
    assert a[0].manifest.slots_per_day == 96
    for x, y in zip(a, b):
        assert np.array_equal(x.observations, y.observations)


def test_synthetic_full_coupling_is_affine_in_latent():
    sets = generate_synthetic(0, 3, 4, 300, noise_sd=0.0, coupling=1.0)
    z = [(d.observations - d.observations.mean()) / d.observations.std() for d in sets]
    np.testing.assert_allclose(z[0], z[1], atol=1e-9)
    np.testing.assert_allclose(z[0], z[2], atol=1e-9)


def test_daily_average_matches_groupby(rng):
    ds = _dataset(T=24 * 5 + 7, N=3, C=2, interval=60, start="2024-01-01T05:00:00Z")
    got = daily_average_sample(ds)
    expected = np.zeros((24, 3, 2))
    for slot in range(24):
        rows = [t for t in range(ds.manifest.T_all) if (5 + t) % 24 == slot]
        expected[slot] = ds.observations[rows].mean(axis=0)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_daily_average_needs_a_full_day():
    with pytest.raises(DatasetError):
        daily_average_sample(_dataset(T=20, interval=60))


def test_taskdata_batch_alignment():
    ds = _dataset(T=300, N=2, C=1, interval=60)
    td = TaskData(ds, 12, 12)
    b = td.batch([0, 5])
    np.testing.assert_allclose(b.y_raw[1, 0], ds.observations[5 + 12, :, :1])
    np.testing.assert_allclose(denormalize(b.x, td.stats), np.stack([ds.observations[:12], ds.observations[5:17]]))
    assert b.tod.shape == (2, 12) and b.ts.shape == (2, 12, 6)


def test_sparsity_identity_and_pair_means():
    ds = _dataset(T=10, N=4, C=1, interval=30)
    same = sparsity_transform(ds, node_fraction=1.0)
    assert np.array_equal(same.observations, ds.observations)
    half = sparsity_transform(ds, interval_multiplier=2)
    assert half.manifest.T_all == 5 and half.manifest.interval_minutes == 60
    oracle = np.array([[(ds.observations[2 * i, n, 0] + ds.observations[2 * i + 1, n, 0]) / 2 for n in range(4)]
                       for i in range(5)])
    np.testing.assert_allclose(half.observations[..., 0], oracle, atol=1e-15)


def test_sparsity_drops_remainder_and_validates(caplog):
    ds = _dataset(T=11, N=4, C=1, interval=30)
    with caplog.at_level("WARNING"):
        out = sparsity_transform(ds, interval_multiplier=2)
    assert out.manifest.T_all == 5 and "dropping 1" in caplog.text
    with pytest.raises(ValueError):
        sparsity_transform(ds, node_fraction=0.0)
    with pytest.raises(ValueError):
        sparsity_transform(ds, node_fraction=1.5)


def test_sparsity_node_subset_seeded():
    ds = _dataset(T=10, N=10, C=1, interval=30)
    a = sparsity_transform(ds, node_fraction=0.5, seed=4)
    b = sparsity_transform(ds, node_fraction=0.5, seed=4)
    assert a.manifest.N == 5 and a.manifest.coords == b.manifest.coords
