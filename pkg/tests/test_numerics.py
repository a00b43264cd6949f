import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmust.numerics import (
    NonFiniteError,
    Parameter,
    Tensor,
    adam_step,
    concat,
    embedding,
    finite_difference_gradient,
    huber_loss,
    layer_norm,
    linear,
    load_checkpoint,
    matmul,
    no_grad,
    relative_error,
    relu,
    save_checkpoint,
    sigmoid,
    softmax,
    square,
    zero_grad,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def _check_grads(loss_fn, params, tol=1e-6):
    zero_grad(params)
    loss_fn().backward()
    analytic = {p.name: p.grad.copy() for p in params}
    numeric = finite_difference_gradient(lambda: loss_fn().data, params)
    for p in params:
        assert relative_error(analytic[p.name], numeric[p.name]).max() < tol, p.name


# -- forward examples ---------------------------------------------------------


def test_softmax_uniform_row():
    out = softmax(Tensor(np.zeros((1, 4)))).data
    np.testing.assert_array_equal(out, np.full((1, 4), 0.25))


def test_softmax_large_logits_stay_finite():
    out = softmax(Tensor(np.array([[1000.0, 0.0]]))).data
    assert np.isfinite(out).all()
    assert out[0, 0] == pytest.approx(1.0)


def test_softmax_empty_axis_rejected():
    with pytest.raises(ValueError):
        softmax(Tensor(np.zeros((2, 0))))


def test_layer_norm_standardised_input_unchanged():
    out = layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-15)


@pytest.mark.parametrize("r, expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)])
def test_huber_values(r, expected):
    assert huber_loss(Tensor(np.array([r])), np.array([0.0]), 1.0).data == expected


def test_huber_branches_meet():
    d = 0.7
    quad = 0.5 * d * d
    lin = d * (d - 0.5 * d)
    assert abs(quad - lin) <= 1e-15
    assert huber_loss(Tensor(np.array([d])), np.array([0.0]), d).data == pytest.approx(quad, abs=1e-15)


def test_huber_rejects_bad_delta_and_shape():
    with pytest.raises(ValueError):
        huber_loss(Tensor(np.zeros(2)), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        huber_loss(Tensor(np.zeros(2)), np.zeros(3), 1.0)


def test_embedding_index_out_of_range():
    with pytest.raises(IndexError):
        embedding(Tensor(np.zeros((3, 2))), np.array([3]))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1e300])) * Tensor(np.array([1e300]))


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = w * 2.0
    assert not y.requires_grad


# -- gradients ----------------------------------------------------------------


def test_gradients_of_fused_ops(rng):
    x = rng.normal(size=(3, 4, 5))
    w = Parameter("w", rng.normal(size=(5, 6)))
    b = Parameter("b", rng.normal(size=6))
    g = Parameter("g", rng.normal(size=6) + 1.0)
    beta = Parameter("beta", rng.normal(size=6))
    target = rng.normal(size=(3, 4, 6))

    def loss():
        h = linear(Tensor(x), w.tensor, b.tensor)
        h = layer_norm(h, g.tensor, beta.tensor)
        h = softmax(h, axis=-1) + sigmoid(h) + relu(h)
        return huber_loss(h, target, 0.3)

    _check_grads(loss, [w, b, g, beta])


def test_gradients_of_structural_ops(rng):
    a = Parameter("a", rng.normal(size=(2, 3, 4)))
    c = Parameter("c", rng.normal(size=(2, 4, 3)))
    table = Parameter("table", rng.normal(size=(5, 4)))
    idx = np.array([[0, 4, 4], [1, 2, 0]])

    def loss():
        m = matmul(a.tensor, c.tensor)  # 2,3,3
        e = embedding(table.tensor, idx)  # 2,3,4
        cat = concat([m, e[..., :3]], axis=-1)
        return square(cat.transpose(0, 2, 1).reshape(2, -1)).mean() + (cat[:, 1] / 3.0).sum()

    _check_grads(loss, [a, c, table])


@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert (out >= 0).all()


@given(arrays(np.float64, (4, 6), elements=finite))
def test_layer_norm_output_standardised(x):
    x = x + np.linspace(0, 1, 6)  # never constant rows
    out = layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


@given(st.floats(0.01, 10), st.floats(-20, 20))
def test_huber_continuous_at_threshold(delta, r):
    quad = 0.5 * delta**2
    lin = delta * (delta - 0.5 * delta)
    assert abs(quad - lin) <= 1e-12 * max(1.0, delta**2)
    val = huber_loss(Tensor(np.array([r])), np.array([0.0]), delta).data
    assert val >= 0


# -- optimiser ----------------------------------------------------------------


def test_adam_first_step():
    p = Parameter("w", np.array([0.0]))
    p.tensor.grad = np.array([1.0])
    adam_step([p], lr=0.1, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8)
    assert p.value[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
    assert p.step_count == 1


def test_adam_frozen_elements_bit_identical(rng):
    v = rng.normal(size=(4, 4))
    mask = rng.random((4, 4)) < 0.5
    p = Parameter("w", v, mask)
    for _ in range(5):
        p.tensor.grad = rng.normal(size=(4, 4))
        adam_step([p], lr=0.1, weight_decay=0.01)
    assert np.array_equal(p.value[mask], v[mask])
    assert (p.moment1[mask] == 0).all() and (p.moment2[mask] == 0).all()
    assert not np.array_equal(p.value[~mask], v[~mask])


@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_adam_all_frozen_is_identity(v, g):
    p = Parameter("w", v, np.ones((3, 2), dtype=bool))
    p.tensor.grad = g
    adam_step([p], lr=1.0, weight_decay=0.5)
    assert np.array_equal(p.value, v)


def test_adam_missing_gradient_is_error():
    with pytest.raises(ValueError):
        adam_step([Parameter("w", np.zeros(2))], lr=0.1)


def test_parameter_mask_shape_checked():
    with pytest.raises(ValueError):
        Parameter("w", np.zeros((2, 2)), np.zeros(3, dtype=bool))


# -- checkpoints --------------------------------------------------------------


@given(arrays(np.float64, (2, 3), elements=st.floats(allow_nan=False, allow_infinity=False)),
       arrays(np.bool_, (2, 3)))
def test_checkpoint_round_trip_bit_exact(tmp_path_factory, values, mask):
    path = tmp_path_factory.mktemp("ckpt")
    params = [Parameter("block0/SSI/wq", values, mask), Parameter("prompt/a", np.arange(3.0))]
    save_checkpoint(path, params, {"k": 1})
    loaded, meta = load_checkpoint(path)
    assert meta == {"k": 1}
    assert [p.name for p in loaded] == ["block0/SSI/wq", "prompt/a"]
    assert loaded[0].value.tobytes() == values.astype("<f8").tobytes()
    assert np.array_equal(loaded[0].freeze_mask, mask)


def test_checkpoint_truncated_blob_rejected(tmp_path):
    save_checkpoint(tmp_path, [Parameter("w", np.zeros(4))])
    (tmp_path / "w.f64").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)
