import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsad import tensor as tt
from conftest import check_grads

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_softmax_singleton():
    out = tt.softmax(tt.Tensor([[3.7]]), axis=-1)
    assert out.data.tolist() == [[1.0]]


def test_layer_norm_constant_row_is_zero():
    out = tt.layer_norm(tt.Tensor(np.full((2, 5), 4.2)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_matmul_by_hand():
    out = tt.Tensor([[1.0, 2.0], [3.0, 4.0]]) @ tt.Tensor([[1.0], [1.0]])
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(tt.ShapeError) as err:
        tt.matmul(tt.Tensor(np.ones((2, 3))), tt.Tensor(np.ones((2, 3))))
    msg = str(err.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_add_shape_error():
    with pytest.raises(tt.ShapeError):
        tt.add(tt.Tensor(np.ones((2, 3))), tt.Tensor(np.ones((4,))))


def test_grad_of_sum_and_square():
    w = tt.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    tt.backward(w.sum())
    assert w.grad.tolist() == [1, 1, 1]
    w = tt.Tensor([1.0, 2.0], requires_grad=True)
    tt.backward((w * w).sum())
    assert w.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates_until_zeroed():
    w = tt.Tensor([1.0, 2.0], requires_grad=True)
    tt.backward((w * w).sum())
    tt.backward((w * w).sum())
    assert w.grad.tolist() == [4.0, 8.0]
    tt.zero_grad([w])
    assert w.grad is None or not w.grad.any()


def test_backward_requires_scalar():
    w = tt.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        tt.backward(w * 2.0)


def test_no_grad_records_nothing():
    w = tt.Tensor([1.0], requires_grad=True)
    with tt.no_grad():
        y = w * 3.0
    assert not y.requires_grad


def test_nonfinite_detected_in_debug(monkeypatch):
    monkeypatch.setattr(tt, "DEBUG", True)
    with pytest.raises(tt.NonFiniteError), np.errstate(invalid="ignore"):
        tt.log(tt.Tensor([-1.0]))


@pytest.mark.parametrize("name,build,shapes", [
    ("add_bias", lambda a, b: (a + b).sum(), [(3, 4), (4,)]),
    ("sub_mul", lambda a, b: ((a - b) * a).sum(), [(2, 3), (2, 3)]),
    ("div", lambda a, b: (a / (b * b + 1.0)).sum(), [(3,), (3,)]),
    ("matmul_batched", lambda a, b: (a @ b).sum(), [(2, 3, 4), (4, 5)]),
    ("transpose", lambda a: (tt.transpose(a) * tt.Tensor(np.arange(6.0).reshape(3, 2))).sum(), [(2, 3)]),
    ("permute", lambda a: (tt.permute(a, (2, 0, 1)) * tt.Tensor(np.arange(24.0).reshape(4, 2, 3))).sum(), [(2, 3, 4)]),
    ("softmax", lambda a: (tt.softmax(a, axis=-1) * tt.Tensor(np.arange(12.0).reshape(3, 4))).sum(), [(3, 4)]),
    ("softmax_axis0", lambda a: (tt.softmax(a, axis=0) * tt.Tensor(np.arange(12.0).reshape(3, 4))).sum(), [(3, 4)]),
    ("layer_norm", lambda a: (tt.layer_norm(a) * tt.Tensor(np.arange(10.0).reshape(2, 5))).sum(), [(2, 5)]),
    ("gelu", lambda a: tt.gelu(a).sum(), [(7,)]),
    ("relu", lambda a: (tt.relu(a) * a).sum(), [(7,)]),
    ("sigmoid_exp", lambda a: (tt.sigmoid(a) + tt.exp(a * 0.3)).sum(), [(5,)]),
    ("mean_axis", lambda a: (tt.mean(a, axis=1) * tt.Tensor([1.0, -2.0])).sum(), [(2, 3)]),
    ("getitem_concat", lambda a, b: tt.square(tt.concat([a[:, 1:], b], axis=1)).sum(), [(2, 3), (2, 2)]),
    ("reshape_abs", lambda a: tt.tabs(a.reshape(3, 2)).sum(), [(2, 3)]),
])
def test_op_gradients(name, build, shapes, rng):
    inputs = [rng.normal(size=s) for s in shapes]
    assert check_grads(build, inputs) < 1e-4, name


@given(arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = tt.softmax(tt.Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@given(arrays(np.float64, (3, 6), elements=finite))
def test_layer_norm_moments(x):
    if np.any(x.var(axis=-1) < 1e-2):
        return
    out = tt.layer_norm(tt.Tensor(x)).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-10)
    np.testing.assert_allclose(out.var(axis=-1), x.var(axis=-1) / (x.var(axis=-1) + 1e-5), atol=1e-12)


def test_layer_norm_unit_variance_for_spread_rows(rng):
    x = rng.normal(scale=10.0, size=(4, 8))
    out = tt.layer_norm(tt.Tensor(x)).data
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


# Adam


def _param(x):
    return {"w": tt.Tensor(np.array(x, dtype=float), requires_grad=True)}


def test_adam_first_step_moves_by_lr():
    p = _param([1.0, -2.0, 0.5])
    state = tt.AdamState()
    tt.adam_step(p, {"w": np.array([0.3, -5.0, 1e-3])}, state)
    np.testing.assert_allclose(p["w"].data, [1.0 - 1e-4, -2.0 + 1e-4, 0.5 - 1e-4], atol=1e-6)


def test_adam_zero_grad_leaves_params():
    p = _param([1.0, 2.0])
    tt.adam_step(p, {"w": np.zeros(2)}, tt.AdamState())
    assert p["w"].data.tolist() == [1.0, 2.0]


def test_adam_two_steps_recurrence():
    p = _param([0.0])
    state = tt.AdamState(lr=0.1)
    g = np.array([2.0])
    tt.adam_step(p, {"w": g}, state)
    first = p["w"].data.copy()
    tt.adam_step(p, {"w": g}, state)
    assert state.step_count == 2
    # direct recurrence
    m = v = 0.0
    x = 0.0
    for t in (1, 2):
        m = 0.9 * m + 0.1 * 2.0
        v = 0.999 * v + 0.001 * 4.0
        x -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, [x], rtol=1e-12)
    assert p["w"].data[0] < first[0] < 0


def test_adam_missing_grad_lists_name():
    p = {"enc.w": tt.Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(ValueError, match="enc.w"):
        tt.adam_step(p, {}, tt.AdamState())


def test_adam_leaves_grads_untouched():
    p = _param([1.0])
    g = np.array([0.5])
    tt.adam_step(p, {"w": g}, tt.AdamState())
    assert g.tolist() == [0.5]


# initialisation


def test_seeded_weights_reproducible():
    a = tt.init_weights(tt.seeded_rng(7), (5, 3))
    b = tt.init_weights(tt.seeded_rng(7), (5, 3))
    c = tt.init_weights(tt.seeded_rng(8), (5, 3))
    np.testing.assert_array_equal(a.data, b.data)
    assert np.any(a.data != c.data)


def test_xavier_bound_4x4():
    bound = np.sqrt(6 / 8)
    assert tt.xavier_bound((4, 4)) == pytest.approx(bound)
    w = tt.init_weights(tt.seeded_rng(0), (4, 4)).data
    assert np.all(np.abs(w) <= bound)
    big = tt.init_weights(tt.seeded_rng(0), (400, 400)).data
    assert np.abs(big).max() > 0.95 * tt.xavier_bound((400, 400))


@given(st.integers(0, 2**63 - 1))
def test_seed_determinism_property(seed):
    a = tt.init_weights(tt.seeded_rng(seed), (3, 2)).data
    b = tt.init_weights(tt.seeded_rng(seed), (3, 2)).data
    assert a.tobytes() == b.tobytes()
