import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ramehr import tensor as T
from ramehr.errors import DataError, NumericError, ShapeError
from ramehr.gradcheck import check_gradients, numeric_grad, relative_error
from ramehr.tensor import Adam, OptimizerState, Tensor, adam_step

from gradcases import OP_CASES


@pytest.mark.parametrize("case", OP_CASES, ids=lambda c: c.__name__)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradients_match_finite_differences(case, seed):
    loss_fn, params = case(seed)
    errors = check_gradients(loss_fn, params)
    assert max(errors.values()) < 1e-6, errors


def test_numeric_grad_of_a_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = numeric_grad(lambda: float((x ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)
    np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])   # restored


def test_relative_error_floor_handles_zero_gradients():
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-5
    assert relative_error(np.ones(3), np.ones(3) * 1.01) == pytest.approx(0.01 / 1.01, rel=1e-9)


def test_softmax_worked_example():
    y = T.softmax(Tensor(np.array([[1.0, 2.0, 3.0]])), axis=-1).data
    np.testing.assert_allclose(y, [[0.09003057, 0.24472847, 0.66524096]], atol=1e-8)


def test_softmax_is_shift_invariant_and_stable():
    x = np.array([[1000.0, 1001.0, 1002.0]])
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x - 1000)).data, atol=1e-12)


def test_softmax_rows_rejects_non_matrix():
    with pytest.raises(ShapeError):
        T.softmax_rows(Tensor(np.zeros((2, 2, 2))))


def test_layer_norm_output_is_standardized():
    x = Tensor(np.random.default_rng(0).normal(3.0, 5.0, size=(4, 16)))
    y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-5)


def test_layer_norm_shape_errors():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros(3)) @ Tensor(np.zeros((3, 2)))


def test_take_rejects_out_of_range():
    with pytest.raises(IndexError):
        T.take(Tensor(np.zeros((3, 2))), [0, 3])


def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        T.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NumericError):
        Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


def test_backward_twice_raises_unless_retained():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    with pytest.raises(RuntimeError):
        y.backward()

    z = (x * 3.0).sum()
    x.grad = None
    z.backward(retain_graph=True)
    z.backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])   # leaves accumulate


def test_backward_needs_scalar_or_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()
    (x * 2.0).backward(np.array([1.0, 0.0, 2.0]))
    np.testing.assert_allclose(x.grad, [2.0, 0.0, 4.0])


def test_shared_subexpression_gradient_sums_paths():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    (y + y * x).backward()           # d/dx (x^2 + x^3) = 2x + 3x^2
    assert float(x.grad) == pytest.approx(6 + 27)


def test_no_graph_without_requires_grad():
    y = Tensor(np.ones(2)) * 3.0
    assert not y.requires_grad and y._backward is None


def test_deep_chain_does_not_hit_recursion_limit():
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.backward()
    assert float(x.grad) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_sigmoid_bounded_and_stable(values):
    y = T.sigmoid(Tensor(np.array(values))).data
    assert np.all((y >= 0) & (y <= 1))


# -- optimizer -----------------------------------------------------------------

def test_adam_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    state = OptimizerState(lr=0.1)
    adam_step({"p": p}, {"p": np.array([0.3, -2.0, 1e-3])}, state)
    # m_hat = g, v_hat = g^2 on the first step
    expected = np.array([1.0, -1.0, 0.5]) - 0.1 * np.array([0.3, -2.0, 1e-3]) / (np.abs([0.3, -2.0, 1e-3]) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)


def test_adam_two_steps_against_hand_recurrence():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = OptimizerState(lr=0.01, betas=(0.9, 0.999), eps=1e-8)
    adam_step({"p": p}, {"p": np.array([1.0])}, state)
    adam_step({"p": p}, {"p": np.array([-1.0])}, state)
    m = 0.9 * 0.1 * 1.0 + 0.1 * -1.0
    v = 0.999 * 0.001 + 0.001
    step2 = 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    step1 = 0.01 * 1.0 / (1.0 + 1e-8)
    assert p.data[0] == pytest.approx(-step1 - step2, rel=1e-10)


def test_adam_skips_missing_and_rejects_non_finite():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"a": a, "b": b}, lr=0.1)
    a.grad = np.array([1.0, 1.0])
    opt.step()
    np.testing.assert_array_equal(b.data, [1.0, 1.0])
    assert a.data[0] < 1.0
    a.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError):
        opt.step()


def test_adam_minimizes_a_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ((x - Tensor(np.array([1.0, 1.0]))) * (x - Tensor(np.array([1.0, 1.0])))).sum().backward()
        opt.step()
    np.testing.assert_allclose(x.data, [1.0, 1.0], atol=1e-3)


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"w": Tensor(rng.normal(size=(3, 4)).astype(np.float32)), "b": Tensor(np.zeros(4, np.float32)),
              "s": Tensor(np.float32(2.5))}
    path = tmp_path / "m.ckpt"
    T.save_checkpoint(path, params)
    loaded = T.load_checkpoint(path)
    assert list(loaded) == ["w", "b", "s"]
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k].data)
    T.save_checkpoint(tmp_path / "again.ckpt", loaded)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    T.save_checkpoint(path, {"ab": np.array([1.0, 2.0], dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:8] == b"RAMCKPT1"
    assert raw[8:12] == (1).to_bytes(4, "little")
    assert raw[12:16] == (2).to_bytes(4, "little") and raw[16:18] == b"ab"
    assert raw[18:22] == (1).to_bytes(4, "little") and raw[22:30] == (2).to_bytes(8, "little")
    assert np.frombuffer(raw[30:], "<f4").tolist() == [1.0, 2.0]


def test_checkpoint_corruption_is_a_data_error(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT")
    with pytest.raises(DataError):
        T.load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    T.save_checkpoint(good, {"w": np.ones((2, 2), np.float32)})
    bad.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(DataError):
        T.load_checkpoint(bad)


def test_assign_params_checks_names_and_shapes():
    params = {"w": Tensor(np.zeros((2, 2), np.float32), requires_grad=True)}
    with pytest.raises(KeyError):
        T.assign_params(params, {})
    with pytest.raises(ShapeError):
        T.assign_params(params, {"w": np.zeros(3, np.float32)})
    T.assign_params(params, {"w": np.ones((2, 2), np.float32)})
    np.testing.assert_array_equal(params["w"].data, 1.0)
