import mpmath
import numpy as np
import pytest

from compseg import tensor as T
from compseg.errors import ContractError, DegenerateInputError, DimensionError, NonFiniteError

from gradcheck import numeric_grad, rel_err


def _check(fn, *arrays, tol=1e-4, seed_weights=0):
    """Compare tape gradients of sum(w * fn(...)) against central differences."""
    rng = np.random.default_rng(seed_weights)
    out_shape = fn(*[T.Tensor(a) for a in arrays]).shape
    w = rng.normal(size=out_shape)

    def scalar(*arrs):
        return float(np.sum(w * fn(*[T.Tensor(a) for a in arrs]).data))

    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    (fn(*leaves) * w).sum().backward()
    numeric = numeric_grad(scalar, [a.copy() for a in arrays])
    for leaf, n in zip(leaves, numeric):
        assert rel_err(leaf.grad, n) < tol


def test_matmul_identity_and_hand_case():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((T.Tensor(a) @ T.Tensor(np.eye(2))).data, a)
    np.testing.assert_array_equal((T.Tensor(a) @ T.Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.Tensor(np.ones((2, 3))) @ T.Tensor(np.ones((2, 3)))


def test_matmul_sum_gradient_fd():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ta, tb = T.Tensor(a, requires_grad=True), T.Tensor(b, requires_grad=True)
    (ta @ tb).sum().backward()
    na, nb = numeric_grad(lambda x, y: float((x @ y).sum()), [a.copy(), b.copy()])
    assert rel_err(ta.grad, na) < 1e-6
    assert rel_err(tb.grad, nb) < 1e-6


def test_batched_matmul_broadcast_grad():
    rng = np.random.default_rng(2)
    _check(lambda a, b: a @ b, rng.normal(size=(3, 2, 4, 5)), rng.normal(size=(2, 5, 3)), tol=1e-6)


def test_sigmoid_and_log_sigmoid_values():
    assert T.sigmoid(T.Tensor(0.0)).item() == 0.5
    assert T.log_sigmoid(T.Tensor(0.0)).item() == pytest.approx(-0.6931471805599453, abs=1e-15)
    v = T.log_sigmoid(T.Tensor(-100.0)).item()
    assert np.isfinite(v) and v == pytest.approx(-100.0, abs=1e-12)


def test_log_sigmoid_gradient_at_1_3():
    x = T.Tensor([1.3], requires_grad=True)
    T.log_sigmoid(x).sum().backward()
    (n,) = numeric_grad(lambda a: float(T.log_sigmoid(T.Tensor(a)).data.sum()), [np.array([1.3])])
    assert rel_err(x.grad, n) < 1e-6


def test_exp_log_sigmoid_matches_sigmoid():
    x = np.linspace(-30, 30, 2001)
    np.testing.assert_allclose(np.exp(T.log_sigmoid(T.Tensor(x)).data), T.sigmoid(T.Tensor(x)).data,
                               rtol=0, atol=1e-12)


def test_softmax_values():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_array_equal(T.softmax(T.Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 7)) * 10
    s = T.softmax(T.Tensor(x)).data
    assert np.max(np.abs(s.sum(-1) - 1)) < 1e-12
    assert np.max(np.abs(T.softmax(T.Tensor(x + 123.4)).data - s)) < 1e-12


def test_softmax_mask():
    s = T.softmax(T.Tensor([[1.0, 5.0, 2.0]]), mask=[[1, 0, 1]]).data
    assert s[0, 1] == 0.0
    assert s[0].sum() == pytest.approx(1.0)
    with pytest.raises(DegenerateInputError):
        T.softmax(T.Tensor([[1.0, 2.0]]), mask=[[0, 0]])


def test_layernorm_cases():
    g, b = T.Tensor(np.ones(3)), T.Tensor(np.zeros(3))
    np.testing.assert_array_equal(T.layernorm(T.Tensor([[2.0, 2.0, 2.0]]), g, b).data, [[0, 0, 0]])
    out = T.layernorm(T.Tensor([1.0, -1.0]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2))).data
    # mean 0, var 1: x / sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, np.array([1.0, -1.0]) / np.sqrt(1 + 1e-5), rtol=1e-14)


def test_mean_pool_masked():
    x = T.Tensor([[2.0, 4.0], [6.0, 8.0]])
    np.testing.assert_array_equal(T.mean_pool_masked(x, [1, 0]).data, [2.0, 4.0])
    with pytest.raises(DegenerateInputError):
        T.mean_pool_masked(x, [0, 0])


def test_mul_by_ones_identity():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal((T.Tensor(x) * np.ones((3, 4))).data, x)


def test_backward_simple():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = T.Tensor([3.0], requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad, [6.0])


def test_backward_accumulates_and_rejects_nonscalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_fanout_accumulates():
    x = T.Tensor([2.0], requires_grad=True)
    y = x * 3.0
    (y + y * x).sum().backward()  # 3x + 3x^2 -> 3 + 6x
    assert x.grad[0] == pytest.approx(15.0)


def test_non_finite_raises_in_debug():
    with pytest.raises(NonFiniteError):
        T.log(T.Tensor([0.0]))
    with T.debug_mode(False):
        assert np.isneginf(T.log(T.Tensor([0.0])).data[0])


def test_no_grad_records_nothing():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_log1mexp_branches():
    x = np.array([-1e-7, -1e-3, -0.5, -0.7, -5.0, -40.0])
    mpmath.mp.dps = 50
    ref = np.array([float(mpmath.log(1 - mpmath.exp(mpmath.mpf(float(v))))) for v in x])
    np.testing.assert_allclose(T.log1mexp(T.Tensor(x)).data, ref, rtol=1e-13)
    with pytest.raises(ContractError):
        T.log1mexp(T.Tensor([0.0]))


UNARY = {
    "sigmoid": T.sigmoid,
    "log_sigmoid": T.log_sigmoid,
    "softplus": T.softplus,
    "exp": T.exp,
    "softmax": T.softmax,
    "transpose": lambda a: a.transpose(),
    "reshape": lambda a: a.reshape(-1),
    "sum_axis": lambda a: a.sum(axis=1),
    "mean": lambda a: a.mean(axis=0),
    "max": lambda a: T.max_(a, axis=1),
    "scale": lambda a: T.scale(a, -2.5),
    "getitem": lambda a: a[1:, ::2],
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(3))
def test_unary_ops_fd(name, seed):
    x = np.random.default_rng(seed).normal(size=(3, 4))
    linear = name in {"transpose", "reshape", "sum_axis", "mean", "scale", "getitem", "max"}
    _check(UNARY[name], x, tol=1e-6 if linear else 1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_binary_ops_fd(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    _check(lambda x, y: x + y, a, b, tol=1e-6)
    _check(lambda x, y: x - y, a, b, tol=1e-6)
    _check(lambda x, y: x * y, a, b)
    _check(lambda x, y: x / (y * y + 1.0), a, b)


@pytest.mark.parametrize("seed", range(3))
def test_layernorm_fd(seed):
    rng = np.random.default_rng(seed)
    _check(T.layernorm, rng.normal(size=(2, 3, 5)), rng.normal(size=5), rng.normal(size=5), tol=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_masked_pool_fd(seed):
    rng = np.random.default_rng(seed)
    mask = np.array([[1, 1, 0], [1, 0, 0]])
    _check(lambda x: T.mean_pool_masked(x, mask), rng.normal(size=(2, 3, 4)), tol=1e-6)


def test_masked_softmax_fd():
    rng = np.random.default_rng(5)
    mask = np.array([[1, 0, 1, 1], [0, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)
    _check(lambda x: T.softmax(x, mask=mask), rng.normal(size=(3, 4)))


def test_embedding_counts_occurrences():
    table = T.Tensor(np.random.default_rng(0).normal(size=(5, 3)), requires_grad=True)
    ids = np.array([[1, 2, 1], [4, 1, 0]])
    T.embedding(table, ids).sum().backward()
    np.testing.assert_array_equal(table.grad[:, 0], [1, 3, 1, 0, 1])


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(9)
        a = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        T.log_sigmoid(T.softmax(a @ b) * a).sum().backward()
        return a.grad.copy(), b.grad.copy()

    (a1, b1), (a2, b2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()
