import numpy as np
import pytest

from gnot.errors import ContractError, ShapeError
from gnot import tensor as T
from gnot.tensor import Tensor, concat, gelu, layer_norm, no_grad, softmax_lastdim


# ---------------------------------------------------------------------------
# oracles


def matmul_triple_loop(a, b):
    """Brute-force reference for the matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def central_difference(f, x, h=1e-6):
    """Gradient of scalar-valued f() w.r.t. array x, by central differences.

    f must read x's current contents; x is perturbed in place and restored.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grad_close(ad, fd):
    # spec tolerance: rel <= 1e-5, abs <= 1e-7 where the gradient is tiny
    ad = np.asarray(ad, dtype=float)
    scale = np.maximum(np.abs(ad), np.abs(fd))
    small = scale < 1e-2
    assert np.all(np.abs(ad - fd)[small] <= 1e-7), "small-gradient absolute tolerance"
    big = ~small
    rel = np.abs(ad - fd)[big] / scale[big]
    assert rel.size == 0 or rel.max() <= 1e-5, f"max relative error {rel.max():.3e}"


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal((eye @ b).data, b.data)


def test_matmul_closed_form():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.uniform(-2, 2, (5, 7))
    b = rng.uniform(-2, 2, (7, 3))
    got = (Tensor(a) @ Tensor(b)).data
    want = matmul_triple_loop(a, b)
    assert np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300)) <= 1e-12


@pytest.mark.parametrize("m,k,n", [(1, 1, 1), (4, 9, 2), (32, 32, 32)])
def test_matmul_oracle_shapes(m, k, n):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    a = rng.uniform(-1, 1, (m, k))
    b = rng.uniform(-1, 1, (k, n))
    got = (Tensor(a) @ Tensor(b)).data
    want = matmul_triple_loop(a, b)
    denom = np.maximum(np.abs(want), 1e-30)
    assert np.max(np.abs(got - want) / denom) <= 1e-12


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_matmul_backward_rule():
    # backward contract: a.grad += g b^T, b.grad += a^T g  (g = ones here)
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
    (a @ b).sum().backward()
    g = np.ones((2, 2))
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform():
    out = softmax_lastdim(Tensor([0.0, 0.0, 0.0, 0.0]))
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_closed_form():
    out = softmax_lastdim(Tensor([0.0, np.log(3.0)]))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    for c in (-100.0, 0.5, 1e4):
        a = softmax_lastdim(Tensor(x)).data
        b = softmax_lastdim(Tensor(x + c)).data
        assert np.allclose(a, b, atol=1e-12)


def test_softmax_simplex_invariant():
    rng = np.random.default_rng(4)
    x = rng.uniform(-50, 50, (100, 9))
    out = softmax_lastdim(Tensor(x)).data
    assert np.all(out > 0)
    assert np.max(np.abs(out.sum(axis=-1) - 1.0)) <= 1e-12


def test_softmax_large_logits_stay_finite():
    out = softmax_lastdim(Tensor([1e4, -1e4, 0.0])).data
    assert np.all(np.isfinite(out))
    assert abs(out.sum() - 1.0) <= 1e-12


# ---------------------------------------------------------------------------
# gelu


def test_gelu_fixed_point_and_asymptote():
    assert gelu(Tensor(0.0)).data == 0.0
    assert abs(gelu(Tensor(10.0)).item() - 10.0) <= 1e-6


def test_gelu_matches_high_precision_erf_oracle():
    # frozen from a 40-digit erf evaluation of 0.5*x*(1+erf(x/sqrt(2)))
    cases = {
        1.0: 0.8413447460685429485852325,
        0.5: 0.3457312306370065518188523,
        -1.25: -0.132062217083569072110966,
        2.0: 1.954499736103641585599435,
    }
    for x, want in cases.items():
        assert abs(gelu(Tensor(x)).item() - want) <= 1e-12


# ---------------------------------------------------------------------------
# backward


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert np.allclose(x.grad, 6.0)


def test_backward_constant_independence():
    x = Tensor(3.0, requires_grad=True)
    y = Tensor(2.0, requires_grad=True)
    (y * y).backward()
    assert x.grad is None
    assert np.allclose(y.grad, 4.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_grad_accumulates_across_graphs():
    x = Tensor(2.0, requires_grad=True)
    (x * x).backward()
    (x * 3.0).backward()
    assert np.allclose(x.grad, 4.0 + 3.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(4), requires_grad=True)
    with no_grad():
        y = softmax_lastdim(x * 2.0)
    assert y._parents == () and y._backward is None
    y.sum().backward()  # graph below y is severed: no gradient reaches x
    assert x.grad is None


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(-2, 2, (6, 5)), requires_grad=True)
    loss = (gelu(softmax_lastdim(x @ Tensor(rng.uniform(-2, 2, (5, 5))))) ** 2.0).sum()
    loss.backward()
    assert np.isfinite(loss.item())
    assert np.all(np.isfinite(x.grad))


# ---------------------------------------------------------------------------
# finite-difference property: every differentiable op


def _loss_through(op, x_arr, r):
    def build():
        return float((op(Tensor(x_arr)) * Tensor(r)).sum().data)

    return build


OPS = {
    "add": lambda x: x + np.full(x.shape, 0.7),
    "sub": lambda x: x - np.full(x.shape, 1.3),
    "rsub": lambda x: 1.5 - x,
    "mul": lambda x: x * np.linspace(0.5, 2.0, x.size).reshape(x.shape),
    "div": lambda x: x / np.full(x.shape, 2.5),
    "rdiv": lambda x: 3.0 / (x + 5.0),
    "neg": lambda x: -x,
    "pow2": lambda x: x ** 2,
    "pow_half": lambda x: (x + 3.0) ** 0.5,
    "exp": lambda x: x.exp(),
    "gelu": gelu,
    "softmax": softmax_lastdim,
    "sum_axis": lambda x: x.sum(axis=0, keepdims=True) * np.ones(x.shape),
    "sum_all": lambda x: x.sum() * np.ones((1, 1)),
    "mean": lambda x: x.mean(axis=1, keepdims=True) * np.ones(x.shape),
    "reshape_transpose": lambda x: x.reshape(x.size // 2, 2).transpose((1, 0)),
    "getitem": lambda x: x[1:, :2],
    "clip_min": lambda x: x.clip_min(0.1),
    "matmul": lambda x: x @ np.linspace(-1, 1, x.shape[-1] * 3).reshape(x.shape[-1], 3),
    "layer_norm": lambda x: layer_norm(x, np.linspace(0.5, 1.5, x.shape[-1]),
                                       np.linspace(-0.2, 0.2, x.shape[-1])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_central_differences(name):
    op = OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    x_arr = rng.uniform(-2, 2, (4, 6))
    if name == "clip_min":
        # keep samples away from the kink at the clip floor
        x_arr[np.abs(x_arr - 0.1) < 0.05] += 0.2
    out_probe = op(Tensor(x_arr))
    r = rng.normal(size=out_probe.shape)

    x = Tensor(x_arr, requires_grad=True)
    (op(x) * Tensor(r)).sum().backward()
    fd = central_difference(_loss_through(op, x_arr, r), x_arr)
    assert_grad_close(x.grad, fd)


def test_gradient_matmul_batched_broadcast():
    rng = np.random.default_rng(77)
    a_arr = rng.uniform(-1, 1, (3, 4, 5))
    w_arr = rng.uniform(-1, 1, (5, 2))
    r = rng.normal(size=(3, 4, 2))

    a = Tensor(a_arr, requires_grad=True)
    w = Tensor(w_arr, requires_grad=True)
    ((a @ w) * Tensor(r)).sum().backward()

    fd_a = central_difference(
        lambda: float(((Tensor(a_arr) @ Tensor(w_arr)) * Tensor(r)).sum().data), a_arr
    )
    fd_w = central_difference(
        lambda: float(((Tensor(a_arr) @ Tensor(w_arr)) * Tensor(r)).sum().data), w_arr
    )
    assert_grad_close(a.grad, fd_a)
    assert_grad_close(w.grad, fd_w)


def test_gradient_concat():
    rng = np.random.default_rng(78)
    xs = [rng.uniform(-1, 1, (2, 3)) for _ in range(3)]
    r = rng.normal(size=(2, 9))

    ts = [Tensor(x, requires_grad=True) for x in xs]
    (concat(ts, axis=1) * Tensor(r)).sum().backward()
    for i, x_arr in enumerate(xs):
        fd = central_difference(
            lambda: float((concat([Tensor(x) for x in xs], axis=1) * Tensor(r)).sum().data),
            x_arr,
        )
        assert_grad_close(ts[i].grad, fd)


def test_gradient_broadcast_add_mul():
    rng = np.random.default_rng(79)
    x_arr = rng.uniform(-1, 1, (4, 5))
    b_arr = rng.uniform(-1, 1, (5,))
    r = rng.normal(size=(4, 5))

    x = Tensor(x_arr, requires_grad=True)
    b = Tensor(b_arr, requires_grad=True)
    ((x * b + b) * Tensor(r)).sum().backward()

    def loss():
        return float(((Tensor(x_arr) * Tensor(b_arr) + Tensor(b_arr)) * Tensor(r)).sum().data)

    assert_grad_close(x.grad, central_difference(loss, x_arr))
    assert_grad_close(b.grad, central_difference(loss, b_arr))
