"""Tensor-core checks: forward values against naive oracles, gradients
against central finite differences."""

import numpy as np
import pytest

from adashrink import tensor as tt
from adashrink.errors import ShapeError
from adashrink.tensor import Tensor


def fd_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = f(x)
        flat[i] = saved - eps
        down = f(x)
        flat[i] = saved
        gf[i] = (up - down) / (2 * eps)
    return g


def check_op(build, shape, seed, rtol=1e-6, atol=1e-8):
    """Backprop through build(x) summed against finite differences."""
    rng = np.random.default_rng(seed)
    data = rng.normal(size=shape)
    x = Tensor(data.copy(), requires_grad=True)
    out = tt.tsum(build(x))
    out.backward()

    def scalar(arr):
        return float(tt.tsum(build(Tensor(arr))).data)

    numeric = fd_grad(scalar, data.copy())
    np.testing.assert_allclose(x.grad, numeric, rtol=rtol, atol=atol)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    got = (Tensor(a) @ Tensor(b)).data
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_matmul_shape_errors_include_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        Tensor(np.zeros((3, 4))) @ Tensor(np.zeros((3, 2)))


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.zeros(3), requires_grad=True).backward()


@pytest.mark.parametrize("seed", range(20))
def test_elementwise_grads(seed):
    check_op(lambda x: x * x + 2.0 * x, (4, 3), seed)
    check_op(lambda x: tt.exp(x) - tt.log(tt.exp(x) + 1.0), (5,), seed)
    check_op(lambda x: tt.relu(x) * 3.0, (4, 4), seed, atol=1e-6)
    check_op(lambda x: x / (tt.exp(x) + 2.0), (3, 3), seed)


@pytest.mark.parametrize("seed", range(20))
def test_softmax_grads(seed):
    rng = np.random.default_rng(seed + 1000)
    c = rng.normal(size=(4, 5))
    check_op(lambda x: tt.softmax(x, axis=-1) * Tensor(c), (4, 5), seed)
    check_op(lambda x: tt.log_softmax(x, axis=-1) * Tensor(c), (4, 5), seed)


@pytest.mark.parametrize("seed", range(20))
def test_structural_grads(seed):
    check_op(lambda x: x.reshape(6, 2), (3, 4), seed)
    check_op(lambda x: x.transpose(1, 0) @ Tensor(np.eye(3)), (3, 4), seed)
    check_op(lambda x: x[1:3, :2] * 2.0, (4, 4), seed)
    check_op(lambda x: tt.concat([x, x * 2.0], axis=0), (2, 3), seed)
    check_op(lambda x: tt.pad_rows(x, 5), (3, 2), seed)


@pytest.mark.parametrize("seed", range(20))
def test_matmul_grads(seed):
    rng = np.random.default_rng(seed + 2000)
    b = rng.normal(size=(4, 2))
    check_op(lambda x: x @ Tensor(b), (3, 4), seed)
    check_op(lambda x: Tensor(b.T) @ x, (4, 3), seed)
    # batched
    b3 = rng.normal(size=(2, 5, 3))
    check_op(lambda x: x @ Tensor(b3), (2, 4, 5), seed)
    # broadcast batch: (B, T, d) @ (d, k)
    w = rng.normal(size=(5, 3))
    check_op(lambda x: x @ Tensor(w), (2, 4, 5), seed)


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_grads(seed):
    rng = np.random.default_rng(seed + 3000)
    g = Tensor(rng.normal(size=4) + 1.0, requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    data = rng.normal(size=(3, 4))
    x = Tensor(data.copy(), requires_grad=True)
    c = rng.normal(size=(3, 4))
    loss = tt.tsum(tt.layer_norm(x, g, b) * Tensor(c))
    loss.backward()

    def scalar_x(arr):
        return float(tt.tsum(tt.layer_norm(Tensor(arr), Tensor(g.data), Tensor(b.data)) * Tensor(c)).data)

    np.testing.assert_allclose(x.grad, fd_grad(scalar_x, data.copy()), rtol=1e-5, atol=1e-7)

    def scalar_g(arr):
        return float(tt.tsum(tt.layer_norm(Tensor(data), Tensor(arr), Tensor(b.data)) * Tensor(c)).data)

    np.testing.assert_allclose(g.grad, fd_grad(scalar_g, g.data.copy()), rtol=1e-5, atol=1e-7)


def test_embedding_grad_accumulates_repeats():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    ids = np.array([1, 1, 3])
    out = tt.tsum(tt.embedding(table, ids))
    out.backward()
    want = np.zeros((4, 3))
    want[1] = 2.0
    want[3] = 1.0
    np.testing.assert_array_equal(table.grad, want)


def test_softmax_rows_normalized():
    rng = np.random.default_rng(7)
    for _ in range(50):
        x = Tensor(rng.normal(scale=10.0, size=(6, 9)))
        s = tt.softmax(x, axis=-1).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)


def test_forward_deterministic():
    rng = np.random.default_rng(11)
    data = rng.normal(size=(4, 4))
    w = rng.normal(size=(4, 4))
    a = tt.softmax(Tensor(data) @ Tensor(w)).data
    b = tt.softmax(Tensor(data) @ Tensor(w)).data
    assert np.array_equal(a, b)


def test_constant_graph_prunes_backward():
    x = Tensor(np.ones((2, 2)))  # no grad requested anywhere
    y = x @ x + x
    assert y._backward is None and y._parents == ()


def test_clip_min_grad_gate():
    x = Tensor(np.array([0.5, 2.0]), requires_grad=True)
    out = tt.tsum(tt.clip_min(x, 1.0))
    out.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])
