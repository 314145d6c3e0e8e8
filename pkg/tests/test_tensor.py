import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twist import tensor as T
from twist.tensor import AdamState, Rng, Tensor, adam_step

from conftest import rel_err

H = 1e-3


def tape_grads(build, arrays, weights):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*ts)
    T.sum_all(T.mul(out, Tensor(weights))).backward()
    return [t.grad for t in ts]


def fd_grads(ref, arrays, weights):
    arrays = [np.asarray(a, np.float64) for a in arrays]
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + H
            up = float((ref(*arrays) * weights).sum())
            a[idx] = old - H
            down = float((ref(*arrays) * weights).sum())
            a[idx] = old
            g[idx] = (up - down) / (2 * H)
        grads.append(g)
    return grads


def check(build, ref, arrays, seed=0, tol=1e-3):
    out = ref(*[np.asarray(a, np.float64) for a in arrays])
    w = np.random.default_rng(seed).standard_normal(np.shape(out))
    for ga, gf in zip(tape_grads(build, arrays, w.astype(np.float32)), fd_grads(ref, arrays, w)):
        assert rel_err(ga, gf) < tol


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_projector():
    m = Tensor([[1, 2], [3, 4]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)
    out = T.matmul(Tensor([[1, 0], [0, 0]]), Tensor([[5, 6], [7, 8]]))
    assert np.array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_gradient_matches_finite_differences():
    check(T.matmul, lambda a, b: a @ b, [rnd(3, 4), rnd(4, 2, seed=1)])


def test_batched_matmul_gradients():
    check(T.matmul, lambda a, b: a @ b, [rnd(2, 3, 4), rnd(4, 5, seed=1)])
    check(T.matmul, lambda a, b: a @ b, [rnd(2, 3, 4), rnd(2, 4, 2, seed=1)])


def test_matmul_shape_mismatch():
    with pytest.raises(T.DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- layer norm

def ln_ref(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(T.layer_norm(Tensor(np.full((1, 4), 3.0)), one, zero).data, np.zeros((1, 4)))
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)
    b = Tensor([0.5, -2.0, 1.0, 3.0])
    out = T.layer_norm(Tensor(rnd(3, 4)), Tensor(np.zeros(4)), b).data
    assert np.array_equal(out, np.broadcast_to(b.data, (3, 4)))


def test_layer_norm_degenerate_width():
    with pytest.raises(T.DegenerateInputError):
        T.layer_norm(Tensor(np.ones((2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


def test_layer_norm_gradient():
    check(T.layer_norm, ln_ref, [rnd(3, 5), rnd(5, seed=1) + 1, rnd(5, seed=2)])


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(1, 6), d=st.integers(2, 64), seed=st.integers(0, 10_000),
       scale=st.floats(0.1, 50))
def test_layer_norm_rows_are_standardized(rows, d, seed, scale):
    x = np.random.default_rng(seed).standard_normal((rows, d)).astype(np.float32) * np.float32(scale)
    # reject near-constant rows where the eps term dominates
    if (x.std(-1) < 1e-1).any():
        return
    z = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data.astype(np.float64)
    assert np.abs(z.mean(-1)).max() < 1e-5
    assert np.abs(z.std(-1) - 1).max() < 1e-3


# ---------------------------------------------------------------- activations, softmax, loss

def test_relu_examples_and_gradient():
    assert T.relu(Tensor([-3.0, 3.0])).data.tolist() == [0.0, 3.0]
    x = rnd(4, 5)
    x[np.abs(x) < 0.01] = 0.5  # keep away from the kink
    check(T.relu, lambda a: np.maximum(a, 0), [x])


def test_gelu_gradient():
    c = math.sqrt(2 / math.pi)
    check(T.gelu, lambda a: 0.5 * a * (1 + np.tanh(c * (a + 0.044715 * a ** 3))), [rnd(3, 4)])


def softmax_ref(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_softmax_examples_and_gradient():
    assert np.allclose(T.softmax_rows(Tensor(np.zeros((1, 4)))).data, 0.25)
    check(T.softmax_rows, softmax_ref, [rnd(3, 6)])


def test_scaled_masked_softmax_matches_composition():
    mask = np.triu(np.full((5, 5), -np.inf, np.float32), 1)
    check(lambda x: T.scaled_masked_softmax(x, 0.25, mask),
          lambda x: softmax_ref(0.25 * x + mask), [rnd(2, 5, 5)])


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(1, 5), d=st.integers(1, 40), seed=st.integers(0, 10_000),
       scale=st.floats(0.01, 30))
def test_softmax_rows_sum_to_one(rows, d, seed, scale):
    x = np.random.default_rng(seed).standard_normal((rows, d)).astype(np.float32) * np.float32(scale)
    s = T.softmax_rows(Tensor(x)).data.astype(np.float64).sum(-1)
    assert np.abs(s - 1).max() <= 1e-6


def test_cross_entropy_uniform_is_log_v():
    V = 13
    out = T.cross_entropy(Tensor(np.zeros((2, 3, V))), np.zeros((2, 3), int))
    assert out.item() == pytest.approx(math.log(V), rel=1e-6)


def test_cross_entropy_gradient_and_empty():
    targets = np.array([[1, 0, 3]])

    def ref(lg):
        lse = np.log(np.exp(lg - lg.max(-1, keepdims=True)).sum(-1)) + lg.max(-1)
        picked = np.take_along_axis(lg, targets[..., None], -1)[..., 0]
        return np.asarray((lse - picked).mean())

    check(lambda lg: T.cross_entropy(lg, targets), ref, [rnd(1, 3, 4)])
    with pytest.raises(T.InvalidInputError):
        T.cross_entropy(Tensor(np.zeros((1, 0, 4))), np.zeros((1, 0), int))


def test_embedding_gradient_accumulates_repeats():
    ids = np.array([[0, 2, 2]])
    check(lambda t: T.embedding(t, ids), lambda t: t[ids], [rnd(3, 4)])


def test_elementwise_and_shape_ops_gradients():
    check(T.add, lambda a, b: a + b, [rnd(2, 3), rnd(3, seed=1)])
    check(T.mul, lambda a, b: a * b, [rnd(2, 3), rnd(2, 1, seed=1)])
    check(lambda a: T.scale(a, 2.5), lambda a: 2.5 * a, [rnd(4)])
    check(lambda a: T.reshape(a, (3, 2)), lambda a: a.reshape(3, 2), [rnd(2, 3)])
    check(lambda a: T.transpose(a, (1, 0, 2)), lambda a: a.transpose(1, 0, 2), [rnd(2, 3, 2)])


def test_shared_parent_gets_summed_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    T.sum_all(T.mul(x, x)).backward()
    assert x.grad.tolist() == [4.0]


# ---------------------------------------------------------------- adam, rng

def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(rnd(3, 3), requires_grad=True)}
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros((3, 3), np.float32)}, AdamState(), 0.1)
    assert np.array_equal(p["w"].data, before)


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    st_ = AdamState()
    adam_step(p, {"w": np.array([1.0], np.float32)}, st_, 0.1)
    assert p["w"].data[0] == pytest.approx(0.9, abs=1e-6)
    assert st_.t == 1


def test_adam_rejects_nonfinite():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    with pytest.raises(T.NonFiniteGradientError, match="'w'"):
        adam_step(p, {"w": np.array([np.nan], np.float32)}, AdamState(), 0.1)


def _adam_run(seed):
    rng = np.random.default_rng(seed)
    p = {"a": Tensor(rng.standard_normal((4, 4)), requires_grad=True)}
    s = AdamState()
    for _ in range(5):
        adam_step(p, {"a": rng.standard_normal((4, 4)).astype(np.float32)}, s, 0.01)
    return p["a"].data, s


def test_adam_deterministic():
    (a1, s1), (a2, s2) = _adam_run(3), _adam_run(3)
    assert np.array_equal(a1, a2)
    assert np.array_equal(s1.m["a"], s2.m["a"]) and np.array_equal(s1.v["a"], s2.v["a"])


def test_rng_streams():
    a = Rng(5, 1).generator(2).standard_normal(8)
    assert np.array_equal(a, Rng(5, 1).generator(2).standard_normal(8))
    assert not np.array_equal(a, Rng(5, 2).generator(2).standard_normal(8))
    assert not np.array_equal(a, Rng(6, 1).generator(2).standard_normal(8))
    assert Rng(5).child(3) == Rng(5, 3)


def test_tensor_shape_invariant():
    t = Tensor(np.zeros((2, 3)))
    assert t.size == 6 and t.shape == (2, 3) and t.data.dtype == np.float32
