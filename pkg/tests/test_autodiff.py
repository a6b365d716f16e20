import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixtune import autodiff as ad
from prefixtune.autodiff import BackwardError, Tensor, analytic_grads, numerical_grad, relative_error


def check_grad(f, tensors, tol=1e-5):
    analytic = analytic_grads(f, tensors)
    for t, a in zip(tensors, analytic):
        num = numerical_grad(f, t, 1e-6)
        assert relative_error(a, num) < tol


def leaf(rng, *shape):
    return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)


def test_matmul_identity_and_hand_case():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_grad_of_sum_is_ones_times_bt(rng):
    a, b = leaf(rng, 4, 5), leaf(rng, 5, 2)
    (ga,) = analytic_grads(lambda: ad.tsum(ad.matmul(a, b)), [a])
    assert np.allclose(ga, np.ones((4, 2)) @ b.data.T)
    check_grad(lambda: ad.tsum(ad.matmul(a, b)), [a, b])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_values():
    assert np.allclose(ad.softmax(Tensor(np.zeros(3))).data, 1 / 3)
    out = ad.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out)) and np.allclose(out, 0.5)


def test_layer_norm_values():
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(ad.layer_norm(Tensor(np.full((1, 3), 7.0)), g, b).data, 0.0)
    y = ad.layer_norm(Tensor([[1.0, 2.0, 3.0]]), g, b, eps=0.0).data
    assert abs(y.mean()) < 1e-9 and abs(y.var() - 1) < 1e-9


def test_cross_entropy_values():
    logits = np.full((3, 5), -50.0)
    logits[np.arange(3), [0, 2, 4]] = 50.0
    assert float(ad.cross_entropy(Tensor(logits), [0, 2, 4]).data) < 1e-12
    assert np.isclose(float(ad.cross_entropy(Tensor(np.zeros((6, 4))), np.arange(6) % 4).data), np.log(4))


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        ad.cross_entropy(Tensor(np.zeros((2, 4))), [0, 1], mask=[False, False])
    with pytest.raises(ValueError):
        ad.cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])


def test_cross_entropy_ignores_unmasked_targets(rng):
    x = leaf(rng, 4, 6)
    mask = np.array([True, False, True, False])
    g1 = analytic_grads(lambda: ad.cross_entropy(x, [1, 2, 3, 4], mask), [x])[0]
    g2 = analytic_grads(lambda: ad.cross_entropy(x, [1, 5, 3, 0], mask), [x])[0]
    assert np.array_equal(g1, g2)


def test_backward_sum_gives_ones(rng):
    x = leaf(rng, 3, 4)
    with ad.Tape():
        loss = ad.tsum(x)
    ad.backward(loss)
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_twice_raises(rng):
    x = leaf(rng, 3)
    with ad.Tape():
        loss = ad.tsum(x * x)
    ad.backward(loss)
    with pytest.raises(BackwardError):
        ad.backward(loss)


def test_frozen_tensor_gets_no_grad(rng):
    x, w = leaf(rng, 2, 3), Tensor(rng.normal(size=(3, 2)))
    with ad.Tape():
        loss = ad.tsum(ad.matmul(x, w))
    ad.backward(loss)
    assert w.grad is None and x.grad is not None


def test_softmax_cross_entropy_composite(rng):
    x = leaf(rng, 5, 7)
    w = Tensor(rng.normal(size=(7, 7)))
    check_grad(lambda: ad.cross_entropy(ad.matmul(ad.softmax(x), w), [0, 1, 2, 3, 4]), [x])


def test_no_recording_outside_tape(rng):
    x = leaf(rng, 3)
    y = ad.tanh(x)
    assert y.is_leaf and not y.requires_grad


OPS = {
    "add": lambda rng: ((lambda a, b: ad.tsum(ad.add(a, b) * ad.add(a, b))), [(3, 4), (4,)]),
    "mul": lambda rng: ((lambda a, b: ad.tsum(a * b)), [(3, 4), (3, 4)]),
    "neg": lambda rng: ((lambda a: ad.tsum(ad.neg(a) * a)), [(5,)]),
    "tanh": lambda rng: ((lambda a: ad.tsum(ad.tanh(a))), [(3, 4)]),
    "gelu": lambda rng: ((lambda a: ad.tsum(ad.gelu(a))), [(3, 4)]),
    "exp": lambda rng: ((lambda a: ad.tsum(ad.exp(a))), [(2, 3)]),
    "matmul_batched": lambda rng: ((lambda a, b: ad.tsum(ad.tanh(ad.matmul(a, b)))), [(2, 3, 4), (4, 5)]),
    "matmul_4d": lambda rng: ((lambda a, b: ad.tsum(ad.tanh(ad.matmul(a, b)))), [(2, 2, 3, 4), (2, 2, 4, 3)]),
    "reshape_transpose": lambda rng: ((lambda a: ad.tsum(ad.tanh(ad.transpose(ad.reshape(a, (3, 2, 2)), (2, 0, 1))) * Tensor(np.arange(12.0).reshape(2, 3, 2)))), [(3, 4)]),
    "expand": lambda rng: ((lambda a: ad.tsum(ad.tanh(ad.expand(a, (3, 2, 4))))), [(1, 2, 4)]),
    "concat": lambda rng: ((lambda a, b: ad.tsum(ad.tanh(ad.concat([a, b], axis=1)))), [(2, 3), (2, 2)]),
    "getitem": lambda rng: ((lambda a: ad.tsum(ad.tanh(a[:, 1:3]))), [(3, 4)]),
    "take_rows": lambda rng: ((lambda a: ad.tsum(ad.tanh(ad.take_rows(a, np.array([[0, 2, 2], [1, 0, 3]]))))), [(4, 3)]),
    "tmean": lambda rng: ((lambda a: ad.tsum(ad.tanh(ad.tmean(a, axis=1)))), [(3, 4)]),
    "softmax": lambda rng: ((lambda a: ad.tsum(ad.softmax(a) * ad.softmax(a))), [(3, 5)]),
    "layer_norm": lambda rng: ((lambda x, g, b: ad.tsum(ad.tanh(ad.layer_norm(x, g, b)))), [(3, 6), (6,), (6,)]),
    "cross_entropy": lambda rng: ((lambda a: ad.cross_entropy(a, [1, 0, 3], [True, True, False])), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(2))
def test_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    f, shapes = OPS[name](rng)
    ts = [leaf(rng, *s) for s in shapes]
    check_grad(lambda: f(*ts), ts)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 5))
def test_softmax_rows_are_distributions(seed, n, m):
    x = np.random.default_rng(seed).normal(scale=30, size=(n, m))
    p = ad.softmax(Tensor(x)).data
    assert np.all(p > 0) and np.allclose(p.sum(axis=1), 1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_is_bit_reproducible(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 6))
    g, b = np.ones(6), np.zeros(6)

    def run():
        h = ad.layer_norm(ad.matmul(Tensor(x), Tensor(w)), Tensor(g), Tensor(b))
        return ad.softmax(ad.gelu(h)).data

    assert np.array_equal(run(), run())


def test_float32_stays_float32(rng):
    x = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
    with ad.Tape():
        loss = ad.cross_entropy(ad.tanh(x * 2.0 + 1.0), [0, 1, 2])
    ad.backward(loss)
    assert loss.dtype == np.float32 and x.grad.dtype == np.float32
