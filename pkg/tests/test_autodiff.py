import numpy as np
import pytest

from deepca import admm, oracle
from deepca import autodiff as ad
from deepca.linop import Conv2dOperator, DenseOperator, apply_forward
from deepca.model import Model, dense_layer, init_dense_weight
from deepca.prox import PenaltySpec
from deepca.tensor import DimensionError


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_square_gradient():
    x = ad.leaf(3.0)
    y = x * x
    ad.backward(y)
    assert x.grad == 6.0


def test_record_examples():
    n = ad.record("add", [1.0], [2.0])
    np.testing.assert_array_equal(n.value, [3.0])
    B = DenseOperator(np.array([[1.0, 2.0], [3.0, 4.0]]))
    m = ad.record("matmul", B, np.array([1.0, 1.0]))
    assert m.value.tobytes() == apply_forward(B, np.array([1.0, 1.0])).tobytes()


def test_chain_of_three_ops():
    x = ad.leaf(np.array([1.0, -2.0]))
    y = ad.total(ad.scale(ad.add(x, x), 3.0))
    nodes = ad._toposort(y)
    assert sum(1 for n in nodes if n.parents) == 3
    ad.backward(y)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_requires_scalar_node():
    with pytest.raises(TypeError):
        ad.backward(np.array(1.0))
    with pytest.raises(ValueError):
        ad.backward(ad.leaf(np.ones(2)) * 2.0)


def test_eager_mode_returns_arrays():
    out = ad.add(np.ones(2), np.ones(2))
    assert isinstance(out, np.ndarray)


def test_relu_layer_gradient_matches_fd():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((4, 5))
    x = rng.standard_normal(4)
    b = np.full(5, 0.1)
    spec = PenaltySpec.nonneg_l1(b)
    op = DenseOperator(W)

    def f(Wv):
        z = ad.prox(spec, ad.linear_adjoint(op, x, Wv))
        return ad.squared_error(z, np.zeros(5))

    Wl = ad.leaf(W)
    ad.backward(f(Wl))
    fd = oracle.finite_difference_grad(lambda t: float(f(t)), W)
    assert _rel(Wl.grad, fd) <= 1e-5


def _fd_check(build, inputs, tol=1e-5):
    leaves = [ad.leaf(a) for a in inputs]
    ad.backward(build(*leaves))
    for i, a in enumerate(inputs):
        fd = oracle.finite_difference_grad(
            lambda t: float(ad.value_of(build(*(inputs[:i] + [t] + inputs[i + 1:])))), a
        )
        assert _rel(leaves[i].grad, fd) <= tol, i


def test_op_vjps_match_fd():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3, 4))
    _fd_check(lambda x, y: ad.total(ad.mul(ad.sub(x, y), ad.add(x, y))), [a, b])
    _fd_check(lambda x: ad.total(ad.neg(ad.scale(x, 2.5))), [a])
    _fd_check(lambda x, y: ad.total(ad.mul(x, y)), [a, rng.standard_normal(4)])

    conv = Conv2dOperator(rng.standard_normal((2, 3, 3, 3)), (3, 5, 6), stride=2, pad=1)
    w = rng.standard_normal((2,) + conv.out_shape)
    v = rng.standard_normal((2,) + conv.in_shape)
    t = rng.standard_normal((2,) + conv.in_shape)
    _fd_check(lambda K, ww: ad.squared_error(ad.linear_forward(conv, ww, K), t), [conv.weight, w])
    _fd_check(lambda K, vv: ad.squared_error(ad.linear_adjoint(conv, vv, K), w), [conv.weight, v])

    B = rng.standard_normal((4, 6))
    r = rng.standard_normal((3, 6))
    _fd_check(lambda BB, rr: ad.squared_error(ad.gram_solve(BB, rr, 0.7), np.ones((3, 6))), [B, r])

    scores = rng.standard_normal((4, 5))
    _fd_check(lambda s: ad.softmax_cross_entropy(s, [0, 4, 2, 2]), [scores])

    sx = PenaltySpec.simplex(shape=(5,))
    _fd_check(lambda s: ad.squared_error(ad.prox(sx, s), np.full((4, 5), 0.3)), [scores])
    eq = PenaltySpec.equality([1, 3], [0.5, -1.0], 5)
    _fd_check(lambda s: ad.squared_error(ad.prox(eq, s), np.zeros((4, 5))), [scores])
    l1 = PenaltySpec.nonneg_l1(np.full(5, 0.05))
    _fd_check(lambda s, bb: ad.squared_error(ad.prox(l1, s, bb), np.zeros((4, 5))), [scores, np.full(5, 0.05)])


def test_loss_examples():
    assert ad.squared_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert ad.squared_error(np.array([2.0]), np.array([0.0])) == 2.0
    assert ad.softmax_cross_entropy(np.zeros(4), 1) == pytest.approx(np.log(4.0), abs=1e-15)
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(np.zeros(4), 4)
    with pytest.raises(DimensionError):
        ad.squared_error(np.zeros(2), np.zeros(3))


def _two_layer(rng):
    l1 = dense_layer(init_dense_weight(6, 5, rng), PenaltySpec.nonneg_l1(np.full(5, 0.1), learnable=True))
    l2 = dense_layer(init_dense_weight(5, 4, rng), PenaltySpec.nonneg_l1(np.full(4, 0.05), learnable=True))
    return Model([l1, l2])


def _unrolled_grads(model, x, y, T):
    leaves = [ad.leaf(p) for _, p, _ in model.parameters()]
    st = admm.infer(model, x, T, params=leaves)
    ad.backward(ad.squared_error(st.z[-1], y))
    return [l.grad for l in leaves]


@pytest.mark.parametrize("T", [1, 2, 3])
def test_unrolled_admm_gradient_matches_fd(T):
    rng = np.random.default_rng(10 + T)
    model = _two_layer(rng)
    params = [p for _, p, _ in model.parameters()]
    for _ in range(50):
        x, y = rng.standard_normal((2, 3, 6))[0], rng.standard_normal((3, 4))
        log = []
        admm.infer(model, x, T, kink_log=log)
        if min(float(np.min(d)) for d in log) >= 1e-4:
            break
    grads = _unrolled_grads(model, x, y, T)

    def f(ps):
        return float(ad.value_of(ad.squared_error(admm.infer(model, x, T, params=ps).z[-1], y)))

    for i, g in enumerate(grads):
        fd = oracle.finite_difference_grad(lambda t: f(params[:i] + [t] + params[i + 1:]), params[i])
        assert _rel(g, fd) <= 1e-4


def test_batch_gradient_is_sum_of_per_example():
    rng = np.random.default_rng(3)
    model = _two_layer(rng)
    x, y = rng.standard_normal((4, 6)), rng.standard_normal((4, 4))
    total = _unrolled_grads(model, x, y, 3)
    parts = [_unrolled_grads(model, x[i:i + 1], y[i:i + 1], 3) for i in range(4)]
    for k, g in enumerate(total):
        np.testing.assert_allclose(g, sum(p[k] for p in parts), atol=1e-10)


def test_gradients_deterministic():
    rng = np.random.default_rng(4)
    model = _two_layer(rng)
    x, y = rng.standard_normal((4, 6)), rng.standard_normal((4, 4))
    a = _unrolled_grads(model, x, y, 3)
    b = _unrolled_grads(model, x, y, 3)
    assert all(u.tobytes() == v.tobytes() for u, v in zip(a, b))


def test_recorded_values_equal_eager():
    rng = np.random.default_rng(5)
    model = _two_layer(rng)
    x = rng.standard_normal((3, 6))
    eager = admm.infer(model, x, 4)
    leaves = [ad.leaf(p) for _, p, _ in model.parameters()]
    rec = admm.infer(model, x, 4, params=leaves)
    for a, b in zip(eager.z, rec.z):
        assert a.tobytes() == ad.value_of(b).tobytes()
