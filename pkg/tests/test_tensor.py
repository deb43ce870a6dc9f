import math

import numpy as np
import pytest

from consistent_cg import tensor as T
from consistent_cg.errors import GraphError, NumericError, ShapeError
from consistent_cg.tensor import ParamSet, Tensor

from oracles import central_fd, rel_err


def test_matmul_identity():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)


def test_sigmoid_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_bce_half():
    assert T.binary_cross_entropy(Tensor([0.5]), Tensor([1.0])).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_clamps_extremes():
    out = T.binary_cross_entropy(Tensor([0.0, 1.0]), Tensor([1.0, 0.0])).data
    assert np.allclose(out, -math.log(T.BCE_EPS))


def test_bce_rejects_out_of_range():
    with pytest.raises(NumericError):
        T.binary_cross_entropy(Tensor([1.2]), Tensor([1.0]))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(NumericError):
        Tensor([1.0, float("nan")])
    big = Tensor([1e308])
    with pytest.raises(NumericError):
        T.mul(big, 10.0)


def test_square_derivative():
    p = ParamSet({"x": np.array([3.0])})
    g = T.backward(T.sum(p["x"] * p["x"]), p)
    assert g["x"].data[0] == 6.0


def test_disconnected_leaf_gets_zero():
    p = ParamSet({"x": np.array([3.0]), "y": np.array([1.0, 2.0])})
    g = T.backward(T.sum(p["y"] * 2.0), p)
    assert np.array_equal(g["x"].data, [0.0])
    g = T.backward(Tensor(5.0), p)
    assert np.array_equal(g["x"].data, [0.0])


def test_non_scalar_loss():
    p = ParamSet({"x": np.array([1.0, 2.0])})
    with pytest.raises(ShapeError):
        T.backward(p["x"] * 2.0, p)


def test_loss_not_on_tape():
    p = ParamSet({"x": np.array([1.0, 2.0])})
    with T.no_grad():
        loss = T.sum(p["x"] * p["x"])
    with pytest.raises(GraphError):
        T.backward(loss, p)


def test_paramset_roundtrip():
    rng = np.random.default_rng(0)
    p = ParamSet({"b": rng.normal(size=(2, 3)), "a": rng.normal(size=4)})
    assert list(p) == ["a", "b"]
    q = p.unflatten(p.flatten())
    for name in p:
        assert np.array_equal(p[name].data, q[name].data)
    with pytest.raises(ShapeError):
        p.unflatten(np.zeros(3))


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


# ---------------------------------------------------------------- finite differences over primitives


def _fd_check(build, shapes, rng, positive=False, unit=False):
    xs = []
    for s in shapes:
        x = rng.uniform(0.05, 0.95, size=s) if unit else rng.normal(size=s)
        if positive:
            x = np.abs(x) + 0.5
        xs.append(x)
    weights = rng.normal(size=build(*[Tensor(x) for x in xs]).shape)
    sizes = [x.size for x in xs]

    def scalar(flat):
        parts, off = [], 0
        for x, n in zip(xs, sizes):
            parts.append(Tensor(flat[off : off + n].reshape(x.shape)))
            off += n
        with T.no_grad():
            return float(np.sum(build(*parts).data * weights))

    params = ParamSet({f"x{k}": x for k, x in enumerate(xs)})
    leaves = [params[f"x{k}"] for k in range(len(xs))]
    loss = T.sum(build(*leaves) * Tensor(weights))
    analytic = np.concatenate([g.data.reshape(-1) for g in T.grad(loss, leaves)])
    flat = np.concatenate([x.reshape(-1) for x in xs])
    return rel_err(analytic, central_fd(scalar, flat))


PRIMITIVES = {
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)], {}),
    "add_broadcast": (lambda a, b: T.add(a, b), [(3, 4), (4,)], {}),
    "multiply": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)], {}),
    "relu": (lambda a: T.relu(a), [(5, 3)], {}),
    "sigmoid": (lambda a: T.sigmoid(a), [(5, 3)], {}),
    "mean": (lambda a: T.mean(a, axis=0), [(5, 3)], {}),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(3, 2), (3, 4)], {}),
    "bce": (lambda p: T.binary_cross_entropy(p, Tensor(np.array([1.0, 0.0, 1.0, 0.0, 1.0]))), [(5,)], {"unit": True}),
    "reciprocal": (lambda a: T.reciprocal(a), [(4,)], {"positive": True}),
    "take": (lambda a: T.take(a, np.array([2, 0, 2, 1])), [(3, 2)], {}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(100))
def test_primitive_gradients_match_finite_differences(name, seed):
    build, shapes, kw = PRIMITIVES[name]
    rng = np.random.default_rng([seed, len(name)])
    assert _fd_check(build, shapes, rng, **kw) < 1e-4


# ---------------------------------------------------------------- second order


def test_hvp_diagonal_quadratic():
    p = ParamSet({"x": np.array([0.3, -1.2])})
    out = T.hvp(lambda q: T.sum(q["x"] * q["x"] * Tensor([1.0, 3.0])), p, [1.0, 1.0])
    assert np.allclose(out, [2.0, 6.0], atol=1e-12)


def test_hvp_identity_hessian():
    rng = np.random.default_rng(1)
    p = ParamSet({"x": rng.normal(size=6)})
    v = rng.normal(size=6)
    out = T.hvp(lambda q: T.sum(q["x"] * q["x"]) * 0.5, p, v)
    assert np.allclose(out, v, atol=1e-12)


def _quadratic(a):
    n = a.shape[0]
    return lambda q: T.sum(q["x"] * T.reshape(T.matmul(Tensor(a), T.reshape(q["x"], (n, 1))), (n,))) * 0.5


@pytest.mark.parametrize("seed", range(10))
def test_hvp_random_quadratic(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(5, 5))
    a = a + a.T
    p = ParamSet({"x": rng.normal(size=5)})
    v = rng.normal(size=5)
    assert np.max(np.abs(T.hvp(_quadratic(a), p, v) - a @ v)) < 1e-8


def test_hvp_dimension_mismatch():
    p = ParamSet({"x": np.ones(3)})
    with pytest.raises(ShapeError):
        T.hvp(lambda q: T.sum(q["x"] * q["x"]), p, np.ones(2))


def test_mixed_vjp_scalar_product():
    th, om = ParamSet({"t": np.array([0.7])}), ParamSet({"w": np.array([-0.4])})
    out = T.mixed_vjp(lambda t, w: T.sum(t["t"] * w["w"]), th, om, [2.0])
    assert np.allclose(out, [2.0])


def test_mixed_vjp_no_coupling():
    th, om = ParamSet({"t": np.array([0.7])}), ParamSet({"w": np.array([-0.4])})
    out = T.mixed_vjp(lambda t, w: T.sum(t["t"] * t["t"]), th, om, [5.0])
    assert np.array_equal(out, [0.0])


@pytest.mark.parametrize("seed", range(10))
def test_mixed_vjp_bilinear(seed):
    rng = np.random.default_rng(seed)
    b = rng.normal(size=(3, 3))
    th, om = ParamSet({"t": rng.normal(size=3)}), ParamSet({"w": rng.normal(size=3)})
    v = rng.normal(size=3)

    def loss(t, w):
        return T.sum(T.matmul(T.reshape(t["t"], (1, 3)), Tensor(b)) * T.reshape(w["w"], (1, 3)))

    assert np.max(np.abs(T.mixed_vjp(loss, th, om, v) - b.T @ v)) < 1e-8


def _mlp_loss(x_data, y_data):
    x, y = Tensor(x_data), Tensor(y_data)

    def loss(q):
        h = T.sigmoid(T.matmul(x, q["w1"]) + q["b1"])
        p = T.reshape(T.sigmoid(T.matmul(h, q["w2"])), (x_data.shape[0],))
        return T.sum(T.binary_cross_entropy(p, y))

    return loss


@pytest.mark.parametrize("seed", range(20))
def test_hvp_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    p = ParamSet({"w1": rng.normal(size=(3, 4)), "b1": rng.normal(size=4), "w2": rng.normal(size=(4, 1))})
    loss = _mlp_loss(rng.normal(size=(6, 3)), (rng.random(6) > 0.5).astype(float))
    op = T.hvp_operator(loss, p)
    u, v = rng.normal(size=p.size), rng.normal(size=p.size)
    assert abs(u @ op(v) - v @ op(u)) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_hvp_matches_finite_difference_of_gradient(seed):
    rng = np.random.default_rng(seed)
    p = ParamSet({"w1": rng.normal(size=(3, 4)), "b1": rng.normal(size=4), "w2": rng.normal(size=(4, 1))})
    loss = _mlp_loss(rng.normal(size=(6, 3)), (rng.random(6) > 0.5).astype(float))
    v = rng.normal(size=p.size)
    h = 1e-5

    def grad_at(flat):
        q = p.unflatten(flat)
        return T.backward(loss(q), q).flatten()

    fd = (grad_at(p.flatten() + h * v) - grad_at(p.flatten() - h * v)) / (2 * h)
    assert rel_err(T.hvp(loss, p, v), fd) < 1e-5


def test_recording_does_not_change_values():
    rng = np.random.default_rng(3)
    p = ParamSet({"w1": rng.normal(size=(3, 4)), "b1": rng.normal(size=4), "w2": rng.normal(size=(4, 1))})
    loss = _mlp_loss(rng.normal(size=(6, 3)), (rng.random(6) > 0.5).astype(float))
    on = loss(p).data
    with T.no_grad():
        off = loss(p).data
    assert on.tobytes() == off.tobytes()
