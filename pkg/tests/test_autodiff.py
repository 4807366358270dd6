import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from affect_forge import autodiff as ad
from affect_forge.autodiff import DomainError, Tape, Tensor, gradcheck

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


def grads_of(f, *xs):
    for x in xs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        out = f(*xs)
    tape.backward(out)
    return [x.grad for x in xs]


# --- elementwise examples

def test_add_example():
    np.testing.assert_array_equal(ad.ewise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])


def test_relu_example():
    np.testing.assert_array_equal(ad.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])


def test_grad_of_square():
    (g,) = grads_of(lambda x: (x * x).sum(), Tensor([3.0]))
    np.testing.assert_array_equal(g, [6.0])


def test_backward_rules_closed_form():
    x = np.array([-1.5, -0.2, 0.3, 1.7])
    (g,) = grads_of(lambda t: ad.relu(t).sum(), Tensor(x))
    np.testing.assert_array_equal(g, (x > 0).astype(float))
    (g,) = grads_of(lambda t: ad.tanh(t).sum(), Tensor(x))
    np.testing.assert_allclose(g, 1 - np.tanh(x) ** 2, rtol=1e-15)
    (g,) = grads_of(lambda t: ad.log(t).sum(), Tensor(np.abs(x)))
    np.testing.assert_allclose(g, 1 / np.abs(x), rtol=1e-15)


def test_clamp_zero_gradient_outside():
    (g,) = grads_of(lambda t: ad.clamp(t, -1.0, 1.0).sum(), Tensor([-3.0, -0.5, 0.5, 3.0]))
    np.testing.assert_array_equal(g, [0, 1, 1, 0])
    np.testing.assert_array_equal(ad.clamp(Tensor([-3.0, 3.0]), -1, 1).data, [-1, 1])


def test_log_domain_error():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.log(Tensor([-1.0]))


def test_non_broadcastable_shapes_rejected():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_ewise_arity_checks():
    with pytest.raises(ValueError):
        ad.ewise("add", Tensor([1.0]))
    with pytest.raises(ValueError):
        ad.ewise("relu", Tensor([1.0]), Tensor([1.0]))
    with pytest.raises(ValueError):
        ad.ewise("frobnicate", Tensor([1.0]))


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 1), elements=finite))
def test_broadcast_matches_explicit_tiling(a, col):
    tiled = np.tile(col, (1, 4))
    np.testing.assert_array_equal((Tensor(a) + Tensor(col)).data, (Tensor(a) + Tensor(tiled)).data)
    np.testing.assert_array_equal((Tensor(a) * Tensor(col)).data, (Tensor(a) * Tensor(tiled)).data)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_gradient_is_summed(a, row):
    _, g = grads_of(lambda x, y: (x * y).sum(), Tensor(a), Tensor(row))
    np.testing.assert_allclose(g, a.sum(axis=0), rtol=1e-12, atol=1e-12)


def test_reflected_operators_with_ndarray():
    t = Tensor([1.0, 2.0])
    out = np.array([3.0, 4.0]) * t
    assert isinstance(out, Tensor)
    np.testing.assert_array_equal(out.data, [3, 8])
    np.testing.assert_array_equal((1.0 - t).data, [0, -1])


# --- matmul

def test_matmul_identity_and_arithmetic():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ m).data, m.data)
    np.testing.assert_array_equal((Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_gradcheck(rng):
    a, b = Tensor(rng.uniform(-2, 2, (3, 4))), Tensor(rng.uniform(-2, 2, (4, 2)))
    assert gradcheck(lambda x, y: (x @ y).sum(), [a, b], h=1e-4) <= 1e-6


def test_matmul_backward_closed_form(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    dc = rng.normal(size=(3, 2))
    ga, gb = grads_of(lambda x, y: (x @ y * dc).sum(), Tensor(a), Tensor(b))
    np.testing.assert_allclose(ga, dc @ b.T, rtol=1e-14)
    np.testing.assert_allclose(gb, a.T @ dc, rtol=1e-14)


def test_matmul_inner_mismatch():
    with pytest.raises(ValueError, match="inner"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# --- reductions

def test_reduce_examples():
    assert ad.reduce("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0
    np.testing.assert_array_equal(ad.reduce("mean", Tensor([[1.0, 3.0], [3.0, 5.0]]), axis=0).data, [2.0, 4.0])


def test_max_first_argmax_tie_break():
    (g,) = grads_of(lambda x: x.max(), Tensor([2.0, 2.0, 1.0]))
    np.testing.assert_array_equal(g, [1, 0, 0])
    (g,) = grads_of(lambda x: x.max(axis=1).sum(), Tensor([[0.0, 5.0, 5.0], [7.0, 7.0, 7.0]]))
    np.testing.assert_array_equal(g, [[0, 1, 0], [1, 0, 0]])


def test_mean_backward_distributes():
    (g,) = grads_of(lambda x: x.mean(), Tensor(np.ones((2, 5))))
    np.testing.assert_allclose(g, np.full((2, 5), 0.1))


def test_reduce_axis_out_of_range():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 2))).sum(axis=2)
    with pytest.raises(ValueError):
        ad.reduce("median", Tensor([1.0]))


# --- softmax

def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-15)
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, np.log(2.0)])).data, [1 / 3, 2 / 3], rtol=1e-15)
    big = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == 1.0 and big[1] < 1e-300


@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_on_simplex(x):
    p = ad.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0) and np.all(p <= 1)


@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_strictly_inside_unit_interval_for_moderate_inputs(x):
    p = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(p > 0) and np.all(p < 1)


@given(arrays(np.float64, (2, 5), elements=finite))
def test_log_softmax_matches_log_of_softmax(x):
    np.testing.assert_allclose(ad.log_softmax(Tensor(x)).data, np.log(ad.softmax(Tensor(x)).data), atol=1e-12)


# --- backward

def test_backward_examples(rng):
    (g,) = grads_of(lambda x: x.sum(), Tensor(np.arange(5.0)))
    np.testing.assert_array_equal(g, np.ones(5))
    y = rng.normal(size=4)
    gx, gy = grads_of(lambda a, b: (a * b).sum(), Tensor(rng.normal(size=4)), Tensor(y))
    np.testing.assert_array_equal(gx, y)


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_no_recording_without_tape_or_grad():
    x = Tensor([1.0], requires_grad=True)
    y = x * 3
    assert not y.requires_grad
    with Tape() as tape:
        Tensor([1.0]) * 3
    assert tape.nodes == []


def test_tape_is_topologically_ordered(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with Tape() as tape:
        loss = (ad.tanh(x * 2) + x).sum()
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(t) in seen or not t.requires_grad for t in node.inputs)
        seen.add(id(node.out))
    assert id(loss) in seen


def test_backward_deterministic_bitwise(rng):
    w = rng.normal(size=(4, 3))
    xs = rng.normal(size=(5, 4))

    def run():
        (g,) = grads_of(lambda t: ad.softmax(Tensor(xs) @ t, axis=1).max(axis=1).sum(), Tensor(w))
        return g

    assert run().tobytes() == run().tobytes()


def test_mlp_gradcheck_every_parameter(rng):
    w1, b1 = Tensor(rng.uniform(-1, 1, (4, 6))), Tensor(rng.uniform(-1, 1, 6))
    w2, b2 = Tensor(rng.uniform(-1, 1, (6, 3))), Tensor(rng.uniform(-1, 1, 3))
    x, y = rng.normal(size=(8, 4)), rng.normal(size=(8, 3))

    def loss(a, b, c, d):
        diff = ad.tanh(Tensor(x) @ a + b) @ c + d - y
        return (diff * diff).mean()

    assert gradcheck(loss, [w1, b1, w2, b2]) <= 1e-4


# --- gradcheck itself

@given(arrays(np.float64, (5,), elements=finite))
def test_gradcheck_square(x):
    assert gradcheck(lambda t: (t * t).sum(), Tensor(x)) <= 1e-8


def test_gradcheck_constant_is_zero():
    assert gradcheck(lambda t: Tensor(3.0) + t.sum() * 0.0, Tensor([1.0, 2.0])) == 0.0


def test_gradcheck_rejects_non_scalar_and_bad_step():
    with pytest.raises(ValueError):
        gradcheck(lambda t: t * 2, Tensor([1.0, 2.0]))
    with pytest.raises(ValueError):
        gradcheck(lambda t: t.sum(), Tensor([1.0]), h=0.0)


def test_gradcheck_restores_inputs():
    x = Tensor([0.5, -0.25])
    before = x.data.copy()
    gradcheck(lambda t: ad.exp(t).sum(), x)
    assert x.data.tobytes() == before.tobytes()
    assert not x.requires_grad and x.grad is None


def test_gradcheck_detects_wrong_gradient():
    def bad_square(a):
        return ad.make_result(a.data ** 2, [a], lambda g: [g * a.data])  # missing factor 2

    assert gradcheck(lambda t: bad_square(t).sum(), Tensor([1.0, 2.0])) > 0.1


# --- shape plumbing

def test_getitem_reshape_transpose_concat_gradients(rng):
    x = rng.normal(size=(2, 3))
    (g,) = grads_of(lambda t: t[:, [0, 0, 2]].sum(), Tensor(x))
    np.testing.assert_array_equal(g, [[2, 0, 1], [2, 0, 1]])
    (g,) = grads_of(lambda t: (t.reshape(3, 2).T * Tensor(np.arange(6.0).reshape(2, 3))).sum(), Tensor(x))
    np.testing.assert_array_equal(g, np.arange(6.0).reshape(2, 3).T.reshape(2, 3))
    ga, gb = grads_of(lambda a, b: (ad.concat([a, b], axis=0) * Tensor(np.arange(9.0).reshape(3, 3))).sum(),
                      Tensor(x), Tensor(rng.normal(size=(1, 3))))
    np.testing.assert_array_equal(gb, [[6, 7, 8]])


@given(st.sampled_from(["add", "sub", "mul", "neg", "relu", "tanh", "exp", "sigmoid"]),
       arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_ewise_outputs_finite(op, a, b):
    unary = op in ("neg", "relu", "tanh", "exp", "sigmoid")
    out = ad.ewise(op, Tensor(a)) if unary else ad.ewise(op, Tensor(a), Tensor(b))
    assert out.shape == (2, 3) and np.all(np.isfinite(out.data))
