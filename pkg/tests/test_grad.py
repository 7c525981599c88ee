"""Engine-level tests: forward values, gradient routing, finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab import grad as G
from unlearnlab import nnops
from unlearnlab.errors import ContractError, DomainError, ShapeError

RNG = np.random.default_rng(0)


def test_relu_forward():
    assert np.array_equal(G.relu(G.tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_softmax_symmetry():
    assert np.allclose(G.softmax(G.tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_matmul_row_sums():
    out = G.matmul(G.tensor(np.ones((2, 3))), G.tensor(np.ones((3, 1))))
    assert np.array_equal(out.data, [[3.0], [3.0]])


def test_backward_square():
    x = G.tensor([1.0, 2.0], requires_grad=True)
    gmap = G.backward(G.sum(G.mul(x, x)))
    assert np.array_equal(gmap[x], [2.0, 4.0])


def test_backward_sigmoid_at_zero():
    w = G.tensor(0.0, requires_grad=True)
    const = 3.0
    gmap = G.backward(G.scalar_mul(G.sigmoid(w), const))
    assert np.allclose(gmap[w], 0.25 * const)


def test_backward_requires_scalar_root():
    x = G.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        G.backward(G.mul(x, x))


def test_off_tape_leaf_gradient_absent():
    x = G.tensor([1.0], requires_grad=True)
    y = G.tensor([2.0], requires_grad=True)
    gmap = G.backward(G.sum(G.mul(x, x)))
    assert y not in gmap


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        G.add(G.tensor([1.0]), G.tensor([1.0, 2.0]))
    with pytest.raises(ShapeError):
        G.matmul(G.tensor(np.ones((2, 3))), G.tensor(np.ones((2, 3))))


def test_log_domain_error():
    with pytest.raises(DomainError):
        G.log(G.tensor([1.0, 0.0]))


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1, w2, w3 = rng.normal(size=(4, 8)), rng.normal(size=(8, 8)), rng.normal(size=(8, 1))
    x0 = rng.normal(size=(1, 4))

    def f(x, a, b, c):
        h = G.tanh(G.matmul(x, a))
        h = G.relu(G.matmul(h, b))
        return G.sum(G.matmul(h, c))

    err = G.grad_check(f, [x0, w1, w2, w3], step=1e-5)
    assert err < 1e-4


def test_grad_check_sum_is_exact():
    assert G.grad_check(lambda x: G.sum(x), [RNG.normal(size=5)]) < 1e-10


def test_grad_check_bce_with_logits():
    err = G.grad_check(lambda z: G.sum(nnops.bce_with_logits(z, 1.0)),
                       [np.array([0.3])], step=1e-6)
    assert err < 1e-6
    # Analytic derivative is sigmoid(z) - t.
    z = G.tensor([0.3], requires_grad=True)
    gmap = G.backward(G.sum(nnops.bce_with_logits(z, 1.0)))
    assert np.allclose(gmap[z], 1.0 / (1.0 + np.exp(-0.3)) - 1.0, atol=1e-12)


@pytest.mark.parametrize("op", ["relu", "tanh", "sigmoid", "exp"])
def test_elementwise_finite_differences(op):
    fn = getattr(G, op)
    worst = 0.0
    rng = np.random.default_rng(hash(op) % 2**32)
    for _ in range(100):
        x = rng.normal(size=4)
        if op == "relu":
            x[np.abs(x) < 1e-3] += 0.01  # keep away from the kink
        worst = max(worst, G.grad_check(lambda t: G.sum(fn(t)), [x]))
    assert worst < 1e-4


def test_softmax_rows_normalized():
    x = G.tensor(RNG.normal(size=(50, 7)) * 10.0)
    y = G.softmax(x).data
    assert np.all(y >= 0.0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_finite_differences():
    worst = 0.0
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.normal(size=(2, 5))
        w = rng.normal(size=(2, 5))
        worst = max(worst, G.grad_check(
            lambda t: G.sum(G.mul(G.softmax(t), G.constant(w))), [x]))
    assert worst < 1e-4


def test_max_reduce_gradient_is_one_hot():
    x = G.tensor(RNG.normal(size=(6, 9)), requires_grad=True)
    gmap = G.backward(G.sum(G.max_reduce(x, axis=1)))
    gx = gmap[x]
    assert np.all((gx != 0).sum(axis=1) == 1)


def test_max_reduce_tie_breaks_to_first():
    x = G.tensor([[2.0, 2.0, 1.0]], requires_grad=True)
    gmap = G.backward(G.sum(G.max_reduce(x, axis=1)))
    assert np.array_equal(gmap[x], [[1.0, 0.0, 0.0]])


def test_clip_gradient_routing():
    x = G.tensor([-0.5, 0.5, 1.5], requires_grad=True)
    gmap = G.backward(G.sum(G.clip(x, 0.0, 1.0)))
    assert np.array_equal(gmap[x], [0.0, 1.0, 0.0])


def test_concat_reshape_roundtrip_gradient():
    a = G.tensor(RNG.normal(size=(2, 3)), requires_grad=True)
    b = G.tensor(RNG.normal(size=(2, 2)), requires_grad=True)
    out = G.sum(G.mul(G.concat([a, b], axis=1), G.concat([a, b], axis=1)))
    gmap = G.backward(out)
    assert np.allclose(gmap[a], 2 * a.data)
    assert np.allclose(gmap[b], 2 * b.data)


def test_permute_cols_gather_scatter():
    x = G.tensor(RNG.normal(size=(3, 5)), requires_grad=True)
    idx = [4, 0, 0]
    y = G.permute_cols(x, idx)
    assert np.array_equal(y.data, x.data[:, idx])
    gmap = G.backward(G.sum(y))
    expect = np.zeros((3, 5))
    expect[:, 4] = 1.0
    expect[:, 0] = 2.0
    assert np.array_equal(gmap[x], expect)


def test_replay_determinism():
    def build_and_grad():
        rng = np.random.default_rng(11)
        x = G.tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = G.tensor(rng.normal(size=(6, 3)), requires_grad=True)
        out = G.sum(G.softmax(G.tanh(G.matmul(x, w))))
        gmap = G.backward(out)
        return gmap[x].tobytes(), gmap[w].tobytes()

    assert build_and_grad() == build_and_grad()


def test_primitive_forward_dispatch():
    out = G.primitive_forward("add", G.tensor([1.0]), G.tensor([2.0]))
    assert out.data[0] == 3.0
    with pytest.raises(ContractError):
        G.primitive_forward("conv2d", G.tensor([1.0]))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_property_softmax_distribution(vals):
    y = G.softmax(G.tensor(vals)).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_chain_rule_random_graph(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3,))

    def f(t):
        return G.mean(G.mul(G.sigmoid(t), G.tanh(t)))

    assert G.grad_check(f, [x]) < 1e-4
