import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_check, mae_loop, neighbor_mean_loop
from panelgraph import autodiff as ad


class Edges:
    """Minimal adjacency stand-in: anything with src, dst and n_nodes works."""

    def __init__(self, pairs, n):
        self.src = np.array([s for s, _ in pairs], dtype=int)
        self.dst = np.array([d for _, d in pairs], dtype=int)
        self.n_nodes = n


def T(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=float), requires_grad=grad)


# --- forward definitions -------------------------------------------------------


def test_matmul_identity_and_small_product():
    assert np.array_equal(ad.matmul(T([[1, 0], [0, 1]]), T([[3, 4], [5, 6]])).data, [[3, 4], [5, 6]])
    assert ad.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_relu_sigmoid_concat():
    assert ad.relu(T([-1, 0, 2])).data.tolist() == [0, 0, 2]
    assert ad.sigmoid(T([0.0])).data.tolist() == [0.5]
    assert ad.concat_cols(T(np.ones((2, 3))), T(np.zeros((2, 2)))).shape == (2, 5)


def test_sigmoid_is_stable_for_large_inputs():
    out = ad.sigmoid(T([-800.0, 800.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_elementwise_shape_mismatch(kind):
    with pytest.raises(ad.DimensionError):
        ad.elementwise(T(np.ones(3)), T(np.ones(4)), kind)


def test_concat_row_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.concat_cols(T(np.ones((2, 1))), T(np.ones((3, 1))))


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        ad.Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        ad.Tensor([np.inf])


def test_debug_mode_flags_non_finite_results():
    ad.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            ad.scale(T([1e308]), 1e10)
    finally:
        ad.set_debug(False)


# --- neighbour mean --------------------------------------------------------------


def test_neighbor_mean_hand_aggregation():
    out = ad.neighbor_mean(T([[1], [3], [5]]), Edges([(1, 0), (2, 0)], 3)).data
    assert out.tolist() == [[4.0], [0.0], [0.0]]


def test_neighbor_mean_empty_and_self_loop():
    h = T([[1.0, 2.0], [3.0, 4.0]])
    assert np.all(ad.neighbor_mean(h, Edges([], 2)).data == 0)
    out = ad.neighbor_mean(h, Edges([(1, 1)], 2)).data
    assert out[1].tolist() == [3.0, 4.0] and out[0].tolist() == [0.0, 0.0]


def test_neighbor_mean_node_count_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.neighbor_mean(T(np.ones((5, 2))), Edges([(0, 1)], 3))


def test_neighbor_mean_equals_row_stochastic_dense_product(rng):
    n = 7
    pairs = [(s, d) for s in range(n) for d in range(n) if s != d and rng.random() < 0.4]
    h = rng.normal(size=(n, 3))
    A = np.zeros((n, n))
    for s, d in pairs:
        A[d, s] = 1.0
    deg = A.sum(axis=1, keepdims=True)
    dense = np.divide(A, deg, out=np.zeros_like(A), where=deg > 0) @ h
    out = ad.neighbor_mean(T(h), Edges(pairs, n)).data
    assert np.max(np.abs(out - dense)) < 1e-12
    assert np.max(np.abs(out - neighbor_mean_loop(h, *zip(*pairs), n))) < 1e-12


def test_neighbor_mean_batched_rows_aggregate_per_copy(rng):
    n, pairs = 4, [(0, 1), (2, 1), (3, 0)]
    h1, h2 = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    both = ad.neighbor_mean(T(np.vstack([h1, h2])), Edges(pairs, n)).data
    assert np.allclose(both[:n], ad.neighbor_mean(T(h1), Edges(pairs, n)).data, atol=1e-14)
    assert np.allclose(both[n:], ad.neighbor_mean(T(h2), Edges(pairs, n)).data, atol=1e-14)


def test_weighted_neighbor_mean_matches_loop(rng):
    n = 5
    pairs = [(0, 1), (2, 1), (3, 1), (4, 0), (1, 4)]
    w = rng.uniform(0.1, 1.0, size=len(pairs))
    h = rng.normal(size=(n, 2))
    out = ad.neighbor_mean(T(h), Edges(pairs, n), edge_weight=w).data
    assert np.max(np.abs(out - neighbor_mean_loop(h, *zip(*pairs), n, weights=w))) < 1e-12


def test_degree_normalization_scales_each_edge_share():
    h = T([[2.0], [4.0], [0.0]])
    adj = Edges([(0, 2), (1, 2)], 3)
    out = ad.neighbor_mean(h, adj, edge_weight=np.array([1.0, 0.5]), normalize="degree").data
    assert out[2, 0] == pytest.approx((2.0 + 0.5 * 4.0) / 2)


# --- losses ----------------------------------------------------------------------


def test_mae_loss_values(rng):
    assert ad.mae_loss(T([[0.2, 0.3]]), T([[0.2, 0.3]])).item() == 0.0
    assert ad.mae_loss(T([0.0, 1.0]), T([1.0, 1.0])).item() == 0.5
    p, t = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    assert abs(ad.mae_loss(T(p), T(t)).item() - mae_loop(p, t)) < 1e-12
    assert abs(ad.mae_loss(T(p), T(t), rows=[1, 3]).item() - mae_loop(p, t, [1, 3])) < 1e-12


def test_mae_loss_errors():
    with pytest.raises(ad.DimensionError):
        ad.mae_loss(T(np.ones((2, 2))), T(np.ones((2, 3))))
    with pytest.raises(ValueError):
        ad.mae_loss(T(np.ones((2, 2))), T(np.ones((2, 2))), rows=[])
    with pytest.raises((IndexError, ValueError)):
        ad.mae_loss(T(np.ones((2, 2))), T(np.ones((2, 2))), rows=[5])


def test_mae_backward_is_sign_over_count():
    p = T([[0.0, 2.0], [1.0, 1.0]], grad=True)
    with ad.Tape() as tape:
        loss = ad.mae_loss(p, T([[1.0, 1.0], [0.0, 3.0]]))
    g = tape.backward(loss)[p]
    assert g.tolist() == [[-0.25, 0.25], [0.25, -0.25]]


# --- backward semantics ----------------------------------------------------------


def test_sum_gradient_is_ones():
    x = T(np.arange(6.0).reshape(2, 3), grad=True)
    with ad.Tape() as tape:
        loss = ad.tensor_sum(x)
    assert np.array_equal(tape.backward(loss)[x], np.ones((2, 3)))


def test_unused_leaf_gets_zero_gradient():
    x, y = T([1.0, 2.0], grad=True), T([[3.0]], grad=True)
    with ad.Tape() as tape:
        tape.watch(y)
        loss = ad.tensor_sum(ad.scale(x, 2.0))
    g = tape.backward(loss)
    assert np.array_equal(g[y], [[0.0]]) and np.array_equal(g[x], [2.0, 2.0])


def test_constant_loss_gives_zero_gradients():
    x = T([1.0, 2.0], grad=True)
    with ad.Tape() as tape:
        loss = ad.tensor_sum(ad.scale(x, 0.0))
    assert np.array_equal(tape.backward(loss)[x], [0.0, 0.0])


def test_backward_errors():
    x = T([1.0, 2.0], grad=True)
    with ad.Tape() as tape:
        out = ad.scale(x, 2.0)
        loss = ad.tensor_sum(out)
    with pytest.raises(ad.DimensionError):
        tape.backward(out)
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="consumed"):
        tape.backward(loss)
    tape.reset()
    with pytest.raises(RuntimeError, match="not recorded"):
        tape.backward(ad.tensor_sum(T([1.0])))
    with ad.Tape() as other:
        detached = ad.tensor_sum(x).detach()
    with pytest.raises(RuntimeError):
        other.backward(detached)


def test_ops_outside_a_tape_are_untracked():
    x = T([1.0], grad=True)
    y = ad.scale(x, 3.0)
    assert not y.requires_grad


def test_backward_is_linear(rng):
    W = rng.normal(size=(3, 4))
    x = rng.normal(size=(4, 2))
    y = rng.normal(size=(3, 2))
    a, b = 0.7, -1.3

    def grad_of(loss_fn):
        w = T(W, grad=True)
        with ad.Tape() as tape:
            loss = loss_fn(w)
        return tape.backward(loss)[w]

    f = lambda w: ad.mae_loss(ad.matmul(w, T(x)), T(y))  # noqa: E731
    g = lambda w: ad.tensor_sum(ad.relu(ad.matmul(w, T(x))))  # noqa: E731
    combo = grad_of(lambda w: ad.add(ad.scale(f(w), a), ad.scale(g(w), b)))
    assert np.max(np.abs(combo - (a * grad_of(f) + b * grad_of(g)))) < 1e-10


# --- finite-difference gradient checks ----------------------------------------------

TRIALS = 100


def _random(rng, shape):
    return rng.uniform(-2.0, 2.0, size=shape)


UNARY = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "scale": lambda a: ad.scale(a, -1.7),
    "shift": lambda a: ad.shift(a, 0.3),
    "tensor_sum": ad.tensor_sum,
}
BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
}
LOSSES = {"mae_loss": ad.mae_loss, "mse_loss": ad.mse_loss}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_finite_differences(name, rng):
    worst = max(finite_difference_check(UNARY[name], [_random(rng, (3, 4))], rng) for _ in range(TRIALS))
    assert worst < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients_match_finite_differences(name, rng):
    fn = BINARY[name]
    worst = max(finite_difference_check(fn, [_random(rng, (3, 4)), _random(rng, (3, 4))], rng)
                for _ in range(TRIALS))
    assert worst < 1e-4


@pytest.mark.parametrize("name", sorted(LOSSES))
def test_loss_gradients_match_finite_differences(name, rng):
    worst = 0.0
    for _ in range(TRIALS):
        target = T(_random(rng, (3, 4)))
        worst = max(worst, finite_difference_check(lambda p: LOSSES[name](p, target), [_random(rng, (3, 4))], rng))
    assert worst < 1e-4


def test_matmul_gradients(rng):
    worst = max(finite_difference_check(ad.matmul, [_random(rng, (3, 4)), _random(rng, (4, 2))], rng)
                for _ in range(TRIALS))
    assert worst < 1e-4


def test_concat_and_add_row_gradients(rng):
    worst = 0.0
    for _ in range(TRIALS):
        worst = max(worst, finite_difference_check(ad.concat_cols, [_random(rng, (3, 2)), _random(rng, (3, 4))], rng))
        worst = max(worst, finite_difference_check(ad.add_row, [_random(rng, (3, 4)), _random(rng, (4,))], rng))
    assert worst < 1e-4


def test_embed_gradient(rng):
    idx = np.array([4, 1, 2])
    fn = lambda v: ad.embed(v, idx, 6, fill=1.0)  # noqa: E731
    worst = max(finite_difference_check(fn, [_random(rng, (3,))], rng) for _ in range(TRIALS))
    assert worst < 1e-4


def test_masked_loss_gradient(rng):
    worst = 0.0
    for _ in range(TRIALS):
        target = T(_random(rng, (4, 3)))
        fn = lambda p: ad.mae_loss(p, target, rows=[0, 2])  # noqa: E731
        worst = max(worst, finite_difference_check(fn, [_random(rng, (4, 3))], rng))
    assert worst < 1e-4


@pytest.mark.parametrize("normalize", ["weights", "degree"])
def test_neighbor_mean_gradients(normalize, rng):
    worst = 0.0
    for _ in range(TRIALS):
        n = 6
        pairs = [(s, d) for s in range(n) for d in range(n) if s != d and rng.random() < 0.35]
        adj = Edges(pairs, n)
        h = _random(rng, (2 * n, 3))
        w = rng.uniform(0.2, 1.0, size=len(pairs))
        worst = max(worst, finite_difference_check(lambda x: ad.neighbor_mean(x, adj), [h], rng))
        if pairs:
            fn = lambda x, ww: ad.neighbor_mean(x, adj, edge_weight=ww, normalize=normalize)  # noqa: E731
            worst = max(worst, finite_difference_check(fn, [h, w], rng))
    assert worst < 1e-4


def test_straight_through_forward_rounds_and_backward_passes():
    x = T([0.2, 0.5, 0.9], grad=True)
    with ad.Tape() as tape:
        y = ad.straight_through(x)
        loss = ad.tensor_sum(ad.mul(y, T([1.0, 2.0, 3.0])))
    assert y.data.tolist() == [0.0, 1.0, 1.0]
    assert tape.backward(loss)[x].tolist() == [1.0, 2.0, 3.0]
    assert ad.straight_through(T([0.3, 0.6]), np.array([0.5, 0.7])).data.tolist() == [0.0, 0.0]


def test_mae_of_linear_map_gradient(rng):
    x, y = _random(rng, (4, 3)), _random(rng, (5, 3))
    fn = lambda w: ad.mae_loss(ad.matmul(w, T(x)), T(y))  # noqa: E731
    assert finite_difference_check(fn, [_random(rng, (5, 4))], rng) < 1e-4


# --- optimizer -----------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters():
    w = T([1.0, -2.0], grad=True)
    opt = ad.Adam([w], lr=0.1)
    opt.step([np.zeros(2)])
    assert w.data.tolist() == [1.0, -2.0]


def test_adam_first_step_closed_form():
    w = T([0.0], grad=True)
    ad.Adam([w], lr=0.1).step([np.array([1.0])])
    # bias-corrected first step is lr * g / (|g| + eps)
    assert w.data[0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-12)


def test_adam_converges_on_quadratic_bowl():
    w = T([0.0], grad=True)
    opt = ad.Adam([w], lr=0.05)
    for _ in range(500):
        opt.step([2.0 * (w.data - 3.0)])
    assert abs(w.data[0] - 3.0) < 1e-2


def test_adam_shape_mismatch():
    opt = ad.Adam([T(np.zeros(3), grad=True)])
    with pytest.raises(ad.DimensionError):
        opt.step([np.zeros(4)])


def test_adam_moment_shapes_match_parameters():
    params = [T(np.zeros((2, 3)), grad=True), T(np.zeros(4), grad=True)]
    opt = ad.Adam(params)
    opt.step([np.ones((2, 3)), np.ones(4)])
    state = opt.state_dict()
    assert [m.shape for m in state["m"]] == [(2, 3), (4,)]
    assert [v.shape for v in state["v"]] == [(2, 3), (4,)]


def test_determinism_bit_identical(rng):
    W = rng.normal(size=(4, 4))

    def run():
        w = T(W.copy(), grad=True)
        opt = ad.Adam([w], lr=0.01)
        for _ in range(20):
            with ad.Tape() as tape:
                loss = ad.mae_loss(ad.relu(ad.matmul(w, T(np.eye(4)))), T(np.ones((4, 4))))
            opt.step(tape.backward(loss))
        return w.data.tobytes()

    assert run() == run()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_relu_never_negative_and_idempotent(xs):
    y = ad.relu(T(xs)).data
    assert np.all(y >= 0) and np.array_equal(ad.relu(T(y)).data, y)
