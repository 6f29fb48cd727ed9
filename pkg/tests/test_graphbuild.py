import numpy as np
import pytest

from oracles import topk_sort_oracle
from panelgraph import graphbuild as gb
from panelgraph import signals as sg
from panelgraph.similarity import SimilarityMatrix

NAMES5 = ("a", "b", "c", "d", "e")


def simmat(values, names=NAMES5, state="S"):
    return SimilarityMatrix(state, tuple(names), "lagged", np.asarray(values, dtype=float))


# --- top-k ----------------------------------------------------------------------------


def test_k1_picks_row_argmax():
    rng = np.random.default_rng(1)
    S = rng.random((5, 5))
    g = gb.topk_graph(simmat(S), 1)
    off = S - np.eye(5) * 10
    assert {(e.src, e.dst) for e in g.edges} == {(int(np.argmax(off[i])), i) for i in range(5)}


def test_ties_go_to_lexicographically_first_names():
    names = ("d", "a", "c", "b", "e")
    g = gb.topk_graph(simmat(np.ones((5, 5)), names), 2)
    sources = {names[i]: sorted(names[e.src] for e in g.edges if e.dst == i) for i in range(5)}
    assert sources == {"d": ["a", "b"], "a": ["b", "c"], "c": ["a", "b"], "b": ["a", "c"], "e": ["a", "b"]}


def test_topk_matches_sort_oracle(rng):
    for _ in range(50):
        S = np.round(rng.random((5, 5)), 1)  # coarse values force ties
        g = gb.topk_graph(simmat(S), 2)
        assert g.edge_set() == topk_sort_oracle(S.tolist(), NAMES5, 2)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_topk_in_degree_is_exactly_k(k, rng):
    g = gb.topk_graph(simmat(rng.random((5, 5))), k)
    assert np.all(g.in_degree() == k)
    assert all(e.src != e.dst for e in g.edges)


def test_topk_weights_are_scores(rng):
    S = rng.random((5, 5))
    for e in gb.topk_graph(simmat(S), 3).edges:
        assert e.weight == S[e.dst, e.src] == e.score


def test_topk_errors():
    with pytest.raises(ValueError):
        gb.topk_graph(simmat(np.ones((5, 5))), 5)
    with pytest.raises(ValueError):
        gb.topk_graph(simmat(np.ones((5, 5))), 0)
    with pytest.raises(ValueError):
        gb.topk_graph(simmat(np.ones((4, 5))), 1)


# --- random and full ---------------------------------------------------------------------


def test_random_graph_mean_out_degree_over_1000_seeds():
    names = [f"s{i}" for i in range(26)]
    means = [gb.random_graph(names, 5, seed).out_degree().mean() for seed in range(1000)]
    assert abs(np.mean(means) - 5) <= 0.25


def test_random_graph_seeded_and_empty():
    names = [f"s{i}" for i in range(10)]
    assert gb.random_graph(names, 3, 7).edges == gb.random_graph(names, 3, 7).edges
    assert gb.random_graph(names, 3, 7).edges != gb.random_graph(names, 3, 8).edges
    assert gb.random_graph(names, 0, 1).n_edges == 0


def test_random_graph_exact_variant():
    g = gb.random_graph([f"s{i}" for i in range(8)], 3, seed=2, exact=True)
    assert np.all(g.out_degree() == 3)


def test_random_graph_rejects_bad_k_avg():
    with pytest.raises(ValueError):
        gb.random_graph(["a", "b", "c"], 2.5)
    with pytest.raises(ValueError):
        gb.random_graph(["a", "b", "c"], -1)


def test_full_graph_counts():
    names = [f"s{i}" for i in range(26)]
    g = gb.full_graph(names)
    assert g.n_edges == 650
    assert np.all(g.in_degree() == 25)
    assert gb.full_graph(["a", "b"]).n_edges == 2
    with pytest.raises(ValueError):
        gb.full_graph(["a"])


def test_signal_graph_invariants():
    with pytest.raises(ValueError, match="self-loop"):
        gb.SignalGraph("S", ("a", "b"), (gb.Edge(0, 0),), "full")
    with pytest.raises(ValueError, match="duplicate"):
        gb.SignalGraph("S", ("a", "b"), (gb.Edge(0, 1), gb.Edge(0, 1)), "full")
    assert gb.SignalGraph("S", ("a", "b"), (gb.Edge(0, 0),), "full", allow_self_loops=True).n_edges == 1


# --- block assembly --------------------------------------------------------------------


def test_two_by_three_block_has_zero_off_diagonal():
    sig = ("x", "y", "z")
    adj = gb.assemble_block([gb.full_graph(sig, "A"), gb.full_graph(sig, "B")])
    M = adj.dense()
    assert M.shape == (6, 6)
    assert np.all(M[:3, 3:] == 0) and np.all(M[3:, :3] == 0)
    assert M[:3, :3].sum() == 6 and M[3:, 3:].sum() == 6


def test_26_by_26_block_dimensions():
    sig = tuple(f"s{i}" for i in range(26))
    adj = gb.assemble_block([gb.full_graph(sig, f"st{a}") for a in range(26)])
    assert adj.n_nodes == 676
    assert adj.n_edges == 26 * 650
    assert np.all(adj.src // 26 == adj.dst // 26)


def test_block_edge_count_and_ids(rng):
    sig = tuple(f"s{i}" for i in range(6))
    graphs = [gb.random_graph(sig, 2, seed, f"st{seed}") for seed in range(4)]
    adj = gb.assemble_block(graphs)
    assert adj.n_edges == sum(g.n_edges for g in graphs)
    assert adj.node_id("st2", "s3") == 2 * 6 + 3 and adj.node_name(15) == ("st2", "s3")
    assert np.all(adj.edge_state == adj.src // 6)
    sub = adj.restrict("st1")
    assert sub.n_edges == graphs[1].n_edges and len(adj.state_edges("st1")) == graphs[1].n_edges


def test_assemble_errors():
    with pytest.raises(ValueError):
        gb.assemble_block([])
    with pytest.raises(ValueError, match="different signal"):
        gb.assemble_block([gb.full_graph(("a", "b"), "A"), gb.full_graph(("a", "c"), "B")])
    with pytest.raises(ValueError, match="duplicate"):
        gb.assemble_block([gb.full_graph(("a", "b"), "A"), gb.full_graph(("a", "b"), "A")])


def test_build_graphs_strategies_are_deterministic():
    p, _ = sg.synth_panel(sg.planted_coupling_spec(n_states=2, seed=0), seed=0)
    for strategy in gb.STRATEGIES:
        a = gb.build_graphs(p, strategy, k=3, k_avg=3, seed=4)
        b = gb.build_graphs(p, strategy, k=3, k_avg=3, seed=4)
        assert a.edge_list() == b.edge_list()
    r = gb.build_graphs(p, "random", k_avg=3, seed=0)
    assert r.graphs[0].edges != r.graphs[1].edges
    with pytest.raises(ValueError):
        gb.build_graphs(p, "knn")


def test_planted_edges_recovered_by_lagged_topk():
    rates = []
    for seed in range(10):
        p, planted = sg.synth_panel(sg.planted_coupling_spec(noise=0.0, seed=seed), seed=seed)
        edges = {(st, s, d) for st, s, d, _, _ in gb.build_graphs(p, "lagged", k=5).edge_list()}
        rates.append(np.mean([(st, s, d) in edges for st, s, d, _, _ in planted]))
    assert np.mean(rates) >= 0.7


# --- files and exports -------------------------------------------------------------------


def test_edge_list_round_trip(tmp_path):
    p, _ = sg.synth_panel(sg.planted_coupling_spec(n_states=2, seed=1), seed=1)
    adj = gb.build_graphs(p, "dtw_s", k=2)
    adj.write_edges(tmp_path / "e.csv")
    edges = gb.read_edge_list(tmp_path / "e.csv")
    assert edges == adj.edge_list()
    back = gb.adjacency_from_edges(edges, p.states, p.signals)
    assert np.array_equal(back.dense(True), adj.dense(True))


def test_edge_list_bad_header(tmp_path):
    (tmp_path / "e.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        gb.read_edge_list(tmp_path / "e.csv")


def test_graph_export_json_and_dot(tmp_path):
    sig = ("x", "y", "z")
    adj = gb.assemble_block([gb.full_graph(sig, "A")])
    ex = gb.graph_export(adj, {"x": "H", "y": "B", "z": "TV"}, {("A", "x", "y"): 0.5})
    assert len(ex.nodes) == 3 and len(ex.links) == 6
    back = gb.GraphExport.from_json(ex.to_json())
    assert back.links == ex.links and back.nodes == ex.nodes
    dot = ex.to_dot()
    assert dot.startswith("digraph") and '"A/x" -> "A/y"' in dot and "importance=0.5" in dot
    jpath, dpath = ex.write(tmp_path / "g")
    assert jpath.exists() and dpath.read_text() == dot
