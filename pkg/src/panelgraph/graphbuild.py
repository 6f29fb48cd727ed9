"""Per-state signal graphs and their block-diagonal assembly."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .similarity import SimilarityMatrix

STRATEGIES = ("random", "full", "lagged", "dtw_s")
CATEGORY_COLORS = {"H": "#d62728", "B": "#1f77b4", "TV": "#2ca02c", "DB": "#9467bd"}


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    weight: float = 1.0
    score: float = 1.0


@dataclass(frozen=True)
class SignalGraph:
    """Directed graph over one state's signals. Edge ``j -> i`` feeds ``j`` into ``i``'s aggregate."""

    state: str
    signals: tuple[str, ...]
    edges: tuple[Edge, ...]
    strategy: str
    allow_self_loops: bool = False

    def __post_init__(self):
        seen = set()
        n = len(self.signals)
        for e in self.edges:
            if not (0 <= e.src < n and 0 <= e.dst < n):
                raise ValueError(f"edge {e} outside 0..{n - 1}")
            if e.src == e.dst and not self.allow_self_loops:
                raise ValueError(f"self-loop on {self.signals[e.src]!r} not enabled")
            if (e.src, e.dst) in seen:
                raise ValueError(f"duplicate edge {e.src}->{e.dst}")
            seen.add((e.src, e.dst))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def in_degree(self) -> np.ndarray:
        return np.bincount([e.dst for e in self.edges], minlength=len(self.signals))

    def out_degree(self) -> np.ndarray:
        return np.bincount([e.src for e in self.edges], minlength=len(self.signals))

    def edge_set(self) -> set[tuple[str, str]]:
        return {(self.signals[e.src], self.signals[e.dst]) for e in self.edges}


def topk_graph(sim: SimilarityMatrix, k: int = 5) -> SignalGraph:
    """Keep, for each destination, the ``k`` highest-scoring other signals as sources.

    Ties go to the lexicographically smaller signal name.
    """
    S = np.asarray(sim.values, dtype=np.float64)
    n = len(sim.signals)
    if S.shape != (n, n):
        raise ValueError(f"similarity matrix must be square over {n} signals, got {S.shape}")
    if k < 1 or k >= n:
        raise ValueError(f"k must lie in 1..{n - 1}, got {k}")
    edges = []
    for i in range(n):
        cands = sorted((j for j in range(n) if j != i), key=lambda j: (-S[i, j], sim.signals[j]))
        for j in cands[:k]:
            edges.append(Edge(j, i, float(S[i, j]), float(S[i, j])))
    return SignalGraph(sim.state, tuple(sim.signals), tuple(edges), sim.measure)


def random_graph(signals: Sequence[str], k_avg: float = 5.0, seed: int = 0, state: str = "",
                 exact: bool = False) -> SignalGraph:
    """Random directed graph with mean out-degree ``k_avg``.

    By default each ordered pair is an independent Bernoulli draw with
    probability ``k_avg / (n - 1)``. ``exact=True`` gives every node exactly
    ``round(k_avg)`` out-edges instead.
    """
    n = len(signals)
    if n < 2 or not 0 <= k_avg <= n - 1:
        raise ValueError(f"k_avg must lie in [0, {n - 1}] for {n} signals, got {k_avg}")
    rng = np.random.default_rng(seed)
    edges = []
    if exact:
        kk = int(round(k_avg))
        for j in range(n):
            others = np.array([i for i in range(n) if i != j])
            for i in sorted(rng.choice(others, size=kk, replace=False)):
                edges.append((j, int(i)))
        edges.sort(key=lambda e: (e[1], e[0]))
    else:
        draws = rng.random((n, n)) < k_avg / (n - 1)
        for i in range(n):
            for j in range(n):
                if i != j and draws[j, i]:
                    edges.append((j, i))
    return SignalGraph(state, tuple(signals), tuple(Edge(j, i) for j, i in edges), "random")


def full_graph(signals: Sequence[str], state: str = "") -> SignalGraph:
    n = len(signals)
    if n < 2:
        raise ValueError("a full graph needs at least 2 signals")
    edges = tuple(Edge(j, i) for i in range(n) for j in range(n) if i != j)
    return SignalGraph(state, tuple(signals), edges, "full")


@dataclass(frozen=True, eq=False)
class BlockAdjacency:
    """Block-diagonal union of per-state graphs.

    Global node ``state_index * n_signals + signal_index``; edges never
    cross states. ``src``, ``dst`` and ``weight`` are the global edge arrays
    in state order, then per-state edge order.
    """

    states: tuple[str, ...]
    signals: tuple[str, ...]
    graphs: tuple[SignalGraph, ...]

    @cached_property
    def _arrays(self):
        G = len(self.signals)
        src, dst, wts, owner = [], [], [], []
        for a, g in enumerate(self.graphs):
            for e in g.edges:
                src.append(a * G + e.src)
                dst.append(a * G + e.dst)
                wts.append(e.weight)
                owner.append(a)
        return (np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64),
                np.array(wts, dtype=np.float64), np.array(owner, dtype=np.int64))

    @property
    def src(self) -> np.ndarray:
        return self._arrays[0]

    @property
    def dst(self) -> np.ndarray:
        return self._arrays[1]

    @property
    def weight(self) -> np.ndarray:
        return self._arrays[2]

    @property
    def edge_state(self) -> np.ndarray:
        return self._arrays[3]

    @property
    def n_nodes(self) -> int:
        return len(self.states) * len(self.signals)

    @property
    def n_edges(self) -> int:
        return int(self.src.shape[0])

    def node_id(self, state: str, signal: str) -> int:
        return self.states.index(state) * len(self.signals) + self.signals.index(signal)

    def node_name(self, node: int) -> tuple[str, str]:
        G = len(self.signals)
        return self.states[node // G], self.signals[node % G]

    def state_edges(self, state: str) -> np.ndarray:
        """Global edge positions belonging to ``state``."""
        return np.nonzero(self.edge_state == self.states.index(state))[0]

    def dense(self, weighted: bool = False) -> np.ndarray:
        """``M[dst, src]`` matrix of size ``n_nodes x n_nodes``."""
        M = np.zeros((self.n_nodes, self.n_nodes))
        M[self.dst, self.src] = self.weight if weighted else 1.0
        return M

    def restrict(self, state: str) -> "BlockAdjacency":
        """Single-state adjacency (the state's diagonal block)."""
        a = self.states.index(state)
        return BlockAdjacency((state,), self.signals, (self.graphs[a],))

    def edge_list(self) -> list[tuple[str, str, str, float, float]]:
        out = []
        for g in self.graphs:
            for e in g.edges:
                out.append((g.state, g.signals[e.src], g.signals[e.dst], e.weight, e.score))
        return out

    def write_edges(self, path) -> None:
        write_edge_list(self.edge_list(), path)


def assemble_block(graphs: Sequence[SignalGraph]) -> BlockAdjacency:
    if not graphs:
        raise ValueError("no graphs to assemble")
    signals = graphs[0].signals
    for g in graphs[1:]:
        if g.signals != signals:
            raise ValueError(f"state {g.state!r} has a different signal list")
    states = tuple(g.state for g in graphs)
    if len(set(states)) != len(states):
        raise ValueError("duplicate state in graph list")
    return BlockAdjacency(states, tuple(signals), tuple(graphs))


def build_graphs(panel, strategy: str, k: int = 5, k_avg: float = 5.0, seed: int = 0, split=None,
                 max_lag: int = 4, exact_random: bool = False, similarities: Mapping | None = None) -> BlockAdjacency:
    """One graph per state under ``strategy`` and their block assembly.

    Random graphs for state ``a`` use seed ``seed * 1009 + a`` so states differ.
    """
    from .similarity import similarity_matrix

    if strategy not in STRATEGIES:
        raise ValueError(f"unknown graph strategy {strategy!r}; expected one of {STRATEGIES}")
    graphs = []
    for a, st in enumerate(panel.states):
        if strategy == "random":
            graphs.append(random_graph(panel.signals, k_avg, seed * 1009 + a, st, exact_random))
        elif strategy == "full":
            graphs.append(full_graph(panel.signals, st))
        else:
            sim = similarities.get(st) if similarities else None
            if sim is None:
                sim = similarity_matrix(panel, st, strategy, split=split, max_lag=max_lag)
            graphs.append(topk_graph(sim, k))
    return assemble_block(graphs)


# ---------------------------------------------------------------------------
# files


def write_edge_list(edges, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "src", "dst", "weight", "score"])
        for st, s, d, wt, sc in edges:
            w.writerow([st, s, d, repr(float(wt)), repr(float(sc))])


def read_edge_list(path) -> list[tuple[str, str, str, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["state", "src", "dst", "weight", "score"]:
            raise ValueError(f"{path}: header must be state,src,dst,weight,score")
        return [(r["state"], r["src"], r["dst"], float(r["weight"]), float(r["score"])) for r in reader]


def adjacency_from_edges(edges, states: Sequence[str], signals: Sequence[str], strategy: str = "file") -> BlockAdjacency:
    """Rebuild a block adjacency from an edge list (e.g. one read from CSV)."""
    per_state: dict[str, list[Edge]] = {st: [] for st in states}
    idx = {s: i for i, s in enumerate(signals)}
    for st, s, d, wt, sc in edges:
        if st not in per_state:
            raise ValueError(f"edge for unknown state {st!r}")
        per_state[st].append(Edge(idx[s], idx[d], float(wt), float(sc)))
    return assemble_block([SignalGraph(st, tuple(signals), tuple(per_state[st]), strategy) for st in states])


@dataclass
class GraphExport:
    """Node-link view of a (sub)graph, renderable as JSON or DOT."""

    nodes: list[dict] = field(default_factory=list)
    links: list[dict] = field(default_factory=list)
    graph: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"directed": True, "graph": self.graph, "nodes": self.nodes, "links": self.links},
                          indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GraphExport":
        data = json.loads(text)
        return cls(data["nodes"], data["links"], data.get("graph", {}))

    def to_dot(self) -> str:
        lines = ["digraph signals {", "  node [style=filled];"]
        for nd in self.nodes:
            color = CATEGORY_COLORS.get(nd.get("category", ""), "#cccccc")
            extra = ", penwidth=3" if nd.get("focus") else ""
            lines.append(f'  "{nd["id"]}" [label="{nd["signal"]}", fillcolor="{color}"{extra}];')
        for ln in self.links:
            attrs = [f'weight={ln.get("weight", 1.0)!r}']
            if "importance" in ln:
                attrs.append(f'importance={ln["importance"]!r}')
                attrs.append(f'penwidth={1.0 + 4.0 * float(ln["importance"]):.3f}')
            if ln.get("important"):
                attrs.append("style=bold")
            lines.append(f'  "{ln["source"]}" -> "{ln["target"]}" [{", ".join(attrs)}];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        jpath, dpath = stem.with_suffix(".json"), stem.with_suffix(".dot")
        jpath.write_text(self.to_json())
        dpath.write_text(self.to_dot())
        return jpath, dpath


def graph_export(adj: BlockAdjacency, categories: Mapping[str, str] | None = None,
                 importance: Mapping[tuple[str, str, str], float] | None = None) -> GraphExport:
    """Export the whole block adjacency; ``importance`` keys are ``(state, src, dst)``."""
    categories = categories or {}
    out = GraphExport(graph={"states": list(adj.states), "signals": list(adj.signals)})
    for st in adj.states:
        for sig in adj.signals:
            out.nodes.append({"id": f"{st}/{sig}", "state": st, "signal": sig, "category": categories.get(sig, "")})
    for st, s, d, wt, _ in adj.edge_list():
        link = {"source": f"{st}/{s}", "target": f"{st}/{d}", "weight": wt}
        if importance is not None:
            link["importance"] = float(importance.get((st, s, d), 0.0))
        out.links.append(link)
    return out
