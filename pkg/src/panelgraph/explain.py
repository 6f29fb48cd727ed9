"""Counterfactual edge-mask search and edge-importance counting.

An :class:`EdgeMask` holds one logit per edge of a single state's block;
``sigmoid(logit)`` scales that edge inside the weighted neighbour mean. The
search looks for the fewest removed edges whose hard mask moves the target
node's forecast MAE across a threshold (by default the MAE obtained with a
random graph).
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .graphbuild import BlockAdjacency, GraphExport
from .models import SageForecaster, sage_forward
from .signals import WINDOW, Panel, WindowSample

logger = logging.getLogger(__name__)

DIRECTIONS = ("below", "above")
ESTIMATORS = ("relaxed", "straight_through", "sampled")


@dataclass
class EdgeMask:
    """Mask logits for the edges of ``state``; ``positions`` index the global edge arrays."""

    state: str
    positions: np.ndarray
    logits: ad.Tensor

    @classmethod
    def for_state(cls, adj: BlockAdjacency, state: str, init: float = 4.0) -> "EdgeMask":
        pos = adj.state_edges(state)
        return cls(state, pos, ad.Tensor(np.full(pos.shape[0], float(init)), requires_grad=True))

    def probabilities(self) -> np.ndarray:
        return ad.sigmoid(ad.Tensor(self.logits.data)).data

    def keep(self) -> np.ndarray:
        return self.probabilities() >= 0.5


def _edge_weights(adj: BlockAdjacency, model: SageForecaster, positions: np.ndarray, values) -> ad.Tensor:
    w = ad.embed(values, positions, adj.n_edges, fill=1.0)
    if model.config.aggregator_weighted:
        w = ad.mul(w, ad.Tensor(adj.weight))
    return w


def masked_forward(model: SageForecaster, adj: BlockAdjacency, mask: EdgeMask, features,
                   normalize: str = "weights", estimator: str = "relaxed", draws=None) -> ad.Tensor:
    """Forecast with the state's edges scaled by ``sigmoid(mask.logits)``.

    Model parameters are copied as constants, so gradients reach the mask
    logits only and the model itself is never modified. With
    ``estimator="straight_through"`` the forward pass uses the binarized
    mask while gradients flow through the sigmoid as if it were not rounded;
    ``"sampled"`` keeps edge ``e`` when ``sigmoid(m_e) >= draws[e]`` (uniform
    draws, so each edge is kept with probability ``sigmoid(m_e)``).
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    if estimator == "sampled" and (draws is None or np.shape(draws) != mask.positions.shape):
        raise ValueError("the sampled estimator needs one uniform draw per masked edge")
    expected = adj.state_edges(mask.state)
    if mask.positions.shape != expected.shape or not np.array_equal(mask.positions, expected):
        raise ValueError(f"mask does not align with the edges of state {mask.state!r}")
    frozen = model.frozen()
    probs = ad.sigmoid(mask.logits)
    if estimator == "straight_through":
        probs = ad.straight_through(probs)
    elif estimator == "sampled":
        probs = ad.straight_through(probs, np.asarray(draws, dtype=np.float64))
    weights = _edge_weights(adj, frozen, mask.positions, probs)
    return sage_forward(frozen, features, adj, edge_weight=weights, normalize=normalize)


def hard_forward(model: SageForecaster, adj: BlockAdjacency, keep: np.ndarray, positions: np.ndarray,
                 features, normalize: str = "weights") -> np.ndarray:
    """Forecast with a binary mask: edges at ``positions`` are kept where ``keep`` is true."""
    w = _edge_weights(adj, model, positions, ad.Tensor(keep.astype(np.float64)))
    return sage_forward(model, features, adj, edge_weight=w, normalize=normalize).data


def node_mae(pred: np.ndarray, truth: np.ndarray, node: int) -> float:
    return float(np.mean(np.abs(pred[node] - truth[node])))


@dataclass
class CounterfactualResult:
    state: str
    signal: str
    window_start: int
    threshold: float
    removed: list[tuple[str, str]]
    achieved_mae: float
    original_mae: float
    converged: bool
    iterations: int
    direction: str = "below"


def _gap(mae: float, threshold: float, direction: str) -> float:
    """How far ``mae`` is from satisfying the constraint (negative when satisfied)."""
    return mae - threshold if direction == "below" else threshold - mae


def _satisfied(mae: float, threshold: float, direction: str, tol: float = 0.0) -> bool:
    return mae <= threshold + tol if direction == "below" else mae >= threshold - tol


def counterfactual_search(model: SageForecaster, adj: BlockAdjacency, state: str, signal: str,
                          window: WindowSample, threshold: float, beta: float = 0.01, budget: int = 500,
                          lr: float = 0.05, direction: str = "below", init: float = 4.0,
                          normalize: str = "weights", estimator: str = "sampled",
                          seed: int = 0) -> CounterfactualResult:
    """Smallest edge removal (within ``state``) that satisfies the MAE constraint.

    ``direction="below"`` asks for target MAE <= threshold, ``"above"`` for
    target MAE >= threshold. The relaxed objective is the constraint gap plus
    ``beta`` times the number of relaxed removals ``sum(1 - sigmoid(m))``,
    minimized by Adam from ``m = init``. The gap term is switched off only
    while the binarized mask is feasible, so the relaxation cannot stall on
    a soft mask that rounds back to the original graph. Every iterate is
    binarized and re-evaluated, and the hard mask with the lowest hard
    objective ``relu(gap) + beta * n_removed`` is returned (ties go to fewer
    removals); ``converged`` says whether that mask meets the constraint.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    sub = adj.restrict(state)
    a = adj.states.index(state)
    G = len(adj.signals)
    node = adj.signals.index(signal)
    feats = np.asarray(window.input[a], dtype=np.float64).reshape(G, WINDOW)
    truth = np.asarray(window.target[a], dtype=np.float64).reshape(G, WINDOW)
    frozen = model.frozen()
    mask = EdgeMask.for_state(sub, state, init)
    names = [(sub.signals[s], sub.signals[d]) for s, d in zip(sub.src, sub.dst)]

    cache: dict[bytes, float] = {}

    def hard_mae(keep: np.ndarray) -> float:
        key = keep.tobytes()
        if key not in cache:
            cache[key] = node_mae(hard_forward(frozen, sub, keep, mask.positions, feats, normalize), truth, node)
        return cache[key]

    def result(keep, mae, ok, iters):
        removed = [names[e] for e in np.nonzero(~keep)[0]]
        return CounterfactualResult(state, signal, window.window_start, float(threshold), removed, float(mae),
                                    original, ok, iters, direction)

    full = np.ones(mask.positions.shape[0], dtype=bool)
    original = hard_mae(full)
    if _satisfied(original, threshold, direction):
        return result(full, original, True, 0)

    opt = ad.Adam([mask.logits], lr=lr)
    rng = np.random.default_rng(seed)
    E = float(mask.positions.shape[0])

    def score(keep: np.ndarray, m: float) -> tuple[float, int, float]:
        n_removed = int((~keep).sum())
        gap = _gap(m, threshold, direction)
        return max(gap, 0.0) + beta * n_removed, n_removed, gap

    best = (score(full, original), full.copy(), original)

    def consider(keep: np.ndarray) -> bool:
        nonlocal best
        m = hard_mae(keep)
        key = score(keep, m)
        if key < best[0]:
            best = (key, keep.copy(), m)
        return _satisfied(m, threshold, direction)

    it = 0
    hard_ok = False
    for it in range(1, budget + 1):
        draws = rng.random(mask.positions.shape[0]) if estimator == "sampled" else None
        with ad.Tape() as tape:
            pred = masked_forward(frozen, sub, mask, feats, normalize, estimator, draws)
            mae = ad.mae_loss(pred, truth, rows=[node])
            gap = ad.shift(mae, -threshold) if direction == "below" else ad.shift(ad.scale(mae, -1.0), threshold)
            sparsity = ad.scale(ad.shift(ad.scale(ad.tensor_sum(ad.sigmoid(mask.logits)), -1.0), E), beta)
            # the relaxed hinge can reach zero while the binarized mask is still
            # infeasible; keep the constraint term active until the hard mask holds
            loss = sparsity if hard_ok else ad.add(gap, sparsity)
        grads = tape.backward(loss)
        if draws is not None:
            consider(mask.probabilities() >= draws)
        opt.step(grads)
        # box projection: a trained model sits near an MAE minimum at the original
        # graph, so the early gradient sign is noise; capping the logits keeps
        # sampled removals possible instead of letting the mask saturate
        np.clip(mask.logits.data, -abs(init), abs(init), out=mask.logits.data)
        hard_ok = consider(mask.keep())
    _, keep, m = best
    return result(keep, m, _satisfied(m, threshold, direction), it)


# ---------------------------------------------------------------------------
# thresholds and scans


def window_mae(model: SageForecaster, adj: BlockAdjacency, window: WindowSample) -> np.ndarray:
    """Per-node MAE over the four horizons, ``(n_states, n_signals)``."""
    N = adj.n_nodes
    pred = sage_forward(model, window.input.reshape(N, WINDOW), adj).data
    err = np.abs(pred - window.target.reshape(N, WINDOW)).mean(axis=1)
    return err.reshape(len(adj.states), len(adj.signals))


def random_graph_thresholds(random_models: Sequence[tuple[SageForecaster, BlockAdjacency]],
                            windows: Sequence[WindowSample]) -> dict[tuple[str, str, int], float]:
    """Target MAE of random-graph models, averaged over the given (model, graph) pairs."""
    if not random_models:
        raise ValueError("need at least one random-graph model")
    adj0 = random_models[0][1]
    out = {}
    for w in windows:
        errs = np.mean([window_mae(m, g, w) for m, g in random_models], axis=0)
        for a, st in enumerate(adj0.states):
            for b, sig in enumerate(adj0.signals):
                out[(st, sig, w.window_start)] = float(errs[a, b])
    return out


@dataclass
class EdgeImportance:
    """How often each edge appeared in a counterfactual removal set."""

    counts: dict[tuple[str, str, str], int] = field(default_factory=lambda: defaultdict(int))
    runs_per_state: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    by_signal: dict[str, dict[tuple[str, str], int]] = field(default_factory=lambda: defaultdict(lambda: defaultdict(int)))
    runs_per_signal: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    skipped: list[tuple[str, str, int, str]] = field(default_factory=list)

    def add(self, res: CounterfactualResult) -> None:
        self.runs_per_state[res.state] += 1
        self.runs_per_signal[res.signal] += 1
        for src, dst in res.removed:
            self.counts[(res.state, src, dst)] += 1
            self.by_signal[res.signal][(src, dst)] += 1

    def frequency(self, state: str, src: str, dst: str) -> float:
        runs = self.runs_per_state.get(state, 0)
        return self.counts.get((state, src, dst), 0) / runs if runs else 0.0

    def ranking(self, signal: str) -> list[tuple[tuple[str, str], int, float]]:
        """Edges removed in runs targeting ``signal``, most frequent first."""
        runs = self.runs_per_signal.get(signal, 0)
        items = self.by_signal.get(signal, {})
        ordered = sorted(items.items(), key=lambda kv: (-kv[1], kv[0]))
        return [(edge, c, c / runs if runs else 0.0) for edge, c in ordered]

    def rows(self) -> list[tuple[str, str, str, int, float]]:
        return [(st, s, d, c, self.frequency(st, s, d)) for (st, s, d), c in sorted(self.counts.items())]

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state", "src", "dst", "count", "frequency"])
            for st, s, d, c, f in self.rows():
                w.writerow([st, s, d, c, repr(f)])

    @staticmethod
    def read_rows(path) -> list[tuple[str, str, str, int, float]]:
        with open(path, newline="", encoding="utf-8") as fh:
            return [(r["state"], r["src"], r["dst"], int(r["count"]), float(r["frequency"]))
                    for r in csv.DictReader(fh)]


def importance_scan(models: Sequence[SageForecaster], adj: BlockAdjacency, panel: Panel,
                    windows: Sequence[WindowSample],
                    thresholds: Mapping[tuple[str, str, int], float] | Callable[[str, str, int], float],
                    signals: Sequence[str] | None = None, states: Sequence[str] | None = None,
                    **search_kwargs) -> EdgeImportance:
    """Run :func:`counterfactual_search` for every model, state, target signal and window."""
    if adj.n_nodes != panel.n_nodes:
        raise ValueError("graph and panel disagree on the node count")
    signals = list(signals or panel.signals)
    states = list(states or panel.states)
    lookup = thresholds if callable(thresholds) else (lambda st, sig, t: thresholds[(st, sig, t)])
    imp = EdgeImportance()
    for model in models:
        for st in states:
            for sig in signals:
                for w in windows:
                    try:
                        res = counterfactual_search(model, adj, st, sig, w, lookup(st, sig, w.window_start),
                                                    **search_kwargs)
                    except Exception as exc:  # one bad run should not sink the scan
                        logger.warning("skipped state=%s signal=%s window=%d: %s", st, sig, w.window_start, exc)
                        imp.skipped.append((st, sig, w.window_start, str(exc)))
                        continue
                    imp.add(res)
    return imp


def export_explained_subgraph(importance: EdgeImportance, adj: BlockAdjacency, focus: str, top_n: int = 3,
                              categories: Mapping[str, str] | None = None, state: str | None = None) -> GraphExport:
    """Signal-level neighbourhood of ``focus`` with importance-weighted edges.

    Uses ``state``'s graph, or the union of all states' edges when omitted.
    The ``top_n`` most frequently removed edges (for runs targeting
    ``focus``) are flagged ``important``.
    """
    if focus not in adj.signals:
        raise KeyError(f"unknown signal {focus!r}")
    categories = categories or {}
    graphs = adj.graphs if state is None else (adj.graphs[adj.states.index(state)],)
    pairs: dict[tuple[str, str], float] = {}
    for g in graphs:
        for e in g.edges:
            s, d = g.signals[e.src], g.signals[e.dst]
            if focus in (s, d):
                pairs.setdefault((s, d), e.weight)
    freq = {edge: f for edge, _, f in importance.ranking(focus)}
    counts = {edge: c for edge, c, _ in importance.ranking(focus)}
    ranked = sorted(pairs, key=lambda p: (-counts.get(p, 0), p))
    flagged = set(ranked[:top_n])
    nodes = sorted({focus} | {n for p in pairs for n in p})
    out = GraphExport(graph={"focus": focus, "state": state, "top_n": top_n})
    for n in nodes:
        out.nodes.append({"id": n, "signal": n, "state": state or "*", "category": categories.get(n, ""),
                          "focus": n == focus})
    for s, d in sorted(pairs):
        out.links.append({"source": s, "target": d, "weight": pairs[(s, d)],
                          "importance": float(freq.get((s, d), 0.0)), "important": (s, d) in flagged})
    return out
