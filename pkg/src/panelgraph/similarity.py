"""Pairwise signal similarity: DTW, DTW over shapelet descriptors, lagged correlation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .signals import Panel, SplitSpec

MEASURES = ("dtw_s", "lagged")


@dataclass(frozen=True)
class ShapeletDictionary:
    """Orthonormal set of length-``w`` trend templates."""

    names: tuple[str, ...]
    shapelets: np.ndarray  # (S, w)

    @property
    def window(self) -> int:
        return self.shapelets.shape[1]

    @classmethod
    def default(cls, w: int = 4) -> "ShapeletDictionary":
        """Flat, linear-up and peak templates, Gram-Schmidt orthonormalized."""
        if w < 3:
            raise ValueError("shapelet window must be at least 3")
        x = np.linspace(-1.0, 1.0, w)
        raw = [("flat", np.ones(w)), ("linear_up", x), ("peak", 1.0 - np.abs(x))]
        return cls.from_templates([n for n, _ in raw], [v for _, v in raw])

    @classmethod
    def from_templates(cls, names: Sequence[str], templates: Sequence[np.ndarray]) -> "ShapeletDictionary":
        basis: list[np.ndarray] = []
        for name, v in zip(names, templates):
            u = np.asarray(v, dtype=np.float64).copy()
            for b in basis:
                u -= (u @ b) * b
            norm = np.linalg.norm(u)
            if norm < 1e-12:
                raise ValueError(f"template {name!r} is linearly dependent on earlier ones")
            basis.append(u / norm)
        return cls(tuple(names), np.vstack(basis))


def dtw(a, b, band: int | None = None) -> float:
    """Dynamic time warping distance with squared-Euclidean local cost.

    ``a`` and ``b`` are sequences of scalars or of equal-length vectors
    (rows are time steps). Returns the square root of the minimal cumulative
    cost. ``band`` bounds ``|i - j|`` (Sakoe-Chiba).
    """
    A = np.asarray(a, dtype=np.float64)
    B = np.asarray(b, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    n, m = A.shape[0], B.shape[0]
    if n == 0 or m == 0:
        raise ValueError("dtw needs non-empty series")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dtw: element widths differ ({A.shape[1]} vs {B.shape[1]})")
    if band is not None and band < abs(n - m):
        raise ValueError(f"band {band} narrower than length difference {abs(n - m)}")
    cost = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)
    if band is not None:
        ii, jj = np.indices((n, m))
        cost = np.where(np.abs(ii - jj) <= band, cost, np.inf)

    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    # sweep anti-diagonals: every cell with i + j == k depends only on k-1 and k-2
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        best = np.minimum(np.minimum(D[i - 1, j - 1], D[i - 1, j]), D[i, j - 1])
        D[i, j] = cost[i - 1, j - 1] + best
    return float(np.sqrt(D[n, m]))


def shapelet_transform(x, shapelets: ShapeletDictionary | None = None) -> np.ndarray:
    """Project every z-normalized sliding window of ``x`` onto the shapelets.

    Returns an ``(n_shapelets, len(x) - w + 1)`` descriptor matrix; constant
    windows project to zero.
    """
    shapelets = shapelets or ShapeletDictionary.default()
    x = np.asarray(x, dtype=np.float64)
    w = shapelets.window
    if x.ndim != 1 or x.shape[0] < w:
        raise ValueError(f"series of length {x.shape[0] if x.ndim == 1 else x.shape} shorter than window {w}")
    windows = np.lib.stride_tricks.sliding_window_view(x, w)
    mu = windows.mean(axis=1, keepdims=True)
    sd = windows.std(axis=1, keepdims=True)
    flat = sd[:, 0] < 1e-12
    z = np.where(flat[:, None], 0.0, (windows - mu) / np.where(flat[:, None], 1.0, sd))
    return shapelets.shapelets @ z.T


def dtw_s(a, b, shapelets: ShapeletDictionary | None = None, band: int | None = None) -> float:
    """Similarity ``1 / (1 + d)`` where ``d`` is DTW between shapelet descriptors."""
    shapelets = shapelets or ShapeletDictionary.default()
    da = shapelet_transform(a, shapelets)
    db = shapelet_transform(b, shapelets)
    return 1.0 / (1.0 + dtw(da.T, db.T, band=band))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    den = np.sqrt((xc @ xc) * (yc @ yc))
    if den < 1e-15:
        return 0.0
    return float(np.clip((xc @ yc) / den, -1.0, 1.0))


def lagged_correlation(a, b, max_lag: int = 4) -> tuple[float, int]:
    """Largest |Pearson correlation| of ``a`` leading ``b`` by 0..max_lag steps.

    Returns ``(abs_corr, lag)``; ties resolve to the smaller lag.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("lagged_correlation needs two 1-D series of equal length")
    T = a.shape[0]
    if max_lag < 0 or T <= max_lag + 2:
        raise ValueError(f"series of length {T} too short for max_lag={max_lag}")
    best, best_lag = -1.0, 0
    for lag in range(max_lag + 1):
        c = abs(_pearson(a[: T - lag], b[lag:]))
        if c > best:
            best, best_lag = c, lag
    return best, best_lag


@dataclass(frozen=True)
class SimilarityMatrix:
    """Scores for one state; ``values[i, j]`` rates source ``j`` for destination ``i``."""

    state: str
    signals: tuple[str, ...]
    measure: str
    values: np.ndarray
    lags: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    train_weeks: tuple[int, int] | None = None

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["", *self.signals])
            for name, row in zip(self.signals, self.values):
                w.writerow([name, *(repr(float(v)) for v in row)])
        meta = {"state": self.state, "measure": self.measure, "params": self.params,
                "train_weeks": list(self.train_weeks) if self.train_weeks else None,
                "lags": self.lags.tolist() if self.lags is not None else None}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "SimilarityMatrix":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        signals = tuple(rows[0][1:])
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        meta = json.loads(path.with_suffix(".meta.json").read_text())
        lags = np.array(meta["lags"], dtype=int) if meta.get("lags") is not None else None
        tw = tuple(meta["train_weeks"]) if meta.get("train_weeks") else None
        return cls(meta["state"], signals, meta["measure"], values, lags, meta.get("params", {}), tw)


def similarity_matrix(panel: Panel, state: str, measure: str = "dtw_s", split: SplitSpec | None = None,
                      max_lag: int = 4, shapelets: ShapeletDictionary | None = None,
                      band: int | None = None) -> SimilarityMatrix:
    """All ordered signal pairs of one state, on training weeks when ``split`` is given."""
    if state not in panel.states:
        raise KeyError(f"unknown state {state!r}")
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}; expected one of {MEASURES}")
    stop = split.tau_start if split is not None else panel.n_weeks
    X = panel.values[panel.states.index(state), :, :stop]
    G = X.shape[0]
    vals = np.zeros((G, G))
    lags = None
    params: dict = {}
    if measure == "dtw_s":
        shapelets = shapelets or ShapeletDictionary.default()
        params = {"w": shapelets.window, "shapelets": list(shapelets.names), "band": band}
        desc = [shapelet_transform(X[g], shapelets).T for g in range(G)]
        for i in range(G):
            vals[i, i] = 1.0
            for j in range(i + 1, G):
                s = 1.0 / (1.0 + dtw(desc[i], desc[j], band=band))
                vals[i, j] = vals[j, i] = s
    else:
        params = {"max_lag": max_lag}
        lags = np.zeros((G, G), dtype=int)
        for i in range(G):
            for j in range(G):
                # source j leading destination i
                vals[i, j], lags[i, j] = lagged_correlation(X[j], X[i], max_lag)
    return SimilarityMatrix(state, panel.signals, measure, vals, lags, params, (0, stop))
