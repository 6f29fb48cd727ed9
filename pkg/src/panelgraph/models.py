"""Forecasters mapping four input weeks to four forecast weeks per node."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .signals import WINDOW, Panel, SplitSpec, rolling_windows

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "panelgraph-sage"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# flat baseline


def flat_predict(inputs) -> np.ndarray:
    """Repeat the most recent input week at every horizon.

    ``inputs`` is ``(..., 4)``; the result has the same shape.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[-1] != WINDOW:
        raise ValueError(f"expected {WINDOW} input weeks, got {x.shape[-1]}")
    return np.repeat(x[..., -1:], WINDOW, axis=-1)


# ---------------------------------------------------------------------------
# autoregressive baseline (ARI(p, d) by least squares)


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class ARFit:
    d: int
    p: int
    coef: np.ndarray
    intercept: float
    sigma2: float
    aic: float
    flat: bool = False

    @property
    def history_needed(self) -> int:
        return 1 if self.flat else self.p + self.d


def lagged_design(y: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Regression rows ``[1, y[t-1], ..., y[t-p]] -> y[t]``."""
    n = y.shape[0] - p
    X = np.ones((n, p + 1))
    for k in range(1, p + 1):
        X[:, k] = y[p - k: p - k + n]
    return X, y[p:]


def ols(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return beta


def ar_fit(series, d_grid: Sequence[int] = (0, 1), p_grid: Sequence[int] = (1, 2, 3, 4)) -> ARFit:
    """Select (d, p) by AIC over least-squares AR fits of the d-times differenced series.

    Falls back to a flagged flat model when every candidate regression is
    singular (e.g. a constant series).
    """
    y0 = np.asarray(series, dtype=np.float64)
    if y0.ndim != 1:
        raise ValueError("ar_fit expects a 1-D series")
    if y0.shape[0] < 3 * max(p_grid) + 8:
        raise InsufficientHistoryError(f"need >= {3 * max(p_grid) + 8} points, got {y0.shape[0]}")
    best: ARFit | None = None
    for d in d_grid:
        if d not in (0, 1):
            raise ValueError("differencing order must be 0 or 1")
        y = np.diff(y0) if d == 1 else y0
        for p in p_grid:
            X, target = lagged_design(y, p)
            if np.ptp(target) < 1e-12 or np.linalg.matrix_rank(X) < p + 1:
                continue
            beta = ols(X, target)
            resid = target - X @ beta
            n = target.shape[0]
            sigma2 = float(resid @ resid / n)
            aic = n * np.log(max(sigma2, 1e-300)) + 2 * (p + 1)
            cand = ARFit(d, p, beta[1:].copy(), float(beta[0]), sigma2, float(aic))
            if best is None or cand.aic < best.aic:
                best = cand
    if best is None:
        return ARFit(0, 0, np.zeros(0), 0.0, 0.0, float("nan"), flat=True)
    return best


def ar_predict(model: ARFit, history, steps: int = WINDOW, clip: bool = True) -> np.ndarray:
    """Iterated multi-step forecast, feeding predictions back as lags."""
    h = np.asarray(history, dtype=np.float64)
    if h.shape[0] < model.history_needed:
        raise InsufficientHistoryError(f"need {model.history_needed} recent values, got {h.shape[0]}")
    if model.flat:
        out = np.full(steps, h[-1])
    else:
        y = list(np.diff(h) if model.d == 1 else h)
        preds = []
        for _ in range(steps):
            nxt = model.intercept + sum(model.coef[k] * y[-1 - k] for k in range(model.p))
            y.append(nxt)
            preds.append(nxt)
        out = np.asarray(preds)
        if model.d == 1:
            out = h[-1] + np.cumsum(out)
    return np.clip(out, 0.0, 1.0) if clip else out


@dataclass
class ARModel:
    """One :class:`ARFit` per (state, signal) node, fitted on weeks before ``tau_start``."""

    fits: dict[tuple[str, str], ARFit]
    tau_start: int

    def predict(self, panel: Panel, state: str, signal: str) -> np.ndarray:
        hist = panel.series(state, signal)[: self.tau_start]
        return ar_predict(self.fits[(state, signal)], hist)


def ar_fit_panel(panel: Panel, tau_start: int, d_grid=(0, 1), p_grid=(1, 2, 3, 4)) -> ARModel:
    fits = {}
    for a, st in enumerate(panel.states):
        for b, sig in enumerate(panel.signals):
            fits[(st, sig)] = ar_fit(panel.values[a, b, :tau_start], d_grid, p_grid)
    return ARModel(fits, tau_start)


# ---------------------------------------------------------------------------
# GraphSAGE forecaster


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SageConfig:
    layers: int = 2
    hidden: int = 64
    epochs: int = 300
    lr: float = 1e-3
    loss: str = "mae"
    aggregator_weighted: bool = False

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError(f"invalid hyperparameters {self}")
        if self.loss not in ("mae", "mse"):
            raise ValueError(f"loss must be 'mae' or 'mse', got {self.loss!r}")


@dataclass
class SageForecaster:
    """Stacked mean-aggregator GraphSAGE layers with a linear readout.

    Layer ``l`` maps ``concat(h, neighbor_mean(h))`` (width ``2 * d``) through
    ``weights[l]`` plus bias and a ReLU; the readout maps the last hidden
    layer to the four horizons.
    """

    config: SageConfig
    seed: int
    weights: list[ad.Tensor] = field(default_factory=list)
    biases: list[ad.Tensor] = field(default_factory=list)
    readout: ad.Tensor | None = None
    readout_bias: ad.Tensor | None = None

    @classmethod
    def init(cls, config: SageConfig | None = None, seed: int = 0) -> "SageForecaster":
        config = config or SageConfig()
        rng = np.random.default_rng(seed)
        widths = [WINDOW] + [config.hidden] * config.layers
        weights, biases = [], []
        for d_in, d_out in zip(widths[:-1], widths[1:]):
            lim = np.sqrt(6.0 / (2 * d_in + d_out))
            weights.append(ad.Tensor(rng.uniform(-lim, lim, size=(2 * d_in, d_out)), requires_grad=True))
            biases.append(ad.Tensor(np.zeros(d_out), requires_grad=True))
        lim = np.sqrt(6.0 / (config.hidden + WINDOW))
        readout = ad.Tensor(rng.uniform(-lim, lim, size=(config.hidden, WINDOW)), requires_grad=True)
        return cls(config, seed, weights, biases, readout, ad.Tensor(np.zeros(WINDOW), requires_grad=True))

    def parameters(self) -> list[ad.Tensor]:
        return [*self.weights, *self.biases, self.readout, self.readout_bias]

    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {f"W{i + 1}": w for i, w in enumerate(self.weights)}
        out.update({f"b{i + 1}": b for i, b in enumerate(self.biases)})
        out["readout"] = self.readout
        out["readout_bias"] = self.readout_bias
        return out

    def copy(self) -> "SageForecaster":
        clone = lambda t: ad.Tensor(t.data.copy(), requires_grad=t.requires_grad)  # noqa: E731
        return SageForecaster(self.config, self.seed, [clone(w) for w in self.weights],
                              [clone(b) for b in self.biases], clone(self.readout), clone(self.readout_bias))

    def frozen(self) -> "SageForecaster":
        """Copy whose parameters are constants (no gradients)."""
        const = lambda t: ad.Tensor(t.data.copy())  # noqa: E731
        return SageForecaster(self.config, self.seed, [const(w) for w in self.weights],
                              [const(b) for b in self.biases], const(self.readout), const(self.readout_bias))

    def predict(self, features, adj) -> np.ndarray:
        return sage_forward(self, features, adj).data.copy()

    # checkpoints -----------------------------------------------------------

    def save(self, path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "hyperparameters": asdict(self.config),
            "seed": self.seed,
            "weights": {k: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
                        for k, t in self.named_parameters().items()},
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SageForecaster":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a forecaster checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        config = SageConfig(**payload["hyperparameters"])
        W = payload["weights"]

        def t(name):
            return ad.Tensor(np.array(W[name]["data"], dtype=np.float64).reshape(W[name]["shape"]), requires_grad=True)

        return cls(config, int(payload["seed"]), [t(f"W{i + 1}") for i in range(config.layers)],
                   [t(f"b{i + 1}") for i in range(config.layers)], t("readout"), t("readout_bias"))


def sage_forward(model: SageForecaster, features, adj, edge_weight=None, normalize: str = "weights") -> ad.Tensor:
    """Forecast ``(rows, 4)`` from ``(rows, 4)`` input weeks.

    ``rows`` is ``adj.n_nodes`` or a multiple of it (stacked windows).
    ``edge_weight`` overrides the aggregation weights (used by the explainer);
    otherwise the graph's weights are used when the model was configured with
    ``aggregator_weighted``.
    """
    h = features if isinstance(features, ad.Tensor) else ad.Tensor(features)
    if h.data.ndim != 2 or h.shape[1] != WINDOW:
        raise ad.DimensionError(f"features must be (rows, {WINDOW}), got {h.shape}")
    if h.shape[0] % adj.n_nodes:
        raise ad.DimensionError(f"{h.shape[0]} feature rows for a graph of {adj.n_nodes} nodes")
    if edge_weight is None and model.config.aggregator_weighted:
        edge_weight = adj.weight
    for W, b in zip(model.weights, model.biases):
        nb = ad.neighbor_mean(h, adj, edge_weight, normalize)
        h = ad.relu(ad.add_row(ad.matmul(ad.concat_cols(h, nb), W), b))
    return ad.add_row(ad.matmul(h, model.readout), model.readout_bias)


def training_arrays(panel: Panel, split: SplitSpec) -> tuple[np.ndarray, np.ndarray, int]:
    """Stack every training window as ``(n_windows * n_nodes, 4)`` inputs and targets."""
    wins = rolling_windows(panel, 0, split.tau_start)
    if not wins:
        raise ValueError(f"no complete training window before week {split.tau_start}")
    N = panel.n_nodes
    X = np.vstack([w.input.reshape(N, WINDOW) for w in wins])
    Y = np.vstack([w.target.reshape(N, WINDOW) for w in wins])
    return X, Y, len(wins)


@dataclass
class TrainResult:
    model: SageForecaster
    loss_trace: list[float]


def sage_train(model: SageForecaster, panel: Panel, adj, split: SplitSpec) -> TrainResult:
    """Full-batch Adam on the mean training loss over all windows, nodes and horizons.

    Only weeks before ``split.tau_start`` are read. The model is updated in
    place and also returned.
    """
    if adj.n_nodes != panel.n_nodes:
        raise ad.DimensionError(f"graph has {adj.n_nodes} nodes, panel has {panel.n_nodes}")
    cfg = model.config
    X, Y, _ = training_arrays(panel.truncate(split.tau_start), split)
    Xt = ad.Tensor(X)
    loss_fn = ad.mae_loss if cfg.loss == "mae" else ad.mse_loss
    params = model.parameters()
    opt = ad.Adam(params, lr=cfg.lr)
    trace = []
    for epoch in range(cfg.epochs):
        with ad.Tape() as tape:
            loss = loss_fn(sage_forward(model, Xt, adj), Y)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} at epoch {epoch + 1} (lr={cfg.lr}, seed={model.seed})")
        trace.append(value)
        grads = tape.backward(loss, params)
        opt.step(grads)
    return TrainResult(model, trace)


def node_features(panel: Panel, end: int) -> np.ndarray:
    """The four weeks ending before ``end`` for every node, ``(n_nodes, 4)``."""
    if end < WINDOW:
        raise ValueError(f"need {WINDOW} weeks before {end}")
    return panel.node_matrix(end - WINDOW, end)
