"""Rolling-origin backtests and category-by-horizon MAE tables."""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graphbuild import build_graphs
from .models import SageConfig, SageForecaster, ar_fit_panel, flat_predict, node_features, sage_forward, sage_train
from .signals import CATEGORIES, WINDOW, Panel, SplitSpec, validate_categories
from .similarity import ShapeletDictionary, similarity_matrix

logger = logging.getLogger(__name__)

HORIZONS = (1, 2, 3, 4)
COLUMNS = (*CATEGORIES, "AVG")
RECORD_FIELDS = ("model", "seed", "tau_start", "state", "signal", "horizon", "pred", "true")
MODEL_KINDS = ("flat", "ar", "sage")


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    kind: str
    strategy: str | None = None
    k: int = 5
    k_avg: float = 5.0
    sage: SageConfig = field(default_factory=SageConfig)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "sage" and self.strategy is None:
            raise ValueError(f"model {self.name!r}: sage models need a graph strategy")

    @property
    def deterministic(self) -> bool:
        return self.kind != "sage"


def default_models(sage: SageConfig | None = None, k: int = 5, k_avg: float = 5.0) -> list[ModelSpec]:
    sage = sage or SageConfig()
    out = [ModelSpec("Baseline", "flat"), ModelSpec("ARIMA", "ar")]
    for label, strategy in (("Random", "random"), ("Full", "full"), ("Lagged", "lagged"), ("DTW+S", "dtw_s")):
        out.append(ModelSpec(f"Sage ({label})", "sage", strategy, k, k_avg, sage))
    return out


def default_tau_schedule(n_weeks: int, first: int = 20, step: int = 1) -> list[int]:
    """Every ``step``-th week from ``first`` up to ``n_weeks - 4`` inclusive."""
    return list(range(first, n_weeks - WINDOW + 1, step))


@dataclass(frozen=True)
class ExperimentConfig:
    models: tuple[ModelSpec, ...]
    tau_starts: tuple[int, ...]
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    max_lag: int = 4
    shapelet_window: int = WINDOW

    def __post_init__(self):
        taus = list(self.tau_starts)
        if not taus:
            raise ValueError("empty tau_start schedule")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError("tau_start values must be strictly increasing")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError("model names must be unique")
        for m in self.models:
            if "," in m.name:
                raise ValueError(f"model name {m.name!r} may not contain commas")

    def check_panel(self, panel: Panel) -> None:
        for tau in self.tau_starts:
            SplitSpec(tau)
            if tau + WINDOW > panel.n_weeks:
                raise ExperimentError(f"tau_start={tau} leaves fewer than {WINDOW} test weeks in a "
                                      f"{panel.n_weeks}-week panel")


@dataclass(frozen=True)
class ForecastRecord:
    model: str
    seed: int
    tau_start: int
    state: str
    signal: str
    horizon: int
    pred: float
    true: float


def _records_for(name: str, seed: int, tau: int, panel: Panel, preds: np.ndarray) -> list[ForecastRecord]:
    truth = panel.node_matrix(tau, tau + WINDOW)
    out = []
    G = panel.n_signals
    for node in range(panel.n_nodes):
        st, sig = panel.states[node // G], panel.signals[node % G]
        for h in HORIZONS:
            out.append(ForecastRecord(name, seed, tau, st, sig, h, float(preds[node, h - 1]),
                                      float(truth[node, h - 1])))
    return out


def forecast_split(spec: ModelSpec, panel: Panel, tau: int, seed: int, similarities=None) -> np.ndarray:
    """Fit on weeks ``[0, tau)`` of ``panel`` and forecast weeks ``[tau, tau + 4)`` for every node."""
    train = panel.truncate(tau)
    feats = node_features(train, tau)
    if spec.kind == "flat":
        return flat_predict(feats)
    if spec.kind == "ar":
        model = ar_fit_panel(train, tau)
        return np.vstack([model.predict(train, st, sig) for st in train.states for sig in train.signals])
    split = SplitSpec(tau)
    adj = build_graphs(train, spec.strategy, k=spec.k, k_avg=spec.k_avg, seed=seed, split=split,
                       similarities=similarities)
    model = SageForecaster.init(spec.sage, seed)
    sage_train(model, train, adj, split)
    return np.clip(sage_forward(model, feats, adj).data, 0.0, 1.0)


def run_experiment(panel: Panel, config: ExperimentConfig) -> list[ForecastRecord]:
    """Backtest every model at every split; deterministic models run once (first seed)."""
    config.check_panel(panel)
    sim_cache: dict[tuple[int, str], dict] = {}
    records: list[ForecastRecord] = []
    for spec in config.models:
        seeds = config.seeds[:1] if spec.deterministic else config.seeds
        for seed in seeds:
            for tau in config.tau_starts:
                sims = None
                if spec.kind == "sage" and spec.strategy in ("lagged", "dtw_s"):
                    key = (tau, spec.strategy)
                    if key not in sim_cache:
                        train = panel.truncate(tau)
                        shapelets = ShapeletDictionary.default(config.shapelet_window)
                        sim_cache[key] = {st: similarity_matrix(train, st, spec.strategy, SplitSpec(tau),
                                                                max_lag=config.max_lag, shapelets=shapelets)
                                          for st in panel.states}
                    sims = sim_cache[key]
                try:
                    preds = forecast_split(spec, panel, tau, seed, sims)
                except Exception as exc:
                    raise ExperimentError(f"model {spec.name!r} failed at seed={seed} tau_start={tau}: {exc}") from exc
                records.extend(_records_for(spec.name, seed, tau, panel, preds))
                logger.info("model=%s seed=%d tau_start=%d done", spec.name, seed, tau)
    return records


# ---------------------------------------------------------------------------
# aggregation and tables


@dataclass
class MetricsTable:
    """``cells[(model, horizon, column)] = (mae, std or None)``; columns B, DB, H, TV, AVG."""

    models: list[str]
    cells: dict[tuple[str, int, str], tuple[float, float | None]]

    def mae(self, model: str, horizon: int, column: str) -> float:
        return self.cells[(model, horizon, column)][0]

    def std(self, model: str, horizon: int, column: str) -> float | None:
        return self.cells[(model, horizon, column)][1]

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricsTable) and self.models == other.models and self.cells == other.cells

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "horizon", "category", "mae", "std"])
        for m in self.models:
            for h in HORIZONS:
                for c in COLUMNS:
                    if (m, h, c) in self.cells:
                        mae, sd = self.cells[(m, h, c)]
                        w.writerow([m, h, c, repr(mae), "NA" if sd is None else repr(sd)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsTable":
        models: list[str] = []
        cells = {}
        for row in csv.DictReader(io.StringIO(text)):
            if row["model"] not in models:
                models.append(row["model"])
            sd = None if row["std"] == "NA" else float(row["std"])
            cells[(row["model"], int(row["horizon"]), row["category"])] = (float(row["mae"]), sd)
        return cls(models, cells)


def aggregate(records: Sequence[ForecastRecord], categories: Mapping[str, str]) -> MetricsTable:
    """Seed-averaged MAE per (model, horizon, category) plus the AVG column.

    Absolute errors are pooled within each cell for each seed; the reported
    value is the mean of those seed-level MAEs and the deviation is their
    population standard deviation (``None`` for single-seed models). AVG is
    computed per seed as the unweighted mean of the category MAEs.
    """
    if not records:
        raise ValueError("no records to aggregate")
    missing = sorted({r.signal for r in records} - set(categories))
    if missing:
        raise ValueError(f"uncategorized signals: {missing}")
    sums: dict[tuple, float] = defaultdict(float)
    counts: dict[tuple, int] = defaultdict(int)
    models: list[str] = []
    seeds: dict[str, set[int]] = defaultdict(set)
    for r in sorted(records, key=lambda r: (r.model, r.seed, r.tau_start, r.state, r.signal, r.horizon, r.pred, r.true)):
        key = (r.model, r.seed, r.horizon, categories[r.signal])
        sums[key] += abs(r.pred - r.true)
        counts[key] += 1
        seeds[r.model].add(r.seed)
    for r in records:
        if r.model not in models:
            models.append(r.model)

    cells = {}
    for m in models:
        seed_list = sorted(seeds[m])
        for h in HORIZONS:
            per_col: dict[str, list[float]] = {}
            present = [c for c in CATEGORIES if any((m, s, h, c) in counts for s in seed_list)]
            if not present:
                continue
            for c in present:
                per_col[c] = [sums[(m, s, h, c)] / counts[(m, s, h, c)] for s in seed_list]
            per_col["AVG"] = [float(np.mean([per_col[c][i] for c in present])) for i in range(len(seed_list))]
            for c, vals in per_col.items():
                arr = np.asarray(vals)
                sd = float(arr.std()) if arr.size > 1 else None
                cells[(m, h, c)] = (float(arr.mean()), sd)
    return MetricsTable(models, cells)


def _column_marks(values: Mapping[str, float]) -> dict[str, str]:
    distinct = sorted(set(values.values()))
    if len(values) < 2 or len(distinct) < 1:
        return {}
    marks = {}
    best = distinct[0]
    second = distinct[1] if len(distinct) > 1 else None
    worst = distinct[-1] if len(distinct) > 1 else None
    for m, v in values.items():
        if v == best:
            marks[m] = "best"
        elif v == worst:
            marks[m] = "worst"
        elif v == second:
            marks[m] = "second"
    return marks


def render_table(table: MetricsTable, fmt: str = "markdown", digits: int = 4) -> str:
    """CSV (lossless) or markdown with ``**best**``, ``_second_`` and ``!worst!`` per column."""
    if fmt == "csv":
        return table.to_csv()
    if fmt != "markdown":
        raise ValueError(f"unknown table format {fmt!r}")
    cols = [(h, c) for h in HORIZONS for c in COLUMNS if any((m, h, c) in table.cells for m in table.models)]
    marks = {}
    for h, c in cols:
        vals = {m: table.cells[(m, h, c)][0] for m in table.models if (m, h, c) in table.cells}
        for m, mark in _column_marks(vals).items():
            marks[(m, h, c)] = mark
    header = ["MAE", *(f"{h}w {c}" for h, c in cols)]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    wrap = {"best": "**{}**", "second": "_{}_", "worst": "!{}!"}
    for m in table.models:
        row = [m]
        for h, c in cols:
            if (m, h, c) not in table.cells:
                row.append("")
                continue
            mae, sd = table.cells[(m, h, c)]
            text = f"{mae:.{digits}f} ± " + ("NA" if sd is None else f"{sd:.{digits}f}")
            mark = marks.get((m, h, c))
            row.append(wrap[mark].format(text) if mark else text)
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# record files


def export_records(records: Iterable[ForecastRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.model, r.seed, r.tau_start, r.state, r.signal, r.horizon, repr(r.pred), repr(r.true)])


def read_records(path) -> list[ForecastRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
            raise ValueError(f"{path}: header must be {','.join(RECORD_FIELDS)}")
        return [ForecastRecord(r["model"], int(r["seed"]), int(r["tau_start"]), r["state"], r["signal"],
                               int(r["horizon"]), float(r["pred"]), float(r["true"])) for r in reader]


def relative_improvement(records: Sequence[ForecastRecord], baseline: str = "Baseline") -> dict[tuple[str, int, str], float]:
    """Per (model, horizon, signal): ``(MAE_baseline - MAE_model) / MAE_baseline``.

    Positive values are gains over the baseline; signals whose baseline MAE is
    zero are skipped.
    """
    acc: dict[tuple[str, int, str], list[float]] = defaultdict(list)
    for r in records:
        acc[(r.model, r.horizon, r.signal)].append(abs(r.pred - r.true))
    out = {}
    for (m, h, sig), errs in sorted(acc.items()):
        if m == baseline or (baseline, h, sig) not in acc:
            continue
        base = float(np.mean(acc[(baseline, h, sig)]))
        if base > 0:
            out[(m, h, sig)] = (base - float(np.mean(errs))) / base
    return out


def categorized(panel: Panel) -> dict[str, str]:
    if not panel.categories:
        raise ValueError("panel carries no category map")
    return validate_categories(panel.categories, panel.signals)
