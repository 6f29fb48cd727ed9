"""Panel data model, CSV ingestion, normalization, windows and synthetic panels."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

WINDOW = 4
CATEGORIES = ("B", "DB", "H", "TV")

# CTIS signal names grouped by indicator family.
CTIS_CATEGORIES: dict[str, str] = {
    "smoothed_whh_cmnty_cli": "H",
    "deaths_incidence_num": "H",
    "confirmed_admissions_covid_1d_7dav": "H",
    "smoothed_wwearing_mask_7d": "B",
    "smoothed_wspent_time_indoors_1d": "B",
    "smoothed_wpublic_transit_1d": "B",
    "smoothed_wworried_catch_covid": "B",
    "smoothed_waccept_covid_vaccine_no_appointment": "TV",
    "smoothed_wdontneed_reason_dont_spend_time": "TV",
    "smoothed_wdontneed_reason_had_covid": "TV",
    "smoothed_wdontneed_reason_precautions": "TV",
    "smoothed_whesitancy_reason_cost": "TV",
    "smoothed_whesitancy_reason_distrust_gov": "TV",
    "smoothed_whesitancy_reason_ineffective": "TV",
    "smoothed_whesitancy_reason_low_priority": "TV",
    "smoothed_whesitancy_reason_religious": "TV",
    "smoothed_whesitancy_reason_sideeffects": "TV",
    "smoothed_whesitancy_reason_wait_safety": "TV",
    "smoothed_wbelief_created_small_group": "DB",
    "smoothed_wbelief_distancing_effective": "DB",
    "smoothed_wbelief_govt_exploitation": "DB",
    "smoothed_wdelayed_care_cost": "DB",
    "smoothed_wrace_treated_fairly_healthcare": "DB",
    "smoothed_wtrust_covid_info_friends": "DB",
    "smoothed_wtrust_covid_info_govt_health": "DB",
    "smoothed_wtrust_covid_info_religious": "DB",
}


class PanelError(ValueError):
    """Malformed or inconsistent panel input."""


class GapError(PanelError):
    def __init__(self, state: str, signal: str, date: str):
        super().__init__(f"missing value for state={state!r} signal={signal!r} date={date}")
        self.state, self.signal, self.date = state, signal, date


class ConstantSeriesError(PanelError):
    pass


# ---------------------------------------------------------------------------
# data model


def validate_categories(categories: Mapping[str, str], signals: Sequence[str]) -> dict[str, str]:
    """Check that ``categories`` partitions ``signals`` into the four groups."""
    missing = [s for s in signals if s not in categories]
    if missing:
        raise PanelError(f"uncategorized signals: {missing}")
    extra = sorted(set(categories) - set(signals))
    if extra:
        raise PanelError(f"categories given for unknown signals: {extra}")
    bad = {s: c for s, c in categories.items() if c not in CATEGORIES}
    if bad:
        raise PanelError(f"unknown category labels: {bad}")
    return {s: categories[s] for s in signals}


@dataclass(frozen=True, eq=False)
class Panel:
    """Values indexed by (state, signal, period).

    ``values`` has shape ``(n_states, n_signals, n_periods)``. ``dates`` holds
    the ISO date that opens each period; ``freq`` is ``"daily"`` or
    ``"weekly"``.
    """

    states: tuple[str, ...]
    signals: tuple[str, ...]
    dates: tuple[str, ...]
    values: np.ndarray
    categories: dict[str, str] = field(default_factory=dict)
    freq: str = "weekly"

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        shape = (len(self.states), len(self.signals), len(self.dates))
        if vals.shape != shape:
            raise PanelError(f"values shape {vals.shape} != {shape}")
        if not np.all(np.isfinite(vals)):
            raise PanelError("panel values must be finite")
        if len(set(self.states)) != len(self.states) or len(set(self.signals)) != len(self.signals):
            raise PanelError("duplicate state or signal names")
        vals.setflags(write=False)
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "signals", tuple(self.signals))
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "values", vals)
        if self.categories:
            object.__setattr__(self, "categories", validate_categories(self.categories, self.signals))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_signals(self) -> int:
        return len(self.signals)

    @property
    def n_weeks(self) -> int:
        return len(self.dates)

    @property
    def n_nodes(self) -> int:
        return self.n_states * self.n_signals

    def series(self, state: str, signal: str) -> np.ndarray:
        return self.values[self.states.index(state), self.signals.index(signal)]

    def node_matrix(self, start: int, stop: int) -> np.ndarray:
        """Values over periods ``[start, stop)`` as an ``(n_nodes, stop - start)`` matrix.

        Row order is the global node order ``state_index * n_signals + signal_index``.
        """
        return self.values[:, :, start:stop].reshape(self.n_nodes, stop - start)

    def truncate(self, stop: int) -> "Panel":
        """Panel restricted to periods ``[0, stop)``."""
        return Panel(self.states, self.signals, self.dates[:stop], self.values[:, :, :stop],
                     dict(self.categories), self.freq)

    def with_values(self, values: np.ndarray) -> "Panel":
        return Panel(self.states, self.signals, self.dates, values, dict(self.categories), self.freq)

    def equals(self, other: "Panel") -> bool:
        return (self.states == other.states and self.signals == other.signals
                and self.dates == other.dates and self.freq == other.freq
                and self.categories == other.categories
                and np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class WindowSample:
    """Four input periods followed by four target periods, for every node."""

    window_start: int
    input: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        if self.input.shape[-1] != WINDOW or self.target.shape[-1] != WINDOW:
            raise PanelError("window input and target must span four periods")


@dataclass(frozen=True)
class SplitSpec:
    tau_start: int
    horizon: int = WINDOW

    def __post_init__(self):
        if self.tau_start < 2 * WINDOW:
            raise ValueError(f"tau_start must be >= {2 * WINDOW}, got {self.tau_start}")
        if self.horizon != WINDOW:
            raise ValueError("only a four-period horizon is supported")

    @property
    def test_weeks(self) -> range:
        return range(self.tau_start, self.tau_start + self.horizon)


# ---------------------------------------------------------------------------
# file IO


def _parse_date(text: str, where: str) -> str:
    try:
        return dt.date.fromisoformat(text.strip()).isoformat()
    except ValueError as exc:
        raise PanelError(f"unparseable date {text!r} at {where}") from exc


def _parse_float(text: str, where: str) -> float | None:
    text = text.strip()
    if text == "" or text.lower() in ("na", "nan"):
        return None
    try:
        value = float(text)
    except ValueError as exc:
        raise PanelError(f"unparseable value {text!r} at {where}") from exc
    if not np.isfinite(value):
        return None
    return value


def _read_cells(path: Path, schema: str) -> dict[tuple[str, str, str], float | None]:
    cells: dict[tuple[str, str, str], float | None] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        if schema == "auto":
            schema = "long" if header == ["state", "date", "signal", "value"] else "wide"
        if header[:2] != ["state", "date"]:
            raise PanelError(f"{path}: header must start with 'state,date', got {header[:2]}")
        if schema == "long":
            if header != ["state", "date", "signal", "value"]:
                raise PanelError(f"{path}: long schema needs header state,date,signal,value")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise PanelError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
                where = f"{path}:{lineno}"
                key = (row[0].strip(), _parse_date(row[1], where), row[2].strip())
                if key in cells:
                    raise PanelError(f"duplicate entry state={key[0]} date={key[1]} signal={key[2]}")
                cells[key] = _parse_float(row[3], where)
        elif schema == "wide":
            sig_names = header[2:]
            if not sig_names:
                raise PanelError(f"{path}: wide schema declares no signal columns")
            if len(set(sig_names)) != len(sig_names):
                raise PanelError(f"{path}: duplicate signal columns")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise PanelError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
                where = f"{path}:{lineno}"
                state, date = row[0].strip(), _parse_date(row[1], where)
                for name, text in zip(sig_names, row[2:]):
                    key = (state, date, name)
                    if key in cells:
                        raise PanelError(f"duplicate entry state={state} date={date} signal={name}")
                    cells[key] = _parse_float(text, where)
        else:
            raise ValueError(f"unknown schema {schema!r}")
    if not cells:
        raise PanelError(f"{path}: no data rows")
    return cells


def load_panel(path, schema: str = "auto", categories: Mapping[str, str] | None = None,
               freq: str | None = None) -> Panel:
    """Read a wide or long CSV into a raw (unnormalized) panel.

    States and signals keep first-appearance order; dates are sorted. Every
    (state, signal) series must be complete over a regularly spaced date
    grid; the first hole raises :class:`GapError`.
    """
    path = Path(path)
    cells = _read_cells(path, schema)
    states: list[str] = []
    signals: list[str] = []
    for st, _, sig in cells:
        if st not in states:
            states.append(st)
        if sig not in signals:
            signals.append(sig)
    dates = sorted({d for _, d, _ in cells})
    ordinals = [dt.date.fromisoformat(d).toordinal() for d in dates]
    step = min(np.diff(ordinals)) if len(dates) > 1 else 1
    grid = [dt.date.fromordinal(o).isoformat() for o in range(ordinals[0], ordinals[-1] + 1, step)]
    if freq is None:
        freq = "weekly" if step == 7 else "daily"

    values = np.empty((len(states), len(signals), len(grid)))
    for a, st in enumerate(states):
        for b, sig in enumerate(signals):
            for c, d in enumerate(grid):
                v = cells.get((st, d, sig))
                if v is None:
                    raise GapError(st, sig, d)
                values[a, b, c] = v
    return Panel(tuple(states), tuple(signals), tuple(grid), values, dict(categories or {}), freq)


def write_panel(panel: Panel, path, schema: str = "wide") -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if schema == "wide":
            w.writerow(["state", "date", *panel.signals])
            for a, st in enumerate(panel.states):
                for c, d in enumerate(panel.dates):
                    w.writerow([st, d, *(repr(float(v)) for v in panel.values[a, :, c])])
        elif schema == "long":
            w.writerow(["state", "date", "signal", "value"])
            for a, st in enumerate(panel.states):
                for c, d in enumerate(panel.dates):
                    for b, sig in enumerate(panel.signals):
                        w.writerow([st, d, sig, repr(float(panel.values[a, b, c]))])
        else:
            raise ValueError(f"unknown schema {schema!r}")


def load_categories(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["signal", "category"]:
            raise PanelError(f"{path}: header must be 'signal,category'")
        for row in reader:
            sig, cat = row["signal"].strip(), row["category"].strip()
            if sig in out:
                raise PanelError(f"{path}: signal {sig!r} listed twice")
            if cat not in CATEGORIES:
                raise PanelError(f"{path}: unknown category {cat!r} for {sig!r}")
            out[sig] = cat
    return out


def write_categories(categories: Mapping[str, str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["signal", "category"])
        for sig, cat in categories.items():
            w.writerow([sig, cat])


# ---------------------------------------------------------------------------
# transforms


def resample_weekly(panel: Panel) -> Panel:
    """Average consecutive 7-day blocks; a trailing partial week is dropped."""
    if panel.freq != "daily":
        raise PanelError(f"resample_weekly expects a daily panel, got {panel.freq!r}")
    n_weeks = panel.n_weeks // 7
    if n_weeks == 0:
        raise PanelError(f"need at least 7 days, got {panel.n_weeks}")
    vals = panel.values[:, :, : n_weeks * 7].reshape(panel.n_states, panel.n_signals, n_weeks, 7).mean(axis=3)
    dates = panel.dates[: n_weeks * 7 : 7]
    return Panel(panel.states, panel.signals, dates, vals, dict(panel.categories), "weekly")


@dataclass(frozen=True)
class NormalizationParams:
    states: tuple[str, ...]
    signals: tuple[str, ...]
    mins: np.ndarray
    maxs: np.ndarray

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state", "signal", "min", "max"])
            for a, st in enumerate(self.states):
                for b, sig in enumerate(self.signals):
                    w.writerow([st, sig, repr(float(self.mins[a, b])), repr(float(self.maxs[a, b]))])

    @classmethod
    def read(cls, path) -> "NormalizationParams":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rows.append((row["state"], row["signal"], float(row["min"]), float(row["max"])))
        states = tuple(dict.fromkeys(r[0] for r in rows))
        signals = tuple(dict.fromkeys(r[1] for r in rows))
        mins = np.empty((len(states), len(signals)))
        maxs = np.empty_like(mins)
        for st, sig, lo, hi in rows:
            mins[states.index(st), signals.index(sig)] = lo
            maxs[states.index(st), signals.index(sig)] = hi
        return cls(states, signals, mins, maxs)


def normalize(panel: Panel, mode: str = "full_series", split: SplitSpec | None = None,
              pooled: bool = False, strict: bool = False) -> tuple[Panel, NormalizationParams]:
    """Min-max scale every (state, signal) series into [0, 1].

    ``mode="train_only"`` fits min/max on periods before ``split.tau_start``
    and clips later values into [0, 1]; ``full_series`` (default) fits on the
    whole series, which leaks test-period range information into training.
    ``pooled`` shares one min/max per signal across states. Constant series
    map to 0.5 with a warning, or raise when ``strict``.
    """
    if mode == "full_series":
        fit = panel.values
    elif mode == "train_only":
        if split is None:
            raise ValueError("train_only normalization needs a SplitSpec")
        fit = panel.values[:, :, : split.tau_start]
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    lo = fit.min(axis=2)
    hi = fit.max(axis=2)
    if pooled:
        lo = np.broadcast_to(lo.min(axis=0, keepdims=True), lo.shape).copy()
        hi = np.broadcast_to(hi.max(axis=0, keepdims=True), hi.shape).copy()
    span = hi - lo
    const = span <= 0
    if const.any():
        pairs = [(panel.states[a], panel.signals[b]) for a, b in zip(*np.nonzero(const))]
        if strict:
            raise ConstantSeriesError(f"constant series cannot be min-max scaled: {pairs}")
        warnings.warn(f"constant series mapped to 0.5: {pairs}", stacklevel=2)
    scaled = (panel.values - lo[:, :, None]) / np.where(const, 1.0, span)[:, :, None]
    scaled = np.where(const[:, :, None], 0.5, scaled)
    scaled = np.clip(scaled, 0.0, 1.0)
    params = NormalizationParams(panel.states, panel.signals, lo, hi)
    return panel.with_values(scaled), params


def denormalize(panel: Panel, params: NormalizationParams) -> Panel:
    span = params.maxs - params.mins
    vals = panel.values * span[:, :, None] + params.mins[:, :, None]
    return panel.with_values(vals)


def rolling_windows(panel: Panel, start: int = 0, stop: int | None = None) -> list[WindowSample]:
    """All stride-1 (input, target) pairs lying inside periods ``[start, stop)``."""
    stop = panel.n_weeks if stop is None else stop
    if stop - start < 2 * WINDOW:
        warnings.warn(f"region [{start}, {stop}) too short for a {2 * WINDOW}-period window", stacklevel=2)
        return []
    out = []
    for t in range(start, stop - 2 * WINDOW + 1):
        out.append(WindowSample(t, panel.values[:, :, t:t + WINDOW], panel.values[:, :, t + WINDOW:t + 2 * WINDOW]))
    return out


# ---------------------------------------------------------------------------
# synthetic panels


@dataclass(frozen=True)
class Relation:
    """Planted driver: ``dst[t] += gain * src[t - lag]``."""

    src: int
    dst: int
    lag: int
    gain: float


@dataclass(frozen=True)
class CouplingSpec:
    n_states: int = 5
    n_signals: int = 8
    n_weeks: int = 80
    relations: tuple[tuple[Relation, ...], ...] = ()
    noise: float = 0.05
    seasonal_amplitude: float = 1.0
    ar_coef: float = 0.8
    ar_scale: float = 0.3
    start_date: str = "2020-05-18"

    def relations_for(self, state: int) -> tuple[Relation, ...]:
        if not self.relations:
            return ()
        return self.relations[state % len(self.relations)]


def planted_coupling_spec(n_states: int = 5, n_signals: int = 8, n_weeks: int = 80, noise: float = 0.05,
                          n_drivers: int | None = None, gain: float = 1.0, seed: int = 0,
                          **kwargs) -> CouplingSpec:
    """Random acyclic driver structure: a few root signals each drive others with lag 1-3."""
    rng = np.random.default_rng(seed)
    n_drivers = max(1, n_signals // 4) if n_drivers is None else n_drivers
    rel_sets = []
    for _ in range(n_states):
        order = rng.permutation(n_signals)
        drivers, driven = order[:n_drivers], order[n_drivers:]
        rels = []
        for dst in driven:
            src = int(drivers[rng.integers(n_drivers)])
            rels.append(Relation(src, int(dst), int(rng.integers(1, 4)), float(gain)))
        rel_sets.append(tuple(sorted(rels, key=lambda r: (r.dst, r.src))))
    return CouplingSpec(n_states, n_signals, n_weeks, tuple(rel_sets), noise, **kwargs)


def _instant_order(rels: Sequence[Relation], n: int) -> list[int]:
    """Topological order of the lag-0 dependency graph; raises on cycles."""
    deps = {i: set() for i in range(n)}
    for r in rels:
        if r.lag == 0:
            deps[r.dst].add(r.src)
    order, done = [], set()
    while len(order) < n:
        ready = [i for i in range(n) if i not in done and deps[i] <= done]
        if not ready:
            raise ValueError("cyclic instantaneous (lag 0) dependencies")
        order.extend(ready)
        done.update(ready)
    return order


def synth_panel(spec: CouplingSpec, seed: int = 0, state_names: Sequence[str] | None = None,
                signal_names: Sequence[str] | None = None, normalize_output: bool = True):
    """Generate a panel with planted directed couplings.

    Each series is a random-phase seasonal sinusoid plus an AR(1) component,
    plus ``gain * x_src[t - lag]`` for each planted relation into it, plus
    Gaussian noise; the result is min-max normalized per series. Returns the
    panel and the planted edges as ``(state, src_signal, dst_signal, lag, gain)``
    tuples.
    """
    rng = np.random.default_rng(seed)
    S, G, T = spec.n_states, spec.n_signals, spec.n_weeks
    states = tuple(state_names or (f"S{a:02d}" for a in range(S)))
    signals = tuple(signal_names or (f"sig{b:02d}" for b in range(G)))
    if len(states) != S or len(signals) != G:
        raise ValueError("state or signal names do not match the CouplingSpec sizes")
    burn = 8
    vals = np.zeros((S, G, T))
    planted = []
    t_axis = np.arange(-burn, T)
    for a in range(S):
        rels = [r for r in spec.relations_for(a) if r.gain != 0.0]
        for r in rels:
            if not (0 <= r.src < G and 0 <= r.dst < G) or r.src == r.dst or not 0 <= r.lag <= 3:
                raise ValueError(f"invalid relation {r}")
        order = _instant_order(rels, G)
        period = rng.uniform(12.0, 40.0, size=G)
        phase = rng.uniform(0.0, 2 * np.pi, size=G)
        base = spec.seasonal_amplitude * np.sin(2 * np.pi * t_axis[None, :] / period[:, None] + phase[:, None])
        ar = np.zeros((G, T + burn))
        shocks = rng.normal(0.0, spec.ar_scale, size=(G, T + burn))
        for t in range(1, T + burn):
            ar[:, t] = spec.ar_coef * ar[:, t - 1] + shocks[:, t]
        noise = rng.normal(0.0, 1.0, size=(G, T + burn)) * spec.noise
        x = np.zeros((G, T + burn))
        incoming = {i: [r for r in rels if r.dst == i] for i in range(G)}
        for t in range(T + burn):
            for i in order:
                v = base[i, t] + ar[i, t] + noise[i, t]
                for r in incoming[i]:
                    if t - r.lag >= 0:
                        v += r.gain * x[r.src, t - r.lag]
                x[i, t] = v
        vals[a] = x[:, burn:]
        planted.extend((states[a], signals[r.src], signals[r.dst], r.lag, r.gain) for r in rels)

    start = dt.date.fromisoformat(spec.start_date)
    dates = tuple((start + dt.timedelta(weeks=i)).isoformat() for i in range(T))
    cats = {sig: CATEGORIES[b % len(CATEGORIES)] for b, sig in enumerate(signals)}
    panel = Panel(states, signals, dates, vals, cats, "weekly")
    if normalize_output:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            panel, _ = normalize(panel)
    return panel, planted


def panel_from_arrays(values: np.ndarray, states: Iterable[str] | None = None,
                      signals: Iterable[str] | None = None, categories: Mapping[str, str] | None = None,
                      start_date: str = "2020-05-18") -> Panel:
    """Wrap an ``(n_states, n_signals, n_weeks)`` array as a weekly panel."""
    values = np.asarray(values, dtype=np.float64)
    S, G, T = values.shape
    states = tuple(states or (f"S{a:02d}" for a in range(S)))
    signals = tuple(signals or (f"sig{b:02d}" for b in range(G)))
    start = dt.date.fromisoformat(start_date)
    dates = tuple((start + dt.timedelta(weeks=i)).isoformat() for i in range(T))
    if categories is None:
        categories = {sig: CATEGORIES[b % len(CATEGORIES)] for b, sig in enumerate(signals)}
    return Panel(states, signals, dates, values, dict(categories), "weekly")
