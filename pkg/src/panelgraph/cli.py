"""Command-line pipeline: ingest, synth, similarity, build-graph, train, evaluate, explain, report.

Every command reads an optional INI config (``--config``), writes its
artifacts into ``<out>/<command>-<digest>/`` where the digest covers the
command, its arguments, the effective config and the input file contents,
and records a ``manifest.json`` next to them. On success a one-line JSON
summary goes to stdout; on failure a JSON error object goes to stderr and
the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .evaluate import (ExperimentConfig, ModelSpec, aggregate, default_models, default_tau_schedule,
                       export_records, read_records, render_table, run_experiment)
from .explain import export_explained_subgraph, importance_scan, random_graph_thresholds
from .graphbuild import (STRATEGIES, adjacency_from_edges, build_graphs, graph_export, read_edge_list,
                         write_edge_list)
from .models import SageConfig, SageForecaster, sage_train
from .signals import (CATEGORIES, CTIS_CATEGORIES, Panel, SplitSpec, load_categories, load_panel, normalize,
                      planted_coupling_spec, resample_weekly, rolling_windows, synth_panel, write_categories,
                      write_panel)
from .similarity import ShapeletDictionary, similarity_matrix

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# configuration

# Every accepted key with its default (as written in a config file) and a
# one-line description. Unknown sections or keys are rejected.
CONFIG_SCHEMA: dict[str, dict[str, tuple[str, str]]] = {
    "data": {
        "schema": ("auto", "input layout for ingest: auto, wide or long"),
        "normalization": ("full_series", "min-max fit: full_series or train_only"),
        "normalization_tau": ("", "split used by train_only normalization (empty: n_weeks - 4)"),
        "pooled": ("false", "share one min/max per signal across states"),
        "weekly": ("false", "resample a daily input to weekly means before normalizing"),
    },
    "synth": {
        "n_states": ("5", "number of synthetic states"),
        "n_signals": ("8", "number of synthetic signals (26 uses the survey signal names)"),
        "n_weeks": ("80", "number of weekly periods"),
        "noise": ("0.05", "observation noise standard deviation"),
        "n_drivers": ("", "root drivers per state (empty: n_signals // 4)"),
        "gain": ("1.0", "coupling gain of planted relations"),
    },
    "similarity": {
        "measure": ("lagged", "similarity measure for the similarity command: lagged or dtw_s"),
        "w": ("4", "shapelet window length"),
        "max_lag": ("4", "largest lead tried by lagged correlation"),
        "band": ("", "Sakoe-Chiba band for DTW (empty: unconstrained)"),
    },
    "graph": {
        "strategy": ("lagged", "graph strategy: " + ", ".join(STRATEGIES)),
        "k": ("5", "in-neighbours per signal for top-k graphs"),
        "k_avg": ("5", "expected in-degree of random graphs"),
        "seed": ("0", "seed for random graphs and model initialization"),
    },
    "model": {
        "layers": ("2", "GraphSAGE layers"),
        "hidden": ("64", "hidden width"),
        "epochs": ("300", "full-batch Adam epochs"),
        "lr": ("0.001", "Adam learning rate"),
        "loss": ("mae", "training loss: mae or mse"),
        "aggregator_weighted": ("false", "scale neighbour contributions by edge weights"),
        "tau_start": ("", "training split for train/explain/build-graph (empty: n_weeks - 4)"),
    },
    "eval": {
        "tau_first": ("20", "first rolling-origin split"),
        "tau_step": ("1", "distance between consecutive splits"),
        "tau_last": ("", "last split (empty: n_weeks - 4)"),
        "seeds": ("0,1,2,3,4", "comma-separated seeds for stochastic models"),
        "models": ("all", "comma-separated model names, or all"),
    },
    "explain": {
        "beta": ("0.01", "cost per removed edge, in MAE units"),
        "budget": ("500", "mask optimization iterations"),
        "lr": ("0.05", "mask learning rate"),
        "direction": ("below", "constraint side: below or above the random-graph MAE"),
        "estimator": ("sampled", "mask gradient estimator: relaxed, straight_through or sampled"),
        "windows": ("4", "number of most recent training windows explained"),
        "random_models": ("5", "random-graph models averaged for the threshold"),
        "signals": ("all", "comma-separated target signals, or all"),
        "top_n": ("3", "edges flagged important in the exported subgraph"),
    },
}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class Config:
    values: dict[str, dict[str, str]] = field(default_factory=lambda: {
        sec: {k: v[0] for k, v in keys.items()} for sec, keys in CONFIG_SCHEMA.items()})

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def _typed(self, section: str, key: str, cast: Callable):
        raw = self.get(section, key)
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({exc})", f"{section}.{key}") from None

    def int(self, section: str, key: str) -> int:
        return self._typed(section, key, int)

    def float(self, section: str, key: str) -> float:
        return self._typed(section, key, float)

    def optional_int(self, section: str, key: str) -> int | None:
        return None if self.get(section, key).strip() == "" else self.int(section, key)

    def bool(self, section: str, key: str) -> bool:
        raw = self.get(section, key).strip().lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key}: expected a boolean, got {raw!r}", f"{section}.{key}")

    def list(self, section: str, key: str) -> list[str]:
        return [p.strip() for p in self.get(section, key).split(",") if p.strip()]

    def set(self, section: str, key: str, value) -> None:
        if section not in CONFIG_SCHEMA or key not in CONFIG_SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}", f"{section}.{key}")
        self.values[section][key] = str(value)

    def serialize(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for sec in CONFIG_SCHEMA:
            parser[sec] = dict(sorted(self.values[sec].items()))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def validate(self) -> None:
        """Type-check every key so errors surface before any work starts."""
        for key in ("schema",):
            if self.get("data", key) not in ("auto", "wide", "long"):
                raise ConfigError(f"data.{key} must be auto, wide or long", f"data.{key}")
        if self.get("data", "normalization") not in ("full_series", "train_only"):
            raise ConfigError("data.normalization must be full_series or train_only", "data.normalization")
        self.bool("data", "pooled")
        self.bool("data", "weekly")
        self.optional_int("data", "normalization_tau")
        for key in ("n_states", "n_signals", "n_weeks"):
            self.int("synth", key)
        self.float("synth", "noise")
        self.float("synth", "gain")
        self.optional_int("synth", "n_drivers")
        if self.get("similarity", "measure") not in ("lagged", "dtw_s"):
            raise ConfigError("similarity.measure must be lagged or dtw_s", "similarity.measure")
        self.int("similarity", "w")
        self.int("similarity", "max_lag")
        self.optional_int("similarity", "band")
        if self.get("graph", "strategy") not in STRATEGIES:
            raise ConfigError(f"graph.strategy must be one of {STRATEGIES}", "graph.strategy")
        self.int("graph", "k")
        self.float("graph", "k_avg")
        self.int("graph", "seed")
        try:
            self.sage()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"model: {exc}", "model") from None
        self.optional_int("model", "tau_start")
        for key in ("tau_first", "tau_step"):
            self.int("eval", key)
        self.optional_int("eval", "tau_last")
        self.seeds()
        self.float("explain", "beta")
        self.int("explain", "budget")
        self.float("explain", "lr")
        if self.get("explain", "direction") not in ("below", "above"):
            raise ConfigError("explain.direction must be below or above", "explain.direction")
        if self.get("explain", "estimator") not in ("relaxed", "straight_through", "sampled"):
            raise ConfigError("explain.estimator must be relaxed, straight_through or sampled", "explain.estimator")
        for key in ("windows", "random_models", "top_n"):
            self.int("explain", key)

    def sage(self) -> SageConfig:
        loss = self.get("model", "loss")
        if loss not in ("mae", "mse"):
            raise ConfigError("model.loss must be mae or mse", "model.loss")
        return SageConfig(layers=self.int("model", "layers"), hidden=self.int("model", "hidden"),
                          epochs=self.int("model", "epochs"), lr=self.float("model", "lr"), loss=loss,
                          aggregator_weighted=self.bool("model", "aggregator_weighted"))

    def seeds(self) -> tuple[int, ...]:
        try:
            seeds = tuple(int(s) for s in self.list("eval", "seeds"))
        except ValueError:
            raise ConfigError(f"eval.seeds: expected comma-separated integers, got {self.get('eval', 'seeds')!r}",
                              "eval.seeds") from None
        if not seeds:
            raise ConfigError("eval.seeds is empty", "eval.seeds")
        return seeds


def parse_config(text: str = "", source: str = "<config>") -> Config:
    """Parse INI text on top of the documented defaults, rejecting unknown names."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = Config()
    for sec in parser.sections():
        if sec not in CONFIG_SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]", sec)
        for key, value in parser[sec].items():
            if key not in CONFIG_SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]", f"{sec}.{key}")
            cfg.values[sec][key] = value
    cfg.validate()
    return cfg


def load_config(path: str | None) -> Config:
    if path is None:
        return parse_config("")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def describe_config() -> str:
    """A commented default config listing every key."""
    lines = []
    for sec, keys in CONFIG_SCHEMA.items():
        lines.append(f"[{sec}]")
        for key, (default, doc) in keys.items():
            lines.append(f"# {doc}")
            lines.append(f"{key} = {default}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run directories and manifests


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: str
    seeds: dict
    tool_version: str
    inputs: dict[str, str]
    arguments: dict
    started: str = ""
    finished: str = ""
    outputs: dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def verify_inputs(self) -> list[str]:
        """Input paths whose current contents no longer match the recorded digest."""
        return [p for p, d in self.inputs.items() if not Path(p).is_file() or file_digest(p) != d]


class Run:
    """Content-addressed output directory for one command invocation."""

    def __init__(self, command: str, cfg: Config, out: Path, inputs: dict[str, Path | None], arguments: dict,
                 seeds: dict):
        self.inputs = {name: p for name, p in inputs.items() if p is not None}
        for name, p in self.inputs.items():
            if not Path(p).is_file():
                raise FileNotFoundError(f"--{name.replace('_', '-')}: file not found: {p}")
        digests = {str(p): file_digest(p) for p in self.inputs.values()}
        key = json.dumps({"command": command, "config": cfg.serialize(), "arguments": arguments,
                          "inputs": sorted(digests.values()), "seeds": seeds}, sort_keys=True)
        self.dir = Path(out) / f"{command}-{hashlib.sha256(key.encode()).hexdigest()[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, cfg.serialize(), seeds, __version__, digests, arguments,
                                    started=_now())

    def path(self, name: str) -> Path:
        return self.dir / name

    def finish(self, outputs: Sequence[Path], summary: dict) -> dict:
        self.manifest.outputs = {str(p): file_digest(p) for p in outputs}
        self.manifest.summary = summary
        self.manifest.finished = _now()
        self.manifest.write(self.dir / "manifest.json")
        return {"command": self.manifest.command, "run_dir": str(self.dir), **summary}


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# shared loaders


def _load_panel_artifact(path: Path, categories_path: Path | None) -> Panel:
    """Read a panel CSV written by ``ingest`` or ``synth`` with its category map."""
    categories_path = categories_path or path.with_name("categories.csv")
    cats = load_categories(categories_path) if categories_path.is_file() else None
    return load_panel(path, categories=cats)


def _split(cfg: Config, panel: Panel, override: int | None) -> SplitSpec:
    tau = override if override is not None else cfg.optional_int("model", "tau_start")
    return SplitSpec(panel.n_weeks - 4 if tau is None else tau)


def _seed(cfg: Config, args) -> int:
    return args.seed if args.seed is not None else cfg.int("graph", "seed")


def _categories_for(panel: Panel) -> dict[str, str]:
    if panel.categories:
        return dict(panel.categories)
    return {sig: CATEGORIES[b % len(CATEGORIES)] for b, sig in enumerate(panel.signals)}


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg: Config) -> dict:
    run = Run("ingest", cfg, args.out, {"input": args.input, "categories": args.categories},
              {"input": str(args.input)}, {})
    cats = load_categories(args.categories) if args.categories else None
    panel = load_panel(args.input, schema=cfg.get("data", "schema"), categories=cats)
    if cfg.bool("data", "weekly") and panel.freq == "daily":
        panel = resample_weekly(panel)
    mode = cfg.get("data", "normalization")
    split = None
    if mode == "train_only":
        tau = cfg.optional_int("data", "normalization_tau")
        split = SplitSpec(panel.n_weeks - 4 if tau is None else tau)
    panel, params = normalize(panel, mode=mode, split=split, pooled=cfg.bool("data", "pooled"))
    outs = [run.path("panel.csv"), run.path("normalization.csv"), run.path("categories.csv")]
    write_panel(panel, outs[0])
    params.write(outs[1])
    write_categories(_categories_for(panel), outs[2])
    return run.finish(outs, {"states": panel.n_states, "signals": panel.n_signals, "weeks": panel.n_weeks})


def cmd_synth(args, cfg: Config) -> dict:
    seed = _seed(cfg, args)
    run = Run("synth", cfg, args.out, {}, {}, {"synth": seed})
    G = cfg.int("synth", "n_signals")
    names = tuple(CTIS_CATEGORIES) if G == len(CTIS_CATEGORIES) else None
    spec = planted_coupling_spec(n_states=cfg.int("synth", "n_states"), n_signals=G,
                                 n_weeks=cfg.int("synth", "n_weeks"), noise=cfg.float("synth", "noise"),
                                 n_drivers=cfg.optional_int("synth", "n_drivers"), gain=cfg.float("synth", "gain"),
                                 seed=seed)
    panel, planted = synth_panel(spec, seed=seed, signal_names=names)
    cats = dict(CTIS_CATEGORIES) if names else _categories_for(panel)
    outs = [run.path("panel.csv"), run.path("categories.csv"), run.path("planted_edges.csv")]
    write_panel(panel, outs[0])
    write_categories(cats, outs[1])
    with open(outs[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "src", "dst", "lag", "gain"])
        w.writerows([st, s, d, lag, repr(float(g))] for st, s, d, lag, g in planted)
    return run.finish(outs, {"states": panel.n_states, "signals": panel.n_signals, "weeks": panel.n_weeks,
                             "planted_edges": len(planted)})


def _similarities(panel: Panel, cfg: Config, measure: str, split: SplitSpec | None) -> dict:
    shapelets = ShapeletDictionary.default(cfg.int("similarity", "w"))
    return {st: similarity_matrix(panel, st, measure, split, max_lag=cfg.int("similarity", "max_lag"),
                                  shapelets=shapelets, band=cfg.optional_int("similarity", "band"))
            for st in panel.states}


def cmd_similarity(args, cfg: Config) -> dict:
    measure = args.measure or cfg.get("similarity", "measure")
    run = Run("similarity", cfg, args.out, {"panel": args.panel}, {"measure": measure, "tau": args.tau}, {})
    panel = _load_panel_artifact(args.panel, None)
    split = _split(cfg, panel, args.tau)
    sims = _similarities(panel, cfg, measure, split)
    outs = []
    for st, sim in sims.items():
        p = run.path(f"similarity_{st}.csv")
        sim.write(p)
        outs += [p, p.with_suffix(".meta.json")]
    return run.finish(outs, {"measure": measure, "states": len(sims), "train_weeks": split.tau_start})


def cmd_build_graph(args, cfg: Config) -> dict:
    strategy = args.strategy or cfg.get("graph", "strategy")
    k = args.k if args.k is not None else cfg.int("graph", "k")
    seed = _seed(cfg, args)
    run = Run("build-graph", cfg, args.out, {"panel": args.panel},
              {"strategy": strategy, "k": k, "tau": args.tau}, {"graph": seed})
    panel = _load_panel_artifact(args.panel, None)
    split = _split(cfg, panel, args.tau)
    sims = _similarities(panel.truncate(split.tau_start), cfg, strategy, split) \
        if strategy in ("lagged", "dtw_s") else None
    adj = build_graphs(panel, strategy, k=k, k_avg=cfg.float("graph", "k_avg"), seed=seed, split=split,
                       max_lag=cfg.int("similarity", "max_lag"), similarities=sims)
    outs = [run.path("edges.csv")]
    write_edge_list(adj.edge_list(), outs[0])
    outs += list(graph_export(adj, _categories_for(panel)).write(run.path("graph")))
    per_state = {g.state: g.n_edges for g in adj.graphs}
    return run.finish(outs, {"strategy": strategy, "edges": adj.n_edges, "edges_per_state": per_state})


def _load_graph(path: Path, panel: Panel):
    return adjacency_from_edges(read_edge_list(path), panel.states, panel.signals)


def cmd_train(args, cfg: Config) -> dict:
    seed = _seed(cfg, args)
    run = Run("train", cfg, args.out, {"panel": args.panel, "edges": args.edges}, {"tau": args.tau},
              {"init": seed})
    panel = _load_panel_artifact(args.panel, None)
    adj = _load_graph(args.edges, panel)
    split = _split(cfg, panel, args.tau)
    model = SageForecaster.init(cfg.sage(), seed)
    result = sage_train(model, panel, adj, split)
    outs = [run.path("model.json"), run.path("loss_trace.csv")]
    model.save(outs[0])
    with open(outs[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerows([i, repr(float(v))] for i, v in enumerate(result.loss_trace))
    final = float(result.loss_trace[-1]) if len(result.loss_trace) else None
    return run.finish(outs, {"tau_start": split.tau_start, "epochs": len(result.loss_trace), "final_loss": final})


def _experiment(cfg: Config, panel: Panel) -> ExperimentConfig:
    models = default_models(cfg.sage(), k=cfg.int("graph", "k"), k_avg=cfg.float("graph", "k_avg"))
    wanted = cfg.list("eval", "models")
    if wanted != ["all"]:
        by_name = {m.name: m for m in models}
        unknown = [w for w in wanted if w not in by_name]
        if unknown:
            raise ConfigError(f"eval.models: unknown model(s) {unknown}; known {sorted(by_name)}", "eval.models")
        models = [by_name[w] for w in wanted]
    last = cfg.optional_int("eval", "tau_last")
    taus = [t for t in default_tau_schedule(panel.n_weeks, cfg.int("eval", "tau_first"), cfg.int("eval", "tau_step"))
            if last is None or t <= last]
    return ExperimentConfig(tuple(models), tuple(taus), cfg.seeds(), cfg.int("similarity", "max_lag"),
                            cfg.int("similarity", "w"))


def cmd_evaluate(args, cfg: Config) -> dict:
    run = Run("evaluate", cfg, args.out, {"panel": args.panel}, {}, {"eval": list(cfg.seeds())})
    panel = _load_panel_artifact(args.panel, None)
    exp = _experiment(cfg, panel)
    records = run_experiment(panel, exp)
    outs = [run.path("records.csv")]
    export_records(records, outs[0])
    return run.finish(outs, {"models": [m.name for m in exp.models], "splits": len(exp.tau_starts),
                             "records": len(records)})


def cmd_report(args, cfg: Config) -> dict:
    run = Run("report", cfg, args.out, {"records": args.records, "categories": args.categories},
              {"format": args.format}, {})
    records = read_records(args.records)
    cats = load_categories(args.categories or Path(args.records).with_name("categories.csv"))
    table = aggregate(records, cats)
    md, tab = run.path("table.md"), run.path("table.csv")
    md.write_text(render_table(table, "markdown") + "\n", encoding="utf-8")
    tab.write_text(render_table(table, "csv"), encoding="utf-8")
    if not args.quiet:
        print(render_table(table, args.format), file=sys.stderr)
    return run.finish([md, tab], {"models": list(table.models)})


def cmd_explain(args, cfg: Config) -> dict:
    seed = _seed(cfg, args)
    n_random = cfg.int("explain", "random_models")
    run = Run("explain", cfg, args.out, {"panel": args.panel, "edges": args.edges, "model": args.model},
              {"tau": args.tau, "signal": args.signal}, {"random": list(range(seed, seed + n_random))})
    panel = _load_panel_artifact(args.panel, None)
    adj = _load_graph(args.edges, panel)
    model = SageForecaster.load(args.model)
    split = _split(cfg, panel, args.tau)
    windows = rolling_windows(panel, 0, split.tau_start)[-cfg.int("explain", "windows"):]
    if not windows:
        raise ValueError(f"no complete windows before tau_start={split.tau_start}")
    random_models = []
    for r in range(seed, seed + n_random):
        radj = build_graphs(panel, "random", k_avg=cfg.float("graph", "k_avg"), seed=r)
        rm = SageForecaster.init(model.config, r)
        sage_train(rm, panel, radj, split)
        random_models.append((rm, radj))
    thresholds = random_graph_thresholds(random_models, windows)
    wanted = cfg.list("explain", "signals")
    signals = list(panel.signals) if wanted == ["all"] else wanted
    unknown = [s for s in signals if s not in panel.signals]
    if unknown:
        raise ConfigError(f"explain.signals: unknown signal(s) {unknown}", "explain.signals")
    imp = importance_scan([model], adj, panel, windows, thresholds, signals=signals,
                          beta=cfg.float("explain", "beta"), budget=cfg.int("explain", "budget"),
                          lr=cfg.float("explain", "lr"), direction=cfg.get("explain", "direction"),
                          estimator=cfg.get("explain", "estimator"), seed=seed)
    outs = [run.path("importance.csv")]
    imp.write(outs[0])
    focus = args.signal or signals[0]
    sub = export_explained_subgraph(imp, adj, focus, cfg.int("explain", "top_n"), _categories_for(panel))
    outs += list(sub.write(run.path(f"explained_{focus}")))
    top = [[s, d, c] for (s, d), c, _ in imp.ranking(focus)[:cfg.int("explain", "top_n")]]
    return run.finish(outs, {"runs": sum(imp.runs_per_state.values()), "skipped": len(imp.skipped),
                             "focus": focus, "top_edges": top})


# ---------------------------------------------------------------------------
# entry point


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": Path("runs"), "verbose": False}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand's unset flag from clobbering the same flag
    # given before the subcommand name; defaults are filled in by main()
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="INI config file (see `panelgraph config` for every key)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides [graph] seed")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS,
                        help="base directory for run outputs (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="panelgraph", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"panelgraph {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="load, resample and normalize a CSV panel")
    s.add_argument("--input", type=Path, required=True)
    s.add_argument("--categories", type=Path)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", parents=[common], help="generate a panel with planted couplings")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("similarity", parents=[common], help="per-state similarity matrices")
    s.add_argument("--panel", type=Path, required=True)
    s.add_argument("--measure", choices=("lagged", "dtw_s"))
    s.add_argument("--tau", type=int)
    s.set_defaults(func=cmd_similarity)

    s = sub.add_parser("build-graph", parents=[common], help="per-state signal graphs")
    s.add_argument("--panel", type=Path, required=True)
    s.add_argument("--strategy", choices=STRATEGIES)
    s.add_argument("--k", type=int)
    s.add_argument("--tau", type=int)
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("train", parents=[common], help="train a GraphSAGE forecaster")
    s.add_argument("--panel", type=Path, required=True)
    s.add_argument("--edges", type=Path, required=True)
    s.add_argument("--tau", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="rolling-origin backtest of the configured models")
    s.add_argument("--panel", type=Path, required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("explain", parents=[common], help="counterfactual edge importance")
    s.add_argument("--panel", type=Path, required=True)
    s.add_argument("--edges", type=Path, required=True)
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--tau", type=int)
    s.add_argument("--signal", help="focus signal for the exported subgraph")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("report", parents=[common], help="render the MAE table from records")
    s.add_argument("--records", type=Path, required=True)
    s.add_argument("--categories", type=Path)
    s.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    s.add_argument("--quiet", action="store_true", help="do not echo the table")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("config", parents=[common], help="print the default config with documentation")
    s.set_defaults(func=None)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "config":
        print(describe_config(), end="")
        return 0
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.set("graph", "seed", args.seed)
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            summary = args.func(args, cfg)
    except Exception as exc:  # reported as a JSON object, never a bare traceback
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if isinstance(exc, ConfigError) and exc.key:
            err["key"] = exc.key
        if isinstance(exc, FileNotFoundError):
            err["path"] = str(exc.filename or "") or str(exc).rsplit(": ", 1)[-1]
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        if args.verbose:
            logger.exception("command failed")
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
