"""Command-line front end.

Every command takes ``--config`` (a YAML experiment file) and flags that
override it.  Exit codes: 0 success, 1 semantic error, 2 I/O error,
3 state cap exceeded.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
import tempfile
import warnings
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .ctmc import (
    CTMCBuildError,
    StateCapError,
    build_level_ctmc,
    evaluate_queries,
    parse_query_file,
    sweep,
)
from .decomp import (
    DecompositionError,
    EnvironmentStub,
    ModulePartition,
    classify_species,
    compare_traces,
    extract_module,
    fit_stub,
    format_classification,
    load_stubs,
    network_to_system,
    save_stubs,
)
from .model import Severity, SpeciesInfo, SpeciesRef, check_wellformed, has_errors
from .network import NetworkError, RateError, ReactionNetwork, derive_reactions
from .parser import ParseError, parse, parse_file, serialize
from .ssa import EnsembleTrace, derive_max_amounts, ensemble

EXIT_OK, EXIT_SEMANTIC, EXIT_IO, EXIT_CAP = 0, 1, 2, 3
OUTPUT_ENV = "PEPAMOD_OUTPUT"
ANALYSIS_BLOCKS = ("ssa", "ctmc", "sweep")


class ConfigError(Exception):
    pass


# --- config and manifest ----------------------------------------------------


class Config:
    """An experiment file with paths resolved against its directory."""

    def __init__(self, data: dict, path: Optional[Path] = None):
        self.data = data
        self.path = path
        self.base = path.parent if path else Path.cwd()
        blocks = [b for b in ANALYSIS_BLOCKS if b in data]
        if len(blocks) > 1:
            raise ConfigError("config has more than one analysis block: " + ", ".join(blocks))
        self.raw = path.read_bytes() if path else b""

    @classmethod
    def load(cls, path: Optional[str]) -> "Config":
        if path is None:
            return cls({})
        p = Path(path)
        with open(p, encoding="utf-8") as fh:
            try:
                data = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{p}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: expected a mapping")
        return cls(data, p)

    def block(self, name: str) -> dict:
        b = self.data.get(name) or {}
        if not isinstance(b, dict):
            raise ConfigError(f"'{name}' must be a mapping")
        return b

    def resolve(self, value: Optional[str]) -> Optional[Path]:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def stem(self) -> str:
        if self.path is not None:
            return self.path.stem
        model = self.data.get("model")
        return Path(model).stem if model else "run"


def pick(flag: Any, block: dict, key: str, default: Any = None) -> Any:
    """Flags win over the config block, which wins over the default."""
    if flag is not None:
        return flag
    return block.get(key, default)


def output_dir(args, cfg: Config) -> Path:
    if getattr(args, "output", None):
        out = Path(args.output)
    elif cfg.data.get("output"):
        out = cfg.resolve(cfg.data["output"])
    else:
        root = Path(os.environ.get(OUTPUT_ENV, "pepamod-out"))
        out = root / cfg.stem()
    out.mkdir(parents=True, exist_ok=True)
    return out


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: Config, args, outputs: Sequence[Path],
                   seeds: Sequence[int] = (), warnings_: Sequence[str] = (), **extra) -> Path:
    overrides = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",) and v is not None}
    config_hash = hashlib.sha256(cfg.raw + json.dumps(overrides, sort_keys=True, default=str).encode()).hexdigest()
    manifest = {
        "tool": "pepamod",
        "version": __version__,
        "command": command,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config": str(cfg.path) if cfg.path else None,
        "config_hash": config_hash,
        "seeds": [int(s) for s in seeds],
        "outputs": {p.name: sha256(p) for p in outputs},
        "warnings": list(warnings_),
        **extra,
    }
    target = out / "manifest.json"
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".manifest-", suffix=".json")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=False)
        fh.write("\n")
    os.replace(tmp, target)
    return target


def read_manifest(path: Path) -> dict:
    if path.is_dir():
        path = path / "manifest.json"
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --- shared helpers ---------------------------------------------------------


def load_model(path: Path) -> ReactionNetwork:
    system = parse_file(path)
    diags = check_wellformed(system)
    if has_errors(diags):
        raise NetworkError("; ".join(d.message for d in diags if d.severity is Severity.ERROR))
    return derive_reactions(system)


def model_path(args, cfg: Config) -> Path:
    value = getattr(args, "model", None) or cfg.data.get("model")
    if value is None:
        raise ConfigError("no model given (use --model or 'model:' in the config)")
    return Path(args.model) if getattr(args, "model", None) else cfg.resolve(value)


def plot_series(path: Path, x: np.ndarray, series: dict[str, np.ndarray], title: str,
                xlabel: str = "time", ylabel: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "pepamod"
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, y in series.items():
        ax.plot(x, y, label=label)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_rows(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else f"{v:.17g}" for v in row) + "\n")
    return path


def _collect(caught) -> list[str]:
    return [str(w.message) for w in caught]


# --- commands ---------------------------------------------------------------


def cmd_validate(args) -> int:
    cfg = Config.load(args.config)
    path = Path(args.model) if args.model else model_path(args, cfg)
    text = path.read_text(encoding="utf-8")
    try:
        system = parse(text, str(path))
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC
    diags = check_wellformed(system)
    for d in diags:
        where = f"{d.span.file}:{d.span.line}:{d.span.column}: " if d.span else f"{path}: "
        print(f"{where}{d.severity.value}: {d.message}", file=sys.stderr)
    if has_errors(diags):
        return EXIT_SEMANTIC
    print(f"{path}: ok ({len(system.components)} species, {len(system.rates)} rates)")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = Config.load(args.config)
    block = cfg.block("ssa")
    net = load_model(model_path(args, cfg))
    runs = int(pick(args.runs, block, "runs", 100))
    t_end = float(pick(args.t_end, block, "t_end", 30.0))
    grid_step = pick(args.grid_step, block, "grid_step")
    seed = int(pick(args.seed, block, "seed", 0))
    workers = int(pick(args.workers, block, "workers", 1))
    out = output_dir(args, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        trace = ensemble(net, t_end, None if grid_step is None else float(grid_step), runs, seed,
                         workers=workers)
    notes = _collect(caught)
    if trace.stalled_runs:
        notes.append(f"{trace.stalled_runs} of {runs} runs stalled before t_end")
    means, variances = out / "means.csv", out / "variances.csv"
    trace.to_csv(means)
    trace.to_csv(variances, "variance")
    firing = write_rows(out / "firings.csv", ["reaction", "mean", "variance"],
                        [(a, m, v) for a, m, v in zip(trace.actions, trace.firing_mean, trace.firing_variance)])
    figure = plot_series(out / "means.svg", trace.times,
                         {str(s): trace.mean[:, i] for i, s in enumerate(trace.species)},
                         f"mean of {runs} runs", ylabel="amount")
    steps = {s: i.step_size for s, i in net.species_info.items()}
    maxima = derive_max_amounts(trace, steps) if steps else {}
    write_manifest(out, "simulate", cfg, args, [means, variances, firing, figure], trace.seeds, notes,
                   runs=runs, t_end=t_end, grid_points=len(trace.times),
                   derived_maxima={str(s): v for s, v in maxima.items()},
                   level_counts={str(s): int(round(v / steps[s])) for s, v in maxima.items()})
    for n in notes:
        print(f"warning: {n}", file=sys.stderr)
    print(f"wrote {means} ({len(trace.times)} points, {len(trace.species)} species)")
    return EXIT_OK


def _species_info(net: ReactionNetwork, block: dict, args, cfg: Config, horizon: float,
                  notes: list[str]) -> dict[SpeciesRef, SpeciesInfo]:
    info = dict(net.species_info)
    lacking = [s for s in net.species if s not in info]
    if lacking:
        raise ConfigError("no step size for " + ", ".join(map(str, lacking)))
    need = [s for s in net.species if info[s].max_amount is None]
    if not need:
        return info
    source = getattr(args, "maxima_from", None) or block.get("maxima_from")
    if source is not None:
        path = Path(source) if getattr(args, "maxima_from", None) else cfg.resolve(source)
        derived = {SpeciesRef.parse(k): float(v) for k, v in read_manifest(path).get("derived_maxima", {}).items()}
        missing = [str(s) for s in need if s not in derived]
        if missing:
            raise ConfigError(f"{path}: no derived maxima for " + ", ".join(missing))
        notes.append(f"maxima taken from {path}")
    else:
        derive = block.get("derive") or {}
        runs = int(derive.get("runs", 100))
        t_end = float(derive.get("t_end", horizon))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            trace = ensemble(net, t_end, derive.get("grid_step"), runs, int(derive.get("seed", 0)))
        notes.extend(_collect(caught))
        derived = derive_max_amounts(trace, {s: info[s].step_size for s in need})
        notes.append(f"maxima derived from {runs} runs up to t={t_end:g}")
    for s in need:
        info[s] = SpeciesInfo(s, info[s].step_size, derived[s])
    return info


def cmd_check(args) -> int:
    cfg = Config.load(args.config)
    is_sweep = "sweep" in cfg.data or args.parameter is not None
    block = cfg.block("sweep" if "sweep" in cfg.data else "ctmc")
    net = load_model(model_path(args, cfg))
    qpath = Path(args.queries) if args.queries else cfg.resolve(block.get("queries"))
    if qpath is None:
        raise ConfigError("no query file given")
    queries = parse_query_file(qpath)
    cap = int(pick(args.state_cap, block, "state_cap", 5_000_000))
    eps = float(block.get("eps", 1e-10))
    horizon = max((t for q in queries for t in q.times), default=0.0) or 1.0
    out = output_dir(args, cfg)
    notes: list[str] = []
    info = _species_info(net, block, args, cfg, horizon, notes)
    outputs: list[Path] = []
    extra: dict[str, Any] = {}
    try:
        if is_sweep:
            parameter = pick(args.parameter, block, "parameter")
            values = args.values if args.values is not None else block.get("values")
            if parameter is None or not values:
                raise ConfigError("a sweep needs a parameter and values")
            rows = []
            for q in queries:
                rows.extend((q.name, parameter, v, t, r) for v, t, r in sweep(net, parameter, values, q, info, cap, eps))
            outputs.append(write_rows(out / "sweep.csv", ["query", "parameter", "value", "time", "result"], rows))
            for q in queries:
                series = {}
                for v in values:
                    pts = [(t, r) for name, _, val, t, r in rows if name == q.name and val == float(v)]
                    series[f"{parameter}={v:g}"] = np.array([r for _, r in pts])
                times = np.array(q.times)
                outputs.append(plot_series(out / f"{q.name}.svg", times, series, q.name))
            extra.update(parameter=parameter, values=[float(v) for v in values])
        else:
            ctmc = build_level_ctmc(net, info, cap)
            rows = evaluate_queries(ctmc, queries, eps)
            outputs.append(write_rows(out / "results.csv", ["query", "time", "value"], rows))
            for q in queries:
                pts = [(t, v) for name, t, v in rows if name == q.name]
                outputs.append(plot_series(out / f"{q.name}.svg", np.array([t for t, _ in pts]),
                                           {q.name: np.array([v for _, v in pts])}, q.name))
            extra.update(states=ctmc.n_states, transitions=ctmc.n_transitions)
    except StateCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        write_manifest(out, "check", cfg, args, outputs, (), notes + [str(exc)], states_explored=exc.explored,
                       transitions_explored=exc.transitions, state_cap=exc.cap)
        return EXIT_CAP
    write_manifest(out, "check", cfg, args, outputs, (), notes,
                   level_counts={str(s): i.max_level for s, i in info.items()},
                   maxima={str(s): i.max_amount for s, i in info.items()}, **extra)
    print(f"wrote {outputs[0]}")
    return EXIT_OK


def _load_stubs(args, cfg: Config) -> dict[str, list[EnvironmentStub]]:
    value = args.stubs or cfg.data.get("stubs")
    if value is None:
        return {}
    return load_stubs(Path(args.stubs) if args.stubs else cfg.resolve(value))


def _partition(args, cfg: Config) -> ModulePartition:
    value = args.partition or cfg.data.get("partition")
    if value is None:
        raise ConfigError("no partition given")
    return ModulePartition.load(Path(args.partition) if args.partition else cfg.resolve(value))


def cmd_decompose(args) -> int:
    cfg = Config.load(args.config)
    block = cfg.block("decompose")
    net = load_model(model_path(args, cfg))
    partition = _partition(args, cfg)
    stubs = _load_stubs(args, cfg)
    modules = args.module or block.get("modules") or list(partition.modules)
    classes = classify_species(net, partition)
    out = output_dir(args, cfg)
    report = out / "classification.txt"
    report.write_text(format_classification(classes) + "\n", encoding="utf-8")
    rows = [(m, str(s), e.kind.value, ";".join(sorted(e.foreign_modules)))
            for m, table in classes.items() for s, e in table.items()]
    table = write_rows(out / "classification.csv", ["module", "species", "class", "foreign_modules"], rows)
    print(report.read_text(encoding="utf-8"), end="")
    outputs = [report, table]
    failures = []
    for m in modules:
        try:
            sub = extract_module(net, partition, m, stubs.get(m, []))
        except DecompositionError as exc:
            failures.append(str(exc))
            continue
        path = out / f"{m}.biopepa"
        path.write_text(serialize(network_to_system(sub)), encoding="utf-8")
        outputs.append(path)
    write_manifest(out, "decompose", cfg, args, outputs, (), failures, modules=list(modules))
    if failures:
        for f in failures:
            print(f"error: {f}", file=sys.stderr)
        return EXIT_SEMANTIC
    return EXIT_OK


def cmd_fit_env(args) -> int:
    cfg = Config.load(args.config)
    block = cfg.block("fit")
    species = pick(args.species, block, "species")
    if species is None:
        raise ConfigError("no species to fit")
    hint = pick(args.hint, block, "hint", "auto")
    window = args.window or block.get("window")
    quantile = pick(args.quantile, block, "quantile")
    module = pick(args.module, block, "module", "module")
    ref_value = args.reference or block.get("reference")
    out = output_dir(args, cfg)
    seeds: Sequence[int] = ()
    notes: list[str] = []
    if ref_value is not None:
        ref_path = Path(args.reference) if args.reference else cfg.resolve(ref_value)
        reference = EnsembleTrace.from_csv(ref_path)
    else:
        ssa = cfg.block("ssa") or block
        net = load_model(model_path(args, cfg))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            reference = ensemble(net, float(ssa.get("t_end", 30.0)), ssa.get("grid_step"),
                                 int(ssa.get("runs", 100)), int(ssa.get("seed", 0)))
        notes.extend(_collect(caught))
        seeds = reference.seeds
    stub = fit_stub(reference, species, hint, tuple(window) if window else None,
                    None if quantile is None else float(quantile))
    path = out / "stubs.yaml"
    save_stubs(path, {module: [stub]})
    write_manifest(out, "fit-env", cfg, args, [path], seeds, notes, stub=stub.to_dict())
    print(yaml.safe_dump({module: [stub.to_dict()]}, sort_keys=False), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = Config.load(args.config)
    block = cfg.block("compare")
    cand = args.candidate or block.get("candidate")
    ref = args.reference or block.get("reference")
    if cand is None or ref is None:
        raise ConfigError("compare needs a candidate and a reference trace")
    cand_path = Path(args.candidate) if args.candidate else cfg.resolve(cand)
    ref_path = Path(args.reference) if args.reference else cfg.resolve(ref)
    species = args.species or block.get("species")
    threshold = float(pick(args.threshold, block, "threshold", 0.10))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = compare_traces(EnsembleTrace.from_csv(cand_path), EnsembleTrace.from_csv(ref_path), species)
    for n in _collect(caught):
        print(f"warning: {n}", file=sys.stderr)
    print(result.table())
    verdict = result.passes(threshold)
    print(f"{'PASS' if verdict else 'FAIL'}: worst nrmse {result.worst_nrmse:.6g} vs threshold {threshold:g}")
    if args.output or cfg.data.get("output"):
        out = output_dir(args, cfg)
        rows = [(str(s), m.rmse, m.nrmse, m.max_abs, m.peak_shift) for s, m in result.metrics.items()]
        path = write_rows(out / "comparison.csv", ["species", "rmse", "nrmse", "max_abs", "peak_shift"], rows)
        write_manifest(out, "compare", cfg, args, [path], (), _collect(caught),
                       worst_nrmse=result.worst_nrmse, threshold=threshold, passed=verdict)
    if args.strict and not verdict:
        return EXIT_SEMANTIC
    return EXIT_OK


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pepamod", description="Bio-PEPA models: simulation, CTMC queries, decomposition.")
    p.add_argument("--version", action="version", version=f"pepamod {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model: bool = True):
        sp.add_argument("--config", help="YAML experiment file")
        sp.add_argument("--output", help=f"output directory (default ${OUTPUT_ENV}/<config name>)")
        if model:
            sp.add_argument("--model", help="model file, overrides the config")

    sp = sub.add_parser("validate", help="parse and check a model")
    sp.add_argument("model", nargs="?")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("simulate", help="SSA ensemble: means, variances, figure")
    common(sp)
    sp.add_argument("--runs", type=int)
    sp.add_argument("--t-end", type=float)
    sp.add_argument("--grid-step", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("check", help="build the level CTMC and evaluate queries")
    common(sp)
    sp.add_argument("--queries")
    sp.add_argument("--state-cap", type=int)
    sp.add_argument("--maxima-from", help="manifest (or run directory) of a simulate run")
    sp.add_argument("--parameter", help="sweep this parameter")
    sp.add_argument("--values", type=float, nargs="+")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("decompose", help="classify species and extract modules")
    common(sp)
    sp.add_argument("--partition")
    sp.add_argument("--stubs")
    sp.add_argument("--module", action="append", help="extract only this module (repeatable)")
    sp.set_defaults(func=cmd_decompose)

    sp = sub.add_parser("fit-env", help="fit an environment stub to a reference trace")
    common(sp)
    sp.add_argument("--reference", help="means CSV; without it the model is simulated")
    sp.add_argument("--species")
    sp.add_argument("--hint", choices=["auto", "creation", "fixed", "degradation"])
    sp.add_argument("--window", type=float, nargs=2, metavar=("T0", "T1"))
    sp.add_argument("--quantile", type=float)
    sp.add_argument("--module", help="module name to file the stub under")
    sp.set_defaults(func=cmd_fit_env)

    sp = sub.add_parser("compare", help="compare two means CSV files")
    common(sp, model=False)
    sp.add_argument("--candidate")
    sp.add_argument("--reference")
    sp.add_argument("--species", nargs="+")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--strict", action="store_true", help="exit 1 when the threshold is not met")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StateCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ParseError, NetworkError, RateError, CTMCBuildError, DecompositionError, ConfigError,
            KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_SEMANTIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
