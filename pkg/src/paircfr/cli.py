"""``paircfr`` command line.

Exit codes: 0 success, 1 invalid configuration or input, 2 failure while
running (including a failed theorem or gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    apply_overrides,
    dump_toml,
    experiment_from_tree,
    experiment_to_tree,
    load_toml,
    parse_assignment,
    parse_grid_item,
    seed_override,
)
from .datasets import write_tsv
from .evaluation import (
    DEFAULT_GRIDS,
    ExperimentConfig,
    RunReport,
    SweepReport,
    SyntheticSource,
    TextSource,
    run_seed,
    save_json,
    sweep,
)
from .feature_model import generate_ood, generate_paircad, validate_spec
from .text_ingest import build_text_dataset, parse_cad_table
from .theorems import THEOREMS, SuiteConfig, gradcheck, run_suite

log = logging.getLogger("paircfr")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class InvalidInput(Exception):
    """Raised while preparing a command; maps to exit code 1."""


class CheckFailed(Exception):
    """A verification finished but did not pass; maps to exit code 2."""


# -- shared plumbing -------------------------------------------------------------------


def _load_tree(args) -> dict[str, Any]:
    return load_toml(args.config) if args.config else {}


def _experiment(args, tree: dict[str, Any]) -> ExperimentConfig:
    tree = dict(tree)
    text = getattr(args, "text", None)
    if text:
        data = {k: v for k, v in tree.get("data", {}).items() if k in ("schema", "featurizer", "ood_paths", "train_on")}
        tree["data"] = {**data, "kind": "text", "path": str(Path(text).resolve())}
    assignments = dict(parse_assignment(s) for s in args.set if not s.startswith("theorems."))
    cfg = experiment_from_tree({k: v for k, v in tree.items() if k not in ("sweep", "theorems")})
    cfg = apply_overrides(cfg, assignments, seed_override(args.seed))
    if isinstance(cfg.data, SyntheticSource):
        problems = validate_spec(cfg.data.spec)
        if problems:
            raise ConfigError("invalid feature-model spec: " + "; ".join(problems))
    elif not Path(cfg.data.path).is_file():
        raise ConfigError(f"input file not found: {cfg.data.path}")
    return cfg


def _echo(out: Path, tree: dict[str, Any]) -> Path:
    return dump_toml(tree, out / "config.toml")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, argv: Sequence[str], status: str, extra: dict[str, Any] | None = None) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "argv": list(argv),
        "status": status,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands --------------------------------------------------------------------------
#
# Each command has a ``prepare`` step (validation, exit 1 on failure) that returns
# a ``run`` callable (execution, exit 2 on failure).


def prepare_generate(args) -> Callable[[Path], dict]:
    cfg = _experiment(args, _load_tree(args))
    if not isinstance(cfg.data, SyntheticSource):
        raise ConfigError("generate needs a synthetic [data] section")
    src = cfg.data
    seed = cfg.seeds[0]

    def run(out: Path) -> dict:
        _echo(out, experiment_to_tree(cfg))
        ds = generate_paircad(src.spec, src.n_pairs, src.cfes_per_original, src.edit_mode, seed)
        write_tsv(ds, out / "dataset.tsv")
        for shift in cfg.ood:
            write_tsv(generate_ood(src.spec, cfg.n_ood, shift, seed), out / f"ood_{shift}.tsv")
        print(f"wrote {len(ds)} samples ({ds.n_groups} groups) to {out / 'dataset.tsv'}")
        return {"dataset_hash": ds.content_hash()}

    return run


def prepare_ingest(args) -> Callable[[Path], dict]:
    tree = _load_tree(args)
    if not args.text and tree.get("data", {}).get("kind") != "text":
        raise ConfigError("ingest needs --input PATH or a [data] section with kind = 'text'")
    cfg = _experiment(args, tree)
    src = cfg.data
    records = parse_cad_table(src.path, src.schema)

    def run(out: Path) -> dict:
        _echo(out, experiment_to_tree(cfg))
        ds = build_text_dataset(records, src.featurizer, source=str(src.path))
        write_tsv(ds, out / "dataset.tsv")
        print(f"ingested {len(ds)} texts ({ds.n_groups} groups, m={ds.layout.m}) to {out / 'dataset.tsv'}")
        return {"dataset_hash": ds.content_hash()}

    return run


def prepare_train(args) -> Callable[[Path], dict]:
    cfg = _experiment(args, _load_tree(args))
    if isinstance(cfg.data, TextSource):
        parse_cad_table(cfg.data.path, cfg.data.schema)  # surface schema errors as invalid input

    def run(out: Path) -> dict:
        _echo(out, experiment_to_tree(cfg))
        rows = []
        for seed in cfg.seeds:
            res = run_seed(cfg, seed)
            rows.append(res.row)
            seed_dir = out / f"seed_{seed}"
            seed_dir.mkdir(exist_ok=True)
            save_json(res.history.to_dict(), seed_dir / "history.json")
            res.model.to_tsv(seed_dir / "model.tsv")
        report = RunReport(cfg.name or "train", rows)
        save_json(report.to_dict(), out / "report.json")
        for key in ("id_accuracy", *sorted(k for k in report.aggregates if k.startswith("ood/"))):
            agg = report.aggregates[key]
            print(f"{key}: {agg['mean']:.4f} +- {agg['std']:.4f} (n={agg['n']})")
        return {}

    return run


def prepare_sweep(args) -> Callable[[Path], dict]:
    tree = _load_tree(args)
    cfg = _experiment(args, tree)
    # grid flags replace the file's [sweep.grid] rather than adding axes to it
    grid: dict = {}
    for name in args.preset:
        if name not in DEFAULT_GRIDS:
            raise InvalidInput(f"unknown grid preset {name!r}; choose from {sorted(DEFAULT_GRIDS)}")
        grid.update(DEFAULT_GRIDS[name])
    grid.update(dict(parse_grid_item(g) for g in args.grid))
    if not grid:
        grid = {k: list(v) for k, v in tree.get("sweep", {}).get("grid", {}).items()}
    if not grid:
        raise ConfigError("empty sweep grid: give --grid KEY=V1,V2, --preset NAME or a [sweep.grid] table")
    threads = args.threads

    def run(out: Path) -> dict:
        _echo(out, {**experiment_to_tree(cfg), "sweep": {"grid": grid}})
        rep = sweep(cfg, grid, threads=threads)
        save_json(rep.to_dict(), out / "sweep.json")
        (out / "sweep.csv").write_text(rep.to_csv())
        (out / "plot_data.tsv").write_text(rep.plot_data())
        failed = sum(1 for _, r in rep.cells for row in r.rows if "error" in row)
        print(f"{len(rep.cells)} cells, {failed} failed seed runs; results in {out / 'sweep.csv'}")
        return {"cells": len(rep.cells), "failed_seed_runs": failed}

    return run


def _suite_config(args, tree: dict[str, Any]) -> SuiteConfig:
    values = dict(tree.get("theorems", {}))
    values.update({k.split(".", 1)[1]: v for k, v in (parse_assignment(s) for s in args.set) if k.startswith("theorems.")})
    known = {f.name for f in fields(SuiteConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown theorem-suite key(s) {unknown}; allowed {sorted(known)}")
    tau = values.pop("tau", tree.get("train", {}).get("loss", {}).get("tau", SuiteConfig.tau))
    seed = seed_override(args.seed)
    if seed is not None:
        values["seed"] = seed
    if getattr(args, "mc_tolerance", None) is not None:
        values["mc_z"] = args.mc_tolerance
    if getattr(args, "tolerance", None) is not None:
        values["fd_tol"] = args.tolerance
    if getattr(args, "instances", None) is not None:
        values["fd_instances"] = args.instances
    try:
        return SuiteConfig(tau=tau, **values)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def prepare_verify(args) -> Callable[[Path], dict]:
    suite = _suite_config(args, _load_tree(args))
    only = args.only or None
    if only:
        unknown = [n for n in only if n not in THEOREMS]
        if unknown:
            raise ConfigError(f"unknown theorem(s) {unknown}; available {list(THEOREMS)}")

    def run(out: Path) -> dict:
        _echo(out, {"theorems": asdict(suite)})
        rep = run_suite(suite, only)
        (out / "theorems.json").write_text(rep.to_json())
        (out / "theorems.txt").write_text(rep.table())
        print(rep.table(), end="")
        if not rep.passed:
            raise CheckFailed(f"theorem(s) failed: {', '.join(rep.failures)}")
        return {"theorems": len(rep.results)}

    return run


def prepare_gradcheck(args) -> Callable[[Path], dict]:
    suite = _suite_config(args, _load_tree(args))

    def run(out: Path) -> dict:
        _echo(out, {"theorems": asdict(suite)})
        errs = gradcheck(suite)
        result = {"max_rel_err": errs, "tolerance": suite.fd_tol, "instances": suite.fd_instances}
        save_json(result, out / "gradcheck.json")
        for name, err in errs.items():
            print(f"{name:22s} {err:.3e} {'PASS' if err <= suite.fd_tol else 'FAIL'}")
        bad = [n for n, e in errs.items() if e > suite.fd_tol]
        if bad:
            raise CheckFailed(f"gradient check failed for {', '.join(bad)}")
        return {}

    return run


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def _fmt_agg(agg: dict[str, float] | None) -> str:
    if not agg:
        return ""
    return f"{agg['mean']:.4f} ± {agg['std']:.4f}"


def render_reports(root: Path) -> tuple[str, dict[str, str]]:
    """Markdown summary and plot-data files for every stored report under ``root``."""
    runs = sorted(root.rglob("report.json"))
    sweeps = sorted(root.rglob("sweep.json"))
    suites = sorted(root.rglob("theorems.json"))
    if not (runs or sweeps or suites):
        raise FileNotFoundError(f"no reports found under {root}")
    parts = [f"# Reports under {root}\n"]
    plots: dict[str, str] = {}
    for path in runs:
        rep = RunReport.from_dict(json.loads(path.read_text()))
        rows = [(k, _fmt_agg(v), v["n"]) for k, v in sorted(rep.aggregates.items())]
        parts.append(f"## Run `{path.parent.relative_to(root) or '.'}` ({rep.name})\n")
        parts.append(_markdown_table(("metric", "mean ± std", "n"), rows))
    for path in sweeps:
        rep = SweepReport.from_dict(json.loads(path.read_text()))
        metrics = [m for m in ("id_accuracy", "ood/spurious_flip", "ood/spurious_null", "ood/edited_null") if m in rep.metrics()]
        metrics = metrics or rep.metrics()[:4]
        rows = [(*(p[k] for k in rep.grid_keys), *(_fmt_agg(r.aggregates.get(m)) for m in metrics)) for p, r in rep.cells]
        rel = path.parent.relative_to(root)
        parts.append(f"## Sweep `{rel or '.'}`\n")
        parts.append(_markdown_table((*rep.grid_keys, *metrics), rows))
        plots[f"plot_{'_'.join(rel.parts) or 'sweep'}.tsv"] = rep.plot_data()
    for path in suites:
        d = json.loads(path.read_text())
        rows = [(r["name"], "PASS" if r["passed"] else "FAIL", f"{r['seconds']:.2f}") for r in d["results"]]
        parts.append(f"## Theorem suite `{path.parent.relative_to(root) or '.'}`\n")
        parts.append(_markdown_table(("theorem", "status", "seconds"), rows))
    return "\n".join(parts), plots


def prepare_report(args) -> Callable[[Path], dict]:
    root = Path(args.reports_dir)
    if not root.is_dir():
        raise ConfigError(f"not a directory: {root}")
    try:
        markdown, plots = render_reports(root)
    except FileNotFoundError as err:
        raise InvalidInput(str(err)) from None

    def run(out: Path) -> dict:
        (out / "report.md").write_text(markdown)
        for name, text in plots.items():
            (out / name).write_text(text)
        print(markdown, end="")
        return {}

    return run


COMMANDS: dict[str, tuple[Callable, str]] = {
    "generate": (prepare_generate, "sample a synthetic CAD dataset and its OOD test sets"),
    "ingest": (prepare_ingest, "hash a CAD text file into a paired dataset"),
    "train": (prepare_train, "train and evaluate one configuration over its seeds"),
    "sweep": (prepare_sweep, "run a grid of configurations"),
    "verify-theorems": (prepare_verify, "run the closed-form and gradient verification suite"),
    "gradcheck": (prepare_gradcheck, "finite-difference check of every loss configuration"),
    "report": (prepare_report, "render stored JSON reports as markdown and plot data"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
    common.add_argument("--seed", type=int, default=None, help="first seed; overrides the config and $PAIRCFR_SEED")
    common.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value, e.g. lam=0.7 or train.lr=0.05")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="paircfr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("ingest", "train", "sweep"):
            p.add_argument("--input", "--text", dest="text", help="CAD text TSV (switches the data source to text)")
        if name == "sweep":
            p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2", help="grid axis; repeatable")
            p.add_argument("--preset", action="append", default=[], metavar="NAME", help=f"named grid, one of {sorted(DEFAULT_GRIDS)}; repeatable")
        if name in ("verify-theorems", "gradcheck"):
            p.add_argument("--tolerance", type=float, default=None, help="finite-difference relative error bound")
            p.add_argument("--instances", type=int, default=None, help="random instances per finite-difference case")
        if name == "verify-theorems":
            p.add_argument("--mc-tolerance", type=float, default=None, help="z-score bound of the Monte-Carlo checks")
            p.add_argument("--only", nargs="+", metavar="THEOREM", help=f"subset of {list(THEOREMS)}")
        if name == "report":
            p.add_argument("reports_dir", help="directory searched recursively for stored reports")
    return parser


_INVALID = (ConfigError, InvalidInput, FileNotFoundError, ValueError, KeyError)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    if args.out is None:
        args.out = args.reports_dir if args.command == "report" else f"runs/{args.command}"
    prepare = COMMANDS[args.command][0]
    try:
        run = prepare(args)
    except _INVALID as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    out = _out_dir(args)
    try:
        extra = run(out)
    except CheckFailed as err:
        print(f"FAILED: {err}", file=sys.stderr)
        _write_manifest(out, args.command, argv, "failed", {"failure": str(err)})
        return EXIT_FAILED
    except Exception as err:
        log.debug("execution failure", exc_info=True)
        print(f"error during {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        _write_manifest(out, args.command, argv, "error", {"failure": f"{type(err).__name__}: {err}"})
        return EXIT_FAILED
    _write_manifest(out, args.command, argv, "ok", extra)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
