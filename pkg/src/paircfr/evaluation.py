"""Accuracy evaluation, multi-seed experiments, sweeps and weight diagnostics."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ._rng import make_rng
from .closed_form import block_mass, reference_direction
from .datasets import BlockLayout, PairedDataset
from .feature_model import FeatureModelSpec, generate_ood, generate_paircad
from .stats import DegenerateTestError, paired_ttest
from .text_ingest import CadSchema, HashFeaturizer, build_text_dataset, parse_cad_table
from .trainer import LinearModel, TrainConfig, TrainHistory, forward, init_model, train

log = logging.getLogger(__name__)

DEFAULT_OOD = ("spurious_flip", "spurious_null", "edited_null")


def evaluate(model: LinearModel, dataset: PairedDataset) -> float:
    """Argmax accuracy; ties go to the lowest class id."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _, logits = forward(model, dataset.x)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def weight_diagnostics(model: LinearModel, layout: BlockLayout, spec: FeatureModelSpec | None = None) -> dict[str, Any]:
    """Block masses of the feature-space classifier ``W U``.

    For two classes this is the discriminant ``W (U[:, 1] - U[:, 0])``; with
    more classes the class-centred map ``W (U - mean_k U)`` is used and each
    block mass is the Frobenius norm of its rows.
    """
    if model.W.shape[0] != layout.m:
        raise ValueError(f"layout m={layout.m} does not match model input {model.W.shape[0]}")
    K = model.U.shape[1]
    if K == 2:
        direction = model.discriminant()
        masses = block_mass(direction, layout)
    else:
        eff = model.W @ (model.U - model.U.mean(axis=1, keepdims=True))
        direction = None
        masses = tuple(float(np.linalg.norm(eff[sl])) for sl in layout.slices().values())
    total = float(np.sqrt(sum(v * v for v in masses)))
    out: dict[str, Any] = {
        "mass_r1": masses[0],
        "mass_r2": masses[1],
        "mass_s": masses[2],
        "r1_fraction": masses[0] / total if total else 0.0,
    }
    if spec is not None and direction is not None:
        sl = layout.slices()["r1"]
        ref = reference_direction(spec)[sl]
        a = direction[sl]
        na, nr = np.linalg.norm(a), np.linalg.norm(ref)
        out["cosine_r1"] = float(a @ ref / (na * nr)) if na and nr else 0.0
    return out


# -- experiment configuration ------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    d: int = 4
    init: str = "normal"
    sigma_init: float = 0.1
    identity_encoder: bool = False
    head_bias: bool = False


@dataclass(frozen=True)
class SyntheticSource:
    spec: FeatureModelSpec
    n_pairs: int = 500
    cfes_per_original: int = 1
    edit_mode: str = "exact_opposite"
    train_on: str = "cad"  # or "originals"


@dataclass(frozen=True)
class TextSource:
    path: str
    schema: CadSchema = field(default_factory=CadSchema)
    featurizer: HashFeaturizer = field(default_factory=HashFeaturizer)
    ood_paths: tuple[str, ...] = ()
    train_on: str = "cad"


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticSource | TextSource
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    ood: tuple[str, ...] = DEFAULT_OOD
    n_ood: int = 2000
    seeds: tuple[int, ...] = (0,)
    name: str = ""

    def __post_init__(self):
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must be three positive numbers summing to 1, got {self.split}")
        if not self.seeds:
            raise ValueError("need at least one seed")


def split_groups(dataset: PairedDataset, ratios: Sequence[float], seed: int) -> tuple[PairedDataset, ...]:
    """Split by pair group, stratified on the original's label; groups never straddle splits."""
    rng = make_rng(seed, "split")
    bounds = np.cumsum(ratios)[:-1]
    parts: list[list[int]] = [[] for _ in ratios]
    by_label: dict[int, list[int]] = {}
    for pid, (o, _) in sorted(dataset.pair_index.items()):
        by_label.setdefault(int(dataset.labels[o]), []).append(pid)
    for label in sorted(by_label):
        pids = np.array(by_label[label])[rng.permutation(len(by_label[label]))]
        cuts = np.floor(bounds * len(pids) + 0.5).astype(int)
        for j, chunk in enumerate(np.split(pids, cuts)):
            parts[j].extend(int(p) for p in chunk)
    names = ("train", "valid", "test")
    return tuple(dataset.subset_groups(sorted(p), split=names[j]) for j, p in enumerate(parts))


def _n_classes(cfg: ExperimentConfig, dataset: PairedDataset) -> int:
    if isinstance(cfg.data, SyntheticSource):
        return cfg.data.spec.classes
    return max(max(cfg.data.schema.label_table.values()) + 1, dataset.n_classes)


def _text_dataset(src: TextSource, path: str) -> PairedDataset:
    return build_text_dataset(parse_cad_table(path, src.schema), src.featurizer, source=str(path))


@dataclass
class SeedResult:
    row: dict[str, Any]
    model: LinearModel
    history: TrainHistory


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """Generate or ingest data, split, train and evaluate one seed."""
    src = cfg.data
    if isinstance(src, SyntheticSource):
        full = generate_paircad(src.spec, src.n_pairs, src.cfes_per_original, src.edit_mode, seed)
    else:
        full = _text_dataset(src, src.path)
    tr, va, te = split_groups(full, cfg.split, seed)
    if src.train_on == "originals":
        tr, va, te = tr.originals_only(), va.originals_only(), te.originals_only()
    elif src.train_on != "cad":
        raise ValueError(f"train_on must be 'cad' or 'originals', got {src.train_on!r}")
    m = full.layout.m
    K = _n_classes(cfg, full)
    mc = cfg.model
    model = init_model(
        m, m if mc.identity_encoder else mc.d, K, mc.init, seed, mc.sigma_init, mc.identity_encoder, mc.head_bias, full.layout
    )
    best, hist = train(model, tr, va, replace(cfg.train, seed=seed))
    row: dict[str, Any] = {
        "seed": seed,
        "id_accuracy": evaluate(best, te),
        "valid_accuracy": hist.valid_accuracy[hist.best_epoch - 1] if hist.best_epoch else float("nan"),
        "valid_loss": hist.valid_loss[hist.best_epoch - 1] if hist.best_epoch else float("nan"),
        "stopping_epoch": hist.stopping_epoch,
    }
    if isinstance(src, SyntheticSource):
        for shift in cfg.ood:
            row[f"ood/{shift}"] = evaluate(best, generate_ood(src.spec, cfg.n_ood, shift, seed))
        row.update(weight_diagnostics(best, full.layout, src.spec if src.spec.classes == 2 else None))
    else:
        for p in src.ood_paths:
            row[f"ood/{Path(p).stem}"] = evaluate(best, _text_dataset(src, p))
    return SeedResult(row, best, hist)


@dataclass
class RunReport:
    name: str
    rows: list[dict[str, Any]]
    aggregates: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate(self.rows)

    @property
    def ok_rows(self) -> list[dict[str, Any]]:
        return [r for r in self.rows if "error" not in r]

    def metric(self, key: str) -> list[float]:
        return [float(r[key]) for r in self.ok_rows]

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "rows": self.rows, "aggregates": self.aggregates}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunReport":
        return cls(d.get("name", ""), list(d["rows"]), dict(d.get("aggregates", {})))


def aggregate(rows: Sequence[Mapping[str, Any]]) -> dict[str, dict[str, float]]:
    """Mean and sample standard deviation (n - 1 denominator) of every numeric metric."""
    ok = [r for r in rows if "error" not in r]
    keys = sorted({k for r in ok for k, v in r.items() if k != "seed" and isinstance(v, (int, float))})
    out = {}
    for k in keys:
        vals = np.array([float(r[k]) for r in ok if k in r])
        out[k] = {
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "n": int(vals.size),
        }
    return out


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    rows = []
    for seed in cfg.seeds:
        try:
            rows.append(run_seed(cfg, seed).row)
        except Exception as err:  # a failed seed is recorded, the others still run
            log.warning("seed %s failed: %s", seed, err)
            rows.append({"seed": seed, "error": f"{type(err).__name__}: {err}"})
    return RunReport(cfg.name, rows)


def compare(a: RunReport, b: RunReport, metric: str) -> dict[str, Any]:
    """Paired t-test of ``metric`` between two reports over their common seeds."""
    ra = {r["seed"]: r[metric] for r in a.ok_rows if metric in r}
    rb = {r["seed"]: r[metric] for r in b.ok_rows if metric in r}
    seeds = sorted(set(ra) & set(rb))
    try:
        res = paired_ttest([ra[s] for s in seeds], [rb[s] for s in seeds])
    except (DegenerateTestError, ValueError) as err:
        return {"metric": metric, "n": len(seeds), "error": str(err)}
    return {"metric": metric, "n": len(seeds), "t": res.t, "p": res.p, "mean_difference": res.mean_difference, "exact_tie": res.exact_tie}


# -- sweeps ------------------------------------------------------------------------

ALIASES = {
    "lam": "train.loss.lam",
    "lambda": "train.loss.lam",
    "tau": "train.loss.tau",
    "similarity": "train.loss.similarity",
    "neutral_excluded": "train.loss.neutral_excluded",
    "batch_size": "train.batch_size",
    "strategy": "train.strategy",
    "lr": "train.lr",
    "optimizer": "train.optimizer",
    "max_epochs": "train.max_epochs",
    "n_pairs": "data.n_pairs",
    "k": "data.cfes_per_original",
    "cfes_per_original": "data.cfes_per_original",
    "edit_mode": "data.edit_mode",
    "train_on": "data.train_on",
    "d": "model.d",
}


def override(obj, key: str, value):
    """``replace`` a nested dataclass field addressed by a dotted path (or an alias)."""
    return _replace_path(obj, ALIASES.get(key, key).split("."), value)


def _replace_path(obj, path: list[str], value):
    head, rest = path[0], path[1:]
    if not hasattr(obj, head):
        raise AttributeError(f"{type(obj).__name__} has no field {head!r}")
    if not rest:
        return replace(obj, **{head: value})
    return replace(obj, **{head: _replace_path(getattr(obj, head), rest, value)})


def _steps(lo: int, hi: int) -> list[float]:
    return [round(0.1 * i, 1) for i in range(lo, hi + 1)]


# Named grids.  ``lam_tau`` covers [0, 1] in steps of 0.1; lam = 1.0 is a
# diagnostic point only (the head gets no cross-entropy gradient there) and
# tau starts at 0.1 because a zero temperature is invalid.
DEFAULT_GRIDS: dict[str, dict[str, list]] = {
    "lam_tau": {"lam": _steps(0, 10), "tau": _steps(1, 10)},
    "lam": {"lam": _steps(0, 9)},
    "batch_size": {"batch_size": [4, 8, 16, 64, 256]},
    "few_shot": {"n_pairs": [16, 32, 64, 256, 512]},
    "cfe_ratio": {"k": [1, 2, 3, 4]},
}


def expand_grid(grid: Mapping[str, Sequence]) -> list[dict[str, Any]]:
    if not grid:
        raise ValueError("empty sweep grid")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass
class SweepReport:
    grid_keys: list[str]
    cells: list[tuple[dict[str, Any], RunReport]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "grid_keys": self.grid_keys,
            "cells": [{"params": p, "report": r.to_dict()} for p, r in self.cells],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SweepReport":
        return cls(list(d["grid_keys"]), [(dict(c["params"]), RunReport.from_dict(c["report"])) for c in d["cells"]])

    def metrics(self) -> list[str]:
        keys = set()
        for _, r in self.cells:
            keys.update(r.aggregates)
        return sorted(keys)

    def to_csv(self) -> str:
        metrics = self.metrics()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", *self.grid_keys, "seed", *metrics, "error"])
        for ci, (params, rep) in enumerate(self.cells):
            for r in rep.rows:
                w.writerow([ci, *(params[k] for k in self.grid_keys), r["seed"], *(_fmt(r.get(m)) for m in metrics), r.get("error", "")])
        for ci, (params, rep) in enumerate(self.cells):
            for stat in ("mean", "std"):
                vals = [_fmt(rep.aggregates.get(m, {}).get(stat)) for m in metrics]
                w.writerow([ci, *(params[k] for k in self.grid_keys), stat, *vals, ""])
        return buf.getvalue()

    def plot_data(self) -> str:
        """Long-format table (one line per cell and metric) for line plots."""
        lines = ["\t".join([*self.grid_keys, "metric", "mean", "std"])]
        for params, rep in self.cells:
            for m, agg in sorted(rep.aggregates.items()):
                lines.append("\t".join([*(str(params[k]) for k in self.grid_keys), m, _fmt(agg["mean"]), _fmt(agg["std"])]))
        return "\n".join(lines) + "\n"

    def pairwise_pvalues(self, metric: str) -> list[dict[str, Any]]:
        out = []
        for (i, (pa, ra)), (j, (pb, rb)) in itertools.combinations(enumerate(self.cells), 2):
            res = compare(ra, rb, metric)
            res.update({"cell_a": i, "cell_b": j})
            out.append(res)
        return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _run_cell(args) -> RunReport:
    base, params = args
    name = ",".join(f"{k}={v}" for k, v in params.items())
    try:
        cfg = base
        for k, v in params.items():
            cfg = override(cfg, k, v)
    except Exception as err:  # a misconfigured cell is recorded, the sweep goes on
        return RunReport(name, [{"seed": s, "error": f"{type(err).__name__}: {err}"} for s in base.seeds])
    return run_experiment(replace(cfg, name=name))


def sweep(base: ExperimentConfig, grid: Mapping[str, Sequence], threads: int = 1) -> SweepReport:
    """Run ``base`` at every point of the grid's cross product.

    Cells are independent (each derives its RNG streams from its own seeds),
    so running them in worker processes gives the same report as serially.
    """
    cells = expand_grid(grid)
    jobs = [(base, params) for params in cells]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(_run_cell, jobs))
    else:
        reports = [_run_cell(job) for job in jobs]
    return SweepReport(list(grid), list(zip(cells, reports)))


def save_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
