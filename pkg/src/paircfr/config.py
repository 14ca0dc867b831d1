"""TOML experiment configuration: loading, overrides and the provenance echo.

Key tree (every key optional; defaults in brackets)::

    name = "run"                     # [""]
    seeds = [0, 1, 2]                # [[0]]
    split = [0.7, 0.1, 0.2]
    ood = ["spurious_flip", "spurious_null", "edited_null"]
    n_ood = 2000

    [data]
    kind = "synthetic"               # or "text"
    preset = "canonical"             # synthetic only; ignored when [data.spec] is given
    classes = 2                      # used with the preset
    n_pairs = 500
    cfes_per_original = 1
    edit_mode = "exact_opposite"     # or "resample"
    train_on = "cad"                 # or "originals"
    # text only:
    path = "cad.tsv"                 # relative paths resolve against the config file
    ood_paths = []

    [data.spec]                      # FeatureModelSpec.to_dict() layout
    layout = {dim_r1 = 2, dim_r2 = 2, dim_s = 2}
    mu_r1 = [1.0, 0.5]
    sigma_r1 = 1.0                   # scalar (times identity) or a full matrix

    [data.schema]                    # CadSchema fields (text only)
    [data.featurizer]                # HashFeaturizer fields (text only)

    [train]                          # TrainConfig fields
    [train.loss]                     # LossConfig fields
    [model]                          # ModelConfig fields
    [sweep.grid]                     # e.g. lam = [0.0, 0.5], batch_size = [8, 16]
    [theorems]                       # theorem-suite knobs, see ``theorems.SuiteConfig``

The echo written next to every run is the fully resolved tree (explicit spec
matrices, absolute paths), so loading it again reproduces the run.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Mapping

import tomli
import tomli_w

from .evaluation import DEFAULT_OOD, ExperimentConfig, ModelConfig, SyntheticSource, TextSource, override
from .feature_model import FeatureModelSpec, canonical_spec, validate_spec
from .losses import LossConfig
from .text_ingest import CadSchema, HashFeaturizer
from .trainer import TrainConfig

SEED_ENV = "PAIRCFR_SEED"
_TOP_KEYS = {"name", "seeds", "split", "ood", "n_ood", "data", "train", "model", "sweep", "theorems"}


class ConfigError(ValueError):
    pass


def load_toml(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            tree = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{path}: invalid TOML ({err})") from None
    _resolve_paths(tree, path.parent)
    return tree


def _resolve_paths(tree: dict, base: Path) -> None:
    data = tree.get("data", {})
    if "path" in data:
        data["path"] = str((base / data["path"]).resolve())
    if "ood_paths" in data:
        data["ood_paths"] = [str((base / p).resolve()) for p in data["ood_paths"]]


def _parse_scalar(text: str):
    """Parse a command-line value as a TOML value, falling back to a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_assignment(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"expected KEY=VALUE, got {item!r}")
    key, value = item.split("=", 1)
    return key.strip(), _parse_scalar(value.strip())


def parse_grid_item(item: str) -> tuple[str, list]:
    """``lam=0,0.5,1`` or ``lam=[0, 0.5, 1]`` -> ("lam", [0, 0.5, 1])."""
    key, value = item.split("=", 1) if "=" in item else (item, "")
    value = value.strip()
    if not value:
        raise ConfigError(f"grid entry {item!r} has no values")
    parsed = _parse_scalar(value if value.startswith("[") else f"[{value}]")
    if not isinstance(parsed, list):
        parsed = [_parse_scalar(v.strip()) for v in value.split(",")]
    return key.strip(), parsed


def seed_override(flag: int | None, environ: Mapping[str, str] | None = None) -> int | None:
    """The seed set on the command line, else by ``PAIRCFR_SEED``, else None."""
    if flag is not None:
        return flag
    raw = (os.environ if environ is None else environ).get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _spec_from_tree(data: Mapping[str, Any]) -> FeatureModelSpec:
    if "spec" in data:
        try:
            spec = FeatureModelSpec.from_dict(data["spec"])
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"invalid [data.spec]: {err}") from None
        problems = validate_spec(spec)
        if problems:
            raise ConfigError("invalid [data.spec]: " + "; ".join(problems))
        return spec
    preset = data.get("preset", "canonical")
    if preset != "canonical":
        raise ConfigError(f"unknown spec preset {preset!r}; only 'canonical' is built in")
    return canonical_spec(int(data.get("classes", 2)))


def _pick(cls, d: Mapping[str, Any], section: str) -> dict[str, Any]:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {unknown}; allowed {sorted(names)}")
    return dict(d)


def experiment_from_tree(tree: Mapping[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig from a (possibly partial) key tree."""
    tree = copy.deepcopy(dict(tree))
    unknown = sorted(set(tree) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    data = dict(tree.get("data", {}))
    kind = data.pop("kind", "synthetic")
    try:
        if kind == "synthetic":
            spec = _spec_from_tree(data)
            for k in ("spec", "preset", "classes"):
                data.pop(k, None)
            source = SyntheticSource(spec=spec, **_pick(SyntheticSource, data, "data"))
        elif kind == "text":
            if "path" not in data:
                raise ConfigError("[data] kind = 'text' needs a 'path'")
            schema = CadSchema.from_dict(_pick(CadSchema, data.pop("schema", {}), "data.schema"))
            feat = dict(data.pop("featurizer", {}))
            if "ngram_orders" in feat:
                feat["ngram_orders"] = tuple(feat["ngram_orders"])
            featurizer = HashFeaturizer(**_pick(HashFeaturizer, feat, "data.featurizer"))
            data["ood_paths"] = tuple(data.get("ood_paths", ()))
            source = TextSource(schema=schema, featurizer=featurizer, **_pick(TextSource, data, "data"))
        else:
            raise ConfigError(f"[data] kind must be 'synthetic' or 'text', got {kind!r}")
        train_tree = dict(tree.get("train", {}))
        loss_tree = _pick(LossConfig, train_tree.pop("loss", {}), "train.loss")
        train = TrainConfig.from_dict({**_pick(TrainConfig, train_tree, "train"), "loss": loss_tree})
        model = ModelConfig(**_pick(ModelConfig, tree.get("model", {}), "model"))
        return ExperimentConfig(
            data=source,
            train=train,
            model=model,
            split=tuple(tree.get("split", (0.7, 0.1, 0.2))),
            ood=tuple(tree.get("ood", DEFAULT_OOD)),
            n_ood=int(tree.get("n_ood", 2000)),
            seeds=tuple(int(s) for s in tree.get("seeds", (0,))),
            name=str(tree.get("name", "")),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def experiment_to_tree(cfg: ExperimentConfig) -> dict[str, Any]:
    """Fully resolved, TOML-serialisable key tree of ``cfg``."""
    src = cfg.data
    if isinstance(src, SyntheticSource):
        data: dict[str, Any] = {
            "kind": "synthetic",
            "n_pairs": src.n_pairs,
            "cfes_per_original": src.cfes_per_original,
            "edit_mode": src.edit_mode,
            "train_on": src.train_on,
            "spec": src.spec.to_dict(),
        }
    else:
        data = {
            "kind": "text",
            "path": str(src.path),
            "ood_paths": [str(p) for p in src.ood_paths],
            "train_on": src.train_on,
            "schema": {
                **asdict(src.schema),
                "text_columns": list(src.schema.text_columns),
                "original_values": list(src.schema.original_values),
                "label_table": dict(src.schema.label_table),
            },
            "featurizer": {**asdict(src.featurizer), "ngram_orders": list(src.featurizer.ngram_orders)},
        }
    return {
        "name": cfg.name,
        "seeds": list(cfg.seeds),
        "split": list(cfg.split),
        "ood": list(cfg.ood),
        "n_ood": cfg.n_ood,
        "data": data,
        "train": cfg.train.to_dict(),
        "model": asdict(cfg.model),
    }


def apply_overrides(cfg: ExperimentConfig, assignments: Mapping[str, Any] = (), seed: int | None = None) -> ExperimentConfig:
    """Apply ``--set`` assignments (dotted paths or sweep aliases), then the seed.

    A seed override keeps the number of seeds and renumbers them from ``seed``.
    """
    try:
        for key, value in dict(assignments).items():
            if isinstance(value, list):
                value = tuple(value)
            cfg = override(cfg, key, value)
        if seed is not None:
            cfg = override(cfg, "seeds", tuple(range(seed, seed + len(cfg.seeds))))
    except ConfigError:
        raise
    except (AttributeError, TypeError, ValueError) as err:
        raise ConfigError(f"bad override: {err}") from None
    return cfg


def dump_toml(tree: Mapping[str, Any], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(tomli_w.dumps(_toml_safe(tree)))
    return path


def _toml_safe(obj):
    if isinstance(obj, Mapping):
        return {str(k): _toml_safe(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_toml_safe(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj
