"""Paired datasets: samples with explicit original/counterfactual links.

A dataset is stored column-wise (one feature matrix plus per-sample label,
role and pair-id vectors) and is immutable once built.  The TSV format is::

    pair_id  role  label  x_0  ...  x_{m-1}

with floats written in shortest round-trip decimal, plus a JSON sidecar
holding the block layout and provenance.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

ORIGINAL = 0
COUNTERFACTUAL = 1
ROLE_NAMES = ("original", "counterfactual")

NEUTRAL = 2


class DatasetError(ValueError):
    """Raised when dataset contents violate the pairing contract."""


@dataclass(frozen=True)
class BlockLayout:
    """Feature block sizes, in order: edited robust, unedited robust, spurious."""

    dim_r1: int
    dim_r2: int = 0
    dim_s: int = 0

    def __post_init__(self):
        if min(self.dim_r1, self.dim_r2, self.dim_s) < 0:
            raise ValueError("block dimensions must be non-negative")
        if self.dim_r1 < 1:
            raise ValueError("dim_r1 must be at least 1 (something must be editable)")

    @property
    def m(self) -> int:
        return self.dim_r1 + self.dim_r2 + self.dim_s

    @property
    def offsets(self) -> tuple[int, int, int, int]:
        a = self.dim_r1
        b = a + self.dim_r2
        return (0, a, b, b + self.dim_s)

    def slices(self) -> dict[str, slice]:
        o = self.offsets
        return {"r1": slice(o[0], o[1]), "r2": slice(o[1], o[2]), "s": slice(o[2], o[3])}

    def to_dict(self) -> dict[str, int]:
        return {"dim_r1": self.dim_r1, "dim_r2": self.dim_r2, "dim_s": self.dim_s}


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    label: int
    role: int
    pair_id: int
    source_label: int

    @property
    def is_original(self) -> bool:
        return self.role == ORIGINAL


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class PairedDataset:
    """Feature matrix + labels + explicit original/counterfactual pair links.

    Samples of one pair group share ``pair_id``; exactly one of them is the
    original.  ``pair_index`` maps each pair id to
    ``(original position, counterfactual positions)``.
    """

    layout: BlockLayout
    x: np.ndarray
    labels: np.ndarray
    roles: np.ndarray
    pair_ids: np.ndarray
    provenance: Mapping[str, Any] = field(default_factory=dict)
    pair_index: Mapping[int, tuple[int, tuple[int, ...]]] = field(init=False, repr=False)
    source_labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        x = _frozen(self.x, np.float64)
        if x.ndim != 2 or x.shape[1] != self.layout.m:
            raise DatasetError(f"feature matrix shape {x.shape} does not match layout m={self.layout.m}")
        n = x.shape[0]
        labels = _frozen(self.labels, np.int64)
        roles = _frozen(self.roles, np.int8)
        pair_ids = _frozen(self.pair_ids, np.int64)
        for name, arr in (("labels", labels), ("roles", roles), ("pair_ids", pair_ids)):
            if arr.shape != (n,):
                raise DatasetError(f"{name} has shape {arr.shape}, expected ({n},)")
        if np.any((roles != ORIGINAL) & (roles != COUNTERFACTUAL)):
            raise DatasetError("roles must be 0 (original) or 1 (counterfactual)")
        if np.any(labels < 0):
            raise DatasetError("labels must be non-negative class ids")

        originals: dict[int, int] = {}
        cfs: dict[int, list[int]] = {}
        for pos in range(n):
            pid = int(pair_ids[pos])
            if roles[pos] == ORIGINAL:
                if pid in originals:
                    raise DatasetError(f"pair_id {pid} has more than one original")
                originals[pid] = pos
            else:
                cfs.setdefault(pid, []).append(pos)
        dangling = sorted(set(cfs) - set(originals))
        if dangling:
            raise DatasetError(f"counterfactuals without an original: pair_ids {dangling[:5]}")
        source = labels.copy()
        for pid, positions in cfs.items():
            orig_label = labels[originals[pid]]
            for pos in positions:
                if labels[pos] == orig_label:
                    raise DatasetError(
                        f"pair_id {pid}: counterfactual shares the original's label {orig_label}"
                    )
                source[pos] = orig_label
        index = {pid: (pos, tuple(cfs.get(pid, ()))) for pid, pos in originals.items()}

        object.__setattr__(self, "x", x)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "roles", roles)
        object.__setattr__(self, "pair_ids", pair_ids)
        object.__setattr__(self, "source_labels", _frozen(source, np.int64))
        object.__setattr__(self, "pair_index", MappingProxyType(index))
        object.__setattr__(self, "provenance", MappingProxyType(dict(self.provenance)))

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, pos: int) -> Sample:
        return Sample(
            x=self.x[pos],
            label=int(self.labels[pos]),
            role=int(self.roles[pos]),
            pair_id=int(self.pair_ids[pos]),
            source_label=int(self.source_labels[pos]),
        )

    @property
    def samples(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def n_groups(self) -> int:
        return len(self.pair_index)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def groups(self) -> list[tuple[int, ...]]:
        """Sample positions of each pair group (original first), in pair-id order."""
        return [(o, *c) for _, (o, c) in sorted(self.pair_index.items())]

    def subset(self, positions: Sequence[int], **provenance) -> "PairedDataset":
        pos = np.asarray(positions, dtype=np.int64)
        prov = dict(self.provenance)
        prov.update(provenance)
        return PairedDataset(
            layout=self.layout,
            x=self.x[pos],
            labels=self.labels[pos],
            roles=self.roles[pos],
            pair_ids=self.pair_ids[pos],
            provenance=prov,
        )

    def subset_groups(self, pair_ids: Sequence[int], **provenance) -> "PairedDataset":
        pos: list[int] = []
        for pid in pair_ids:
            o, c = self.pair_index[int(pid)]
            pos.append(o)
            pos.extend(c)
        return self.subset(pos, **provenance)

    def originals_only(self) -> "PairedDataset":
        return self.subset(np.flatnonzero(self.roles == ORIGINAL), cad="originals_only")

    def content_hash(self) -> str:
        """SHA-256 over the exact bytes of the dataset columns and layout."""
        h = hashlib.sha256()
        h.update(json.dumps(self.layout.to_dict(), sort_keys=True).encode())
        for arr in (self.x, self.labels, self.roles, self.pair_ids):
            h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()


def _fmt(v: float) -> str:
    return repr(float(v))


def write_tsv(dataset: PairedDataset, path: str | Path, sidecar: Mapping[str, Any] | None = None) -> Path:
    """Write ``dataset`` to ``path`` and its JSON sidecar to ``path`` + ``.json``; returns ``path``."""
    path = Path(path)
    m = dataset.layout.m
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["pair_id", "role", "label"] + [f"x_{j}" for j in range(m)])
        for i in range(len(dataset)):
            row = [str(int(dataset.pair_ids[i])), ROLE_NAMES[dataset.roles[i]], str(int(dataset.labels[i]))]
            row.extend(_fmt(v) for v in dataset.x[i])
            w.writerow(row)
    meta = {"layout": dataset.layout.to_dict(), "provenance": dict(dataset.provenance)}
    if sidecar:
        meta.update(sidecar)
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default))
    return path


def read_tsv(path: str | Path) -> PairedDataset:
    path = Path(path)
    side = path.with_name(path.name + ".json")
    meta = json.loads(side.read_text())
    layout = BlockLayout(**meta["layout"])
    pair_ids, roles, labels, rows = [], [], [], []
    with path.open(newline="") as fh:
        r = csv.reader(fh, delimiter="\t")
        header = next(r)
        if header[:3] != ["pair_id", "role", "label"] or len(header) != 3 + layout.m:
            raise DatasetError(f"{path}: unexpected header {header[:4]}...")
        for line in r:
            pair_ids.append(int(line[0]))
            roles.append(ROLE_NAMES.index(line[1]))
            labels.append(int(line[2]))
            rows.append([float(v) for v in line[3:]])
    x = np.array(rows, dtype=np.float64).reshape(len(rows), layout.m)
    return PairedDataset(layout, x, labels, roles, pair_ids, provenance=meta.get("provenance", {}))


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Mapping):
        return dict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
