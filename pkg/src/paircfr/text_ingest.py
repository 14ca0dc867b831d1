"""Human-edited CAD text files -> hashed-feature paired datasets.

Featurization is fully specified so independent implementations agree
byte-for-byte:

1. Sentence pairs are stored as ``premise ||| hypothesis``; each side is
   tokenized separately and the sides are joined by the reserved token
   ``<sep>`` (which cannot arise from tokenization and so takes part in
   bigrams spanning the two sentences).
2. Tokens are the maximal runs of Unicode letters/digits of the lowercased
   text.
3. Every requested n-gram (tokens joined by one space, UTF-8) is hashed with
   64-bit FNV-1a over ``seed.to_bytes(8, "little") + ngram_bytes``.
4. Bucket ``= hash mod dim``; sign ``= +1`` if bit 63 of the hash is 0,
   else ``-1``; values accumulate, then optionally L2-normalize.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datasets import COUNTERFACTUAL, ORIGINAL, BlockLayout, PairedDataset

SEPARATOR = " ||| "
SEP_TOKEN = "<sep>"
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1
_TOKEN = re.compile(r"[^\W_]+")

SENTIMENT_LABELS = {"negative": 0, "positive": 1}
NLI_LABELS = {"contradiction": 0, "entailment": 1, "neutral": 2}


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class CadRecord:
    text: str
    label: int
    pair_id: int
    role: int

    def __post_init__(self):
        if not self.text.strip():
            raise IngestError(f"pair {self.pair_id}: empty text")


@dataclass(frozen=True)
class CadSchema:
    """Column mapping for a CAD TSV file.

    ``pairing="column"`` reads pair ids and roles from columns;
    ``pairing="order"`` treats each original as followed by its ``k``
    counterfactuals.  Label strings are matched case-insensitively.
    """

    text_columns: tuple[str, ...] = ("text",)
    label_column: str = "label"
    label_table: Mapping[str, int] = field(default_factory=lambda: dict(SENTIMENT_LABELS))
    pairing: str = "column"
    pair_column: str = "pair_id"
    role_column: str = "role"
    original_values: tuple[str, ...] = ("original", "orig")
    k: int = 1

    @classmethod
    def from_dict(cls, d: Mapping) -> "CadSchema":
        d = dict(d)
        for key in ("text_columns", "original_values"):
            if key in d:
                v = d[key]
                d[key] = (v,) if isinstance(v, str) else tuple(v)
        return cls(**d)


def parse_cad_table(path: str | Path, schema: CadSchema | None = None) -> list[CadRecord]:
    schema = schema or CadSchema()
    table = {k.lower(): int(v) for k, v in schema.label_table.items()}
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        columns = reader.fieldnames or []
        needed = list(schema.text_columns) + [schema.label_column]
        if schema.pairing == "column":
            needed += [schema.pair_column, schema.role_column]
        elif schema.pairing != "order":
            raise IngestError(f"unknown pairing mode {schema.pairing!r}")
        missing = [c for c in needed if c not in columns]
        if missing:
            raise IngestError(f"{path.name}: missing column(s) {missing}; found {columns}")
        rows = list(reader)

    records: list[CadRecord] = []
    originals = set()
    for lineno, row in enumerate(rows, start=2):
        raw = row[schema.label_column].strip()
        if raw.lower() not in table:
            raise IngestError(f"{path.name}:{lineno}: unknown label {raw!r}")
        label = table[raw.lower()]
        text = SEPARATOR.join(row[c].strip() for c in schema.text_columns)
        if schema.pairing == "column":
            pair_id = int(row[schema.pair_column])
            role = ORIGINAL if row[schema.role_column].strip().lower() in schema.original_values else COUNTERFACTUAL
        else:
            group = len(records) // (1 + schema.k)
            pair_id = group
            role = ORIGINAL if len(records) % (1 + schema.k) == 0 else COUNTERFACTUAL
        if role == ORIGINAL:
            originals.add(pair_id)
        records.append(CadRecord(text, label, pair_id, role))
    dangling = sorted({r.pair_id for r in records if r.role == COUNTERFACTUAL} - originals)
    if dangling:
        raise IngestError(f"{path.name}: dangling counterfactual(s) without an original, pair ids {dangling[:5]}")
    return records


@dataclass(frozen=True)
class HashFeaturizer:
    dim: int = 2**14
    ngram_orders: tuple[int, ...] = (1, 2)
    normalization: str = "l2"
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2 or self.dim & (self.dim - 1):
            raise ValueError(f"dim must be a power of two >= 2, got {self.dim}")
        if not self.ngram_orders or not set(self.ngram_orders) <= {1, 2}:
            raise ValueError("ngram_orders must be a non-empty subset of {1, 2}")
        if self.normalization not in ("l2", "none"):
            raise ValueError("normalization must be 'l2' or 'none'")
        if not 0 <= self.seed < 2**64:
            raise ValueError("hash seed must fit in 64 bits")


def tokenize(text: str) -> list[str]:
    tokens: list[str] = []
    for i, part in enumerate(text.split(SEPARATOR)):
        if i:
            tokens.append(SEP_TOKEN)
        tokens.extend(_TOKEN.findall(part.lower()))
    return tokens


def fnv1a_64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


@lru_cache(maxsize=1 << 16)
def _salted_hash(ngram: str, seed: int) -> int:
    return fnv1a_64(seed.to_bytes(8, "little") + ngram.encode("utf-8"))


def ngrams(tokens: Sequence[str], orders: Sequence[int]) -> list[str]:
    out = []
    for n in sorted(orders):
        out.extend(" ".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return out


def hash_featurize(text: str, f: HashFeaturizer) -> np.ndarray:
    v = np.zeros(f.dim)
    for g in ngrams(tokenize(text), f.ngram_orders):
        h = _salted_hash(g, f.seed)
        v[h % f.dim] += -1.0 if h >> 63 else 1.0
    if f.normalization == "l2":
        norm = np.linalg.norm(v)
        if norm > 0:
            v /= norm
    return v


def build_text_dataset(records: Sequence[CadRecord], featurizer: HashFeaturizer, **provenance) -> PairedDataset:
    """Group records by pair id (original first, then counterfactuals in file order)."""
    order: list[int] = []
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        if r.pair_id not in groups:
            groups[r.pair_id] = []
            order.append(r.pair_id)
        groups[r.pair_id].append(i)
    idx: list[int] = []
    for pid in order:
        members = groups[pid]
        origs = [i for i in members if records[i].role == ORIGINAL]
        if len(origs) != 1:
            raise IngestError(f"pair {pid} has {len(origs)} originals; expected exactly 1")
        o = records[origs[0]]
        for i in members:
            if records[i].role == COUNTERFACTUAL and records[i].label == o.label:
                raise IngestError(f"pair {pid}: inconsistent pair labels (counterfactual keeps label {o.label})")
        idx.extend(origs + [i for i in members if i != origs[0]])
    x = np.stack([hash_featurize(records[i].text, featurizer) for i in idx]) if idx else np.zeros((0, featurizer.dim))
    prov = {
        "mode": "text",
        "featurizer": {
            "dim": featurizer.dim,
            "ngram_orders": list(featurizer.ngram_orders),
            "normalization": featurizer.normalization,
            "seed": featurizer.seed,
        },
    }
    prov.update(provenance)
    return PairedDataset(
        BlockLayout(featurizer.dim, 0, 0),
        x,
        [records[i].label for i in idx],
        [records[i].role for i in idx],
        [records[i].pair_id for i in idx],
        provenance=prov,
    )


def fixture_path(name: str = "cad_sentiment_32.tsv") -> Path:
    """Path of a CAD text fixture shipped with the package."""
    return Path(__file__).parent / "data" / name
