"""Gaussian generative model for counterfactually augmented data.

Features split into three blocks ``x = [h_r1, h_r2, h_s]``:

* ``h_r1``  robust features that annotators edit to flip the label,
* ``h_r2``  robust features left untouched by the edit,
* ``h_s``   spurious features that correlate with the label in-domain only.

For a binary label ``y`` in ``{-1, +1}`` (class ids 0 and 1), each block of
an original is drawn independently as ``h_b = y * mu_b + L_b @ eps`` where
``L_b`` is the Cholesky factor of ``Sigma_b``.  The neutral class (id 2) has
zero mean in every block.  A counterfactual flips the label and replaces only
``h_r1``; the other blocks are copied bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._rng import make_rng
from .datasets import COUNTERFACTUAL, NEUTRAL, ORIGINAL, BlockLayout, PairedDataset, Sample

__all__ = [
    "BlockLayout",
    "FeatureModelSpec",
    "SpecError",
    "EDIT_MODES",
    "OOD_SHIFTS",
    "validate_spec",
    "require_valid",
    "label_sign",
    "flip_label",
    "sample_original",
    "sample_originals",
    "derive_counterfactual",
    "generate_paircad",
    "generate_ood",
    "canonical_spec",
]

EDIT_MODES = ("exact_opposite", "resample")
OOD_SHIFTS = ("none", "spurious_flip", "spurious_null", "edited_null")
BLOCKS = ("r1", "r2", "s")


class SpecError(ValueError):
    pass


def _as_vec(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=np.float64))


def _as_mat(v, dim: int) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 0:
        return a * np.eye(dim)
    return np.atleast_2d(a) if dim else a.reshape(0, 0)


@dataclass(frozen=True, eq=False)
class FeatureModelSpec:
    """Block means and covariances of the generative model.

    Scalars passed for a covariance are expanded to ``sigma * I``.
    """

    layout: BlockLayout
    mu_r1: np.ndarray
    mu_r2: np.ndarray
    mu_s: np.ndarray
    sigma_r1: np.ndarray
    sigma_r2: np.ndarray
    sigma_s: np.ndarray
    classes: int = 2
    label_prior: float = 0.5
    _chol: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        for b, dim in zip(BLOCKS, (self.layout.dim_r1, self.layout.dim_r2, self.layout.dim_s)):
            mu = getattr(self, f"mu_{b}")
            object.__setattr__(self, f"mu_{b}", _as_vec(mu) if dim or np.size(mu) else np.zeros(0))
            object.__setattr__(self, f"sigma_{b}", _as_mat(getattr(self, f"sigma_{b}"), dim))

    @classmethod
    def isotropic(
        cls,
        dims: Sequence[int],
        mu_r1,
        mu_r2=(),
        mu_s=(),
        variances: float | Sequence[float] = 1.0,
        classes: int = 2,
        label_prior: float = 0.5,
    ) -> "FeatureModelSpec":
        """Spec with ``Sigma_b = variance_b * I`` (one variance, or one per block)."""
        layout = BlockLayout(*dims)
        var = [variances] * 3 if np.isscalar(variances) else list(variances)
        return cls(
            layout,
            mu_r1,
            mu_r2,
            mu_s,
            var[0] * np.eye(layout.dim_r1),
            var[1] * np.eye(layout.dim_r2),
            var[2] * np.eye(layout.dim_s),
            classes=classes,
            label_prior=label_prior,
        )

    def mean(self, block: str) -> np.ndarray:
        return getattr(self, f"mu_{block}")

    def cov(self, block: str) -> np.ndarray:
        return getattr(self, f"sigma_{block}")

    def chol(self, block: str) -> np.ndarray:
        if block not in self._chol:
            s = self.cov(block)
            self._chol[block] = np.linalg.cholesky(s) if s.size else s
        return self._chol[block]

    def to_dict(self) -> dict:
        d = {"layout": self.layout.to_dict(), "classes": self.classes, "label_prior": self.label_prior}
        for b in BLOCKS:
            d[f"mu_{b}"] = self.mean(b).tolist()
            d[f"sigma_{b}"] = self.cov(b).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureModelSpec":
        layout = BlockLayout(**d["layout"])
        dims = dict(zip(BLOCKS, (layout.dim_r1, layout.dim_r2, layout.dim_s)))
        kw = {}
        for b in BLOCKS:
            kw[f"mu_{b}"] = np.asarray(d.get(f"mu_{b}", np.zeros(dims[b])), dtype=np.float64)
            sig = d.get(f"sigma_{b}", 1.0)
            kw[f"sigma_{b}"] = sig if np.ndim(sig) else float(sig) * np.eye(dims[b])
        return cls(layout, classes=int(d.get("classes", 2)), label_prior=float(d.get("label_prior", 0.5)), **kw)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def validate_spec(spec: FeatureModelSpec) -> list[str]:
    """Return a list of violated invariants; empty means ``spec`` is valid."""
    diags: list[str] = []
    dims = dict(zip(BLOCKS, (spec.layout.dim_r1, spec.layout.dim_r2, spec.layout.dim_s)))
    for b in BLOCKS:
        mu, sig = spec.mean(b), spec.cov(b)
        if mu.shape != (dims[b],):
            diags.append(f"mu_{b}: mean/layout mismatch (length {mu.size}, dim_{b}={dims[b]})")
        if sig.shape != (dims[b], dims[b]):
            diags.append(f"sigma_{b}: covariance/layout mismatch (shape {sig.shape}, dim_{b}={dims[b]})")
            continue
        if not dims[b]:
            continue
        if not np.all(np.isfinite(sig)) or not np.allclose(sig, sig.T, rtol=1e-12, atol=0):
            diags.append(f"sigma_{b} not symmetric")
            continue
        try:
            np.linalg.cholesky(sig)
        except np.linalg.LinAlgError:
            diags.append(f"sigma_{b} not positive definite")
    if spec.classes not in (2, 3):
        diags.append(f"classes must be 2 or 3, got {spec.classes}")
    if not 0.0 < spec.label_prior < 1.0:
        diags.append(f"label_prior must lie in (0, 1), got {spec.label_prior}")
    return diags


def require_valid(spec: FeatureModelSpec) -> None:
    diags = validate_spec(spec)
    if diags:
        raise SpecError("; ".join(diags))


def label_sign(label) -> np.ndarray:
    """Class id -> regression target: 0 -> -1, 1 -> +1, neutral (2) -> 0."""
    lab = np.asarray(label)
    return np.where(lab == 1, 1.0, np.where(lab == 0, -1.0, 0.0))


def flip_label(label: int) -> int:
    if label not in (0, 1):
        raise SpecError("neutral samples have no counterfactual")
    return 1 - label


def _check_labels(spec: FeatureModelSpec, labels: np.ndarray) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= spec.classes):
        raise SpecError(f"label ids must lie in [0, {spec.classes}), got {sorted(set(labels.tolist()))[:5]}")


def sample_originals(
    spec: FeatureModelSpec,
    labels,
    rng: np.random.Generator,
    block_signs: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Draw one feature row per label.

    ``block_signs`` overrides the per-sample mean multiplier of a block
    (default ``y`` for every block); this is how the OOD shifts are built.
    """
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(spec, labels)
    y = label_sign(labels)
    n, m = labels.size, spec.layout.m
    eps = rng.standard_normal((n, m))
    x = np.empty((n, m))
    for b, sl in spec.layout.slices().items():
        if sl.start == sl.stop:
            continue
        sign = y if block_signs is None or b not in block_signs else block_signs[b]
        x[:, sl] = np.outer(sign, spec.mean(b)) + eps[:, sl] @ spec.chol(b).T
    return x


def sample_original(spec: FeatureModelSpec, label: int, rng: np.random.Generator, pair_id: int = 0) -> Sample:
    require_valid(spec)
    x = sample_originals(spec, [label], rng)[0]
    return Sample(x=x, label=int(label), role=ORIGINAL, pair_id=pair_id, source_label=int(label))


def _edited_r1(spec: FeatureModelSpec, x_orig: np.ndarray, orig_labels: np.ndarray, edit_mode: str, rng, k: int = 1):
    """r1 blocks of the counterfactuals, shape (len(x_orig) * k, dim_r1), grouped by original."""
    sl = spec.layout.slices()["r1"]
    if edit_mode == "exact_opposite":
        return np.repeat(-x_orig[:, sl], k, axis=0)
    if edit_mode == "resample":
        # the fresh draw is consistent with the counterfactual's (flipped) label
        y_cf = np.repeat(-label_sign(orig_labels), k)
        eps = rng.standard_normal((y_cf.size, spec.layout.dim_r1))
        return np.outer(y_cf, spec.mu_r1) + eps @ spec.chol("r1").T
    raise SpecError(f"unknown edit_mode {edit_mode!r}; expected one of {EDIT_MODES}")


def derive_counterfactual(
    original: Sample, spec: FeatureModelSpec, edit_mode: str = "exact_opposite", rng: np.random.Generator | None = None
) -> Sample:
    if original.role != ORIGINAL:
        raise SpecError("can only derive counterfactuals from originals")
    new_label = flip_label(original.label)
    if edit_mode == "resample" and rng is None:
        raise SpecError("resample edits need a random generator")
    x = np.array(original.x, dtype=np.float64, copy=True)
    r1 = _edited_r1(spec, x[None, :], np.array([original.label]), edit_mode, rng)
    x[spec.layout.slices()["r1"]] = r1[0]
    return Sample(x=x, label=new_label, role=COUNTERFACTUAL, pair_id=original.pair_id, source_label=original.label)


def _balanced_labels(spec: FeatureModelSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified label assignment in a seeded random order."""
    if spec.classes == 2:
        n1 = int(round(n * spec.label_prior))
        counts = [n - n1, n1]
    else:
        counts = [n // 3 + (1 if c < n % 3 else 0) for c in range(3)]
    labels = np.repeat(np.arange(len(counts)), counts)
    return rng.permutation(labels)


def generate_paircad(
    spec: FeatureModelSpec,
    n_pairs: int,
    cfes_per_original: int = 1,
    edit_mode: str = "exact_opposite",
    seed: int = 0,
) -> PairedDataset:
    """Originals plus ``k`` counterfactuals each, stored group-contiguously.

    Neutral originals (3-class specs) cannot be edited and form singleton
    groups, so only binary-labelled originals contribute ``1 + k`` samples.
    """
    require_valid(spec)
    k = cfes_per_original
    if n_pairs < 1 or k < 1:
        raise SpecError("n_pairs and cfes_per_original must be >= 1")
    if edit_mode not in EDIT_MODES:
        raise SpecError(f"unknown edit_mode {edit_mode!r}; expected one of {EDIT_MODES}")
    if k > 1 and edit_mode == "exact_opposite":
        raise SpecError("exact opposite edit is unique: cfes_per_original must be 1")

    labels = _balanced_labels(spec, n_pairs, make_rng(seed, "paircad", "labels"))
    x_orig = sample_originals(spec, labels, make_rng(seed, "paircad", "originals"))
    editable = labels != NEUTRAL
    r1_cf = _edited_r1(spec, x_orig[editable], labels[editable], edit_mode, make_rng(seed, "paircad", "edits"), k)

    group_size = np.where(editable, 1 + k, 1)
    n = int(group_size.sum())
    starts = np.concatenate([[0], np.cumsum(group_size)[:-1]])
    x = np.empty((n, spec.layout.m))
    out_labels = np.empty(n, dtype=np.int64)
    roles = np.full(n, COUNTERFACTUAL, dtype=np.int8)
    pair_ids = np.repeat(np.arange(n_pairs), group_size)

    x[starts] = x_orig
    out_labels[starts] = labels
    roles[starts] = ORIGINAL
    cf_pos = (starts[editable][:, None] + 1 + np.arange(k)[None, :]).ravel()
    x[cf_pos] = np.repeat(x_orig[editable], k, axis=0)
    x[cf_pos, spec.layout.slices()["r1"]] = r1_cf
    out_labels[cf_pos] = np.repeat(1 - labels[editable], k)

    prov = {
        "mode": "paircad",
        "spec_hash": spec.spec_hash(),
        "seed": seed,
        "n_pairs": n_pairs,
        "cfes_per_original": k,
        "edit_mode": edit_mode,
    }
    return PairedDataset(spec.layout, x, out_labels, roles, pair_ids, provenance=prov)


def generate_ood(spec: FeatureModelSpec, n: int, shift: str = "none", seed: int = 0) -> PairedDataset:
    """Originals-only test set with a shifted feature/label relationship.

    ``spurious_flip``  spurious block anti-correlated with the label,
    ``spurious_null``  spurious block uninformative (zero mean),
    ``edited_null``    edited robust block uninformative,
    ``none``           in-domain draw.
    """
    require_valid(spec)
    if shift not in OOD_SHIFTS:
        raise SpecError(f"unknown shift {shift!r}; expected one of {OOD_SHIFTS}")
    labels = _balanced_labels(spec, n, make_rng(seed, "ood", shift, "labels"))
    y = label_sign(labels)
    signs = {
        "none": {},
        "spurious_flip": {"s": -y},
        "spurious_null": {"s": np.zeros_like(y)},
        "edited_null": {"r1": np.zeros_like(y)},
    }[shift]
    x = sample_originals(spec, labels, make_rng(seed, "ood", shift, "features"), block_signs=signs)
    prov = {"mode": "ood", "shift": shift, "spec_hash": spec.spec_hash(), "seed": seed, "n": n}
    return PairedDataset(spec.layout, x, labels, np.zeros(n, dtype=np.int8), np.arange(n), provenance=prov)


def canonical_spec(classes: int = 2) -> FeatureModelSpec:
    """The (2, 2, 2) benchmark spec: mu_r1=[1, .5], mu_r2=[1, 0], mu_s=[.8, 0], identity covariances."""
    return FeatureModelSpec.isotropic((2, 2, 2), [1.0, 0.5], [1.0, 0.0], [0.8, 0.0], classes=classes)
