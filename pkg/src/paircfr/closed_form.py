"""Least-squares classifiers on CAD and the weight-concentration result.

With labels encoded as ``y in {-1, +1}`` the least-squares weights solve
``E[x x^T] w = E[x y]``.  On a pooled CAD dataset with exact-opposite edits
the cross moment vanishes on the unedited blocks and the second-moment
matrix decouples the edited block, so the population solution is
``[(Sigma_r1 + mu_r1 mu_r1^T)^{-1} mu_r1, 0, 0]``, which by Sherman-Morrison
is parallel to ``Sigma_r1^{-1} mu_r1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .datasets import BlockLayout, PairedDataset
from .feature_model import FeatureModelSpec, SpecError, label_sign, require_valid


class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, msg: str, condition: float):
        super().__init__(msg)
        self.condition = condition


@dataclass(frozen=True)
class MomentPair:
    M: np.ndarray
    mu_vec: np.ndarray
    n: int


@dataclass(frozen=True)
class WeightReport:
    w: np.ndarray
    block_norms: tuple[float, float, float]
    direction_cosine_r1: float
    reference: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {
            "w": self.w.tolist(),
            "block_norms": list(self.block_norms),
            "direction_cosine_r1": self.direction_cosine_r1,
        }
        if self.reference is not None:
            d["reference"] = self.reference.tolist()
        return d


def empirical_moments(dataset: PairedDataset) -> MomentPair:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if np.any(dataset.labels > 1):
        raise SpecError("closed-form analysis is binary-only")
    x = dataset.x
    y = label_sign(dataset.labels)
    n = x.shape[0]
    M = (x.T @ x) / n
    M = 0.5 * (M + M.T)
    return MomentPair(M=M, mu_vec=(x.T @ y) / n, n=n)


def solve_least_squares(moments: MomentPair, ridge: float = 0.0) -> np.ndarray:
    """``(M + ridge*I)^{-1} mu_vec`` by Cholesky, falling back to eigendecomposition."""
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    A = moments.M + ridge * np.eye(moments.M.shape[0])
    b = moments.mu_vec
    evals = np.linalg.eigvalsh(A)
    top = float(np.max(np.abs(evals))) if evals.size else 0.0
    low = float(np.min(evals)) if evals.size else 0.0
    cond = np.inf if low <= top * 1e-14 else top / low
    if not np.isfinite(cond):
        raise SingularSystemError(f"singular moment matrix (condition estimate {cond}); raise the ridge", cond)
    try:
        c = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
        return scipy.linalg.cho_solve(c, b)
    except np.linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(A)
        return evecs @ ((evecs.T @ b) / evals)


def block_mass(w, layout: BlockLayout) -> tuple[float, float, float]:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (layout.m,):
        raise ValueError(f"weight length {w.shape} does not match layout m={layout.m}")
    sl = layout.slices()
    return tuple(float(np.linalg.norm(w[sl[b]])) for b in ("r1", "r2", "s"))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def reference_direction(spec: FeatureModelSpec) -> np.ndarray:
    """``Sigma_r1^{-1} mu_r1`` padded with zeros on the unedited blocks."""
    w = np.zeros(spec.layout.m)
    w[spec.layout.slices()["r1"]] = np.linalg.solve(spec.sigma_r1, spec.mu_r1)
    return w


def weight_report(w, spec: FeatureModelSpec) -> WeightReport:
    w = np.asarray(w, dtype=np.float64)
    sl = spec.layout.slices()["r1"]
    ref = reference_direction(spec)
    return WeightReport(
        w=w,
        block_norms=block_mass(w, spec.layout),
        direction_cosine_r1=_cosine(w[sl], ref[sl]),
        reference=ref,
    )


def population_cad_weights(spec: FeatureModelSpec) -> WeightReport:
    """Exact population least-squares weights for pooled exact-opposite CAD.

    ``WeightReport.w`` is the exact solution; ``reference`` holds
    ``[Sigma_r1^{-1} mu_r1, 0, 0]``.
    """
    require_valid(spec)
    if spec.classes != 2:
        raise SpecError("closed-form analysis is binary-only")
    ref = reference_direction(spec)
    sl = spec.layout.slices()["r1"]
    mu = spec.mu_r1
    # Sherman-Morrison: (S + mu mu^T)^{-1} mu = S^{-1} mu / (1 + mu^T S^{-1} mu)
    s_inv_mu = ref[sl]
    w = np.zeros(spec.layout.m)
    w[sl] = s_inv_mu / (1.0 + mu @ s_inv_mu)
    cos = 1.0 if np.any(mu) else 0.0
    return WeightReport(w=w, block_norms=block_mass(w, spec.layout), direction_cosine_r1=cos, reference=ref)


def population_cad_moments(spec: FeatureModelSpec) -> MomentPair:
    """Exact pooled-CAD moments, for cross-checking ``population_cad_weights``."""
    sl = spec.layout.slices()
    m = spec.layout.m
    M = np.zeros((m, m))
    mean = {b: spec.mean(b) for b in sl}
    for b in sl:
        M[sl[b], sl[b]] = spec.cov(b) + np.outer(mean[b], mean[b])
    # the r2-s cross moment survives pooling; r1 cross terms cancel within each pair
    M[sl["r2"], sl["s"]] = np.outer(mean["r2"], mean["s"])
    M[sl["s"], sl["r2"]] = np.outer(mean["s"], mean["r2"])
    mu_vec = np.zeros(m)
    mu_vec[sl["r1"]] = mean["r1"]
    return MomentPair(M=M, mu_vec=mu_vec, n=0)


def empirical_weights(dataset: PairedDataset, ridge: float = 0.0) -> np.ndarray:
    return solve_least_squares(empirical_moments(dataset), ridge)
