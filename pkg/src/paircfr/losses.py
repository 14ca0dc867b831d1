"""Cross-entropy and supervised contrastive losses with hand-derived gradients.

The contrastive loss follows the pairwise form used for CAD training: for an
anchor ``i`` with positives ``P_i`` (same label) and negatives ``N_i``
(different label, which includes the anchor's own counterfactuals),

    L_i = mean_{p in P_i} -log( e^{s_ip/t} / (e^{s_ip/t} + sum_{n in N_i} e^{s_in/t}) )

Note each positive's denominator holds that positive and the negatives only,
not the other positives.  Anchors without positives either contribute the
pure repulsion term ``log sum_n e^{s_in/t}`` or are skipped.  The batch loss
is the mean over contributing anchors.

Gradients are written in terms of ``dL/ds_ij`` and pushed back through the
similarity (dot or cosine) and then the linear encoder ``z = W^T x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .datasets import NEUTRAL, BlockLayout
from .feature_model import FeatureModelSpec, generate_paircad, require_valid

SIMILARITIES = ("cosine", "dot")
NO_POSITIVE_POLICIES = ("repulsion_only", "skip_anchor")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    tau: float = 0.5
    similarity: str = "cosine"
    neutral_excluded: bool = False
    no_positive_policy: str = "repulsion_only"

    def __post_init__(self):
        if not self.tau > 0:
            raise LossError(f"temperature tau must be > 0, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise LossError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.similarity not in SIMILARITIES:
            raise LossError(f"similarity must be one of {SIMILARITIES}")
        if self.no_positive_policy not in NO_POSITIVE_POLICIES:
            raise LossError(f"no_positive_policy must be one of {NO_POSITIVE_POLICIES}")


@dataclass
class GradReport:
    grad_encoder: np.ndarray | None
    grad_head: np.ndarray
    grad_bias: np.ndarray | None = None
    encoder_block_norms: tuple[float, float, float] | None = None


def similarity(z_a, z_b, mode: str = "cosine") -> float:
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    dot = float(z_a @ z_b)
    if mode == "dot":
        return dot
    if mode != "cosine":
        raise LossError(f"unknown similarity {mode!r}")
    na, nb = np.linalg.norm(z_a), np.linalg.norm(z_b)
    if na == 0 or nb == 0:
        raise LossError("cosine similarity of a zero-norm embedding")
    return dot / (na * nb)


# -- cross-entropy -----------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def ce_loss_and_grad(logits, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient ``(softmax - onehot) / n``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, K = logits.shape
    if K < 2:
        raise LossError("cross-entropy needs at least two classes")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= K:
        raise LossError("labels out of range for the logits")
    rows = np.arange(n)
    log_z = logsumexp(logits, axis=1)
    loss = float(np.mean(log_z - logits[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / n


# -- contrastive -------------------------------------------------------------


def _similarity_matrix(z: np.ndarray, mode: str) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    if mode == "dot":
        return z @ z.T, None, z
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise LossError("cosine similarity of a zero-norm embedding (e.g. an all-zero encoder)")
    zh = z / norms[:, None]
    return zh @ zh.T, norms, zh


def _similarity_backward(dS: np.ndarray, norms: np.ndarray | None, zh: np.ndarray) -> np.ndarray:
    """Map ``dL/dS`` (diagonal unused) to ``dL/dz``."""
    dZh = (dS + dS.T) @ zh
    if norms is None:
        return dZh
    radial = np.sum(dZh * zh, axis=1, keepdims=True)
    return (dZh - radial * zh) / norms[:, None]


@dataclass
class _ContrastiveTerms:
    active: np.ndarray  # positions of the samples taking part
    S: np.ndarray  # similarity matrix over the active samples
    anchor_loss: np.ndarray  # per-anchor loss L_i (0 for non-contributing)
    contributing: np.ndarray  # bool per active anchor
    dL_ds: np.ndarray  # per-anchor derivative dL_i/ds_ij (row i), not batch-averaged
    norms: np.ndarray | None
    zh: np.ndarray


def _contrastive_terms(z: np.ndarray, labels: np.ndarray, cfg: LossConfig) -> _ContrastiveTerms:
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise LossError(f"embedding batch shape {z.shape} does not match {labels.shape[0]} labels")
    active = np.flatnonzero(labels != NEUTRAL) if cfg.neutral_excluded else np.arange(len(labels))
    if active.size < 2:
        raise LossError("CL undefined: fewer than two samples in the batch")
    lab = labels[active]
    if cfg.no_positive_policy == "skip_anchor" and np.unique(lab).size < 2:
        raise LossError("CL undefined: no contrastive structure (single distinct label)")

    S, norms, zh = _similarity_matrix(z[active], cfg.similarity)
    L = S / cfg.tau
    n = active.size
    same = lab[:, None] == lab[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    n_pos = pos.sum(axis=1)
    has_neg = neg.any(axis=1)

    lse_neg = np.where(has_neg, logsumexp(np.where(neg, L, -np.inf), axis=1), -np.inf)
    # per-(anchor, positive) log denominator and loss term; both well defined on pos
    D = np.logaddexp(L, lse_neg[:, None])
    terms = np.where(pos, D - L, 0.0)
    # weight of negative n in anchor i: e^{L_in - lse_neg_i}; per-positive share e^{lse_neg_i - D_ip}
    w_neg = np.exp(np.where(neg, L - np.where(has_neg, lse_neg, 0.0)[:, None], -np.inf))
    share = np.exp(np.where(pos, lse_neg[:, None] - D, -np.inf))

    anchor_loss = np.zeros(n)
    dL_ds = np.zeros((n, n))
    with_pos = n_pos > 0
    denom = np.where(with_pos, n_pos, 1)
    anchor_loss[with_pos] = terms[with_pos].sum(axis=1) / n_pos[with_pos]
    q = np.exp(np.where(pos, L - D, -np.inf))
    p_in = w_neg * (share.sum(axis=1) / denom)[:, None]
    dL_ds += np.where(with_pos[:, None], (np.where(pos, q - 1.0, 0.0) / denom[:, None] + p_in), 0.0)

    no_pos = ~with_pos & has_neg
    contributing = with_pos.copy()
    if cfg.no_positive_policy == "repulsion_only" and np.any(no_pos):
        anchor_loss[no_pos] = lse_neg[no_pos]
        dL_ds[no_pos] = w_neg[no_pos]
        contributing |= no_pos
    if not np.any(contributing):
        raise LossError("CL undefined: no contrastive structure (no anchor contributes)")
    dL_ds /= cfg.tau
    return _ContrastiveTerms(active, S, anchor_loss, contributing, dL_ds, norms, zh)


def cl_loss_and_grad(z, labels, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Batch contrastive loss and its gradient w.r.t. the embeddings ``z`` (n x d)."""
    z = np.asarray(z, dtype=np.float64)
    t = _contrastive_terms(z, labels, cfg)
    c = int(t.contributing.sum())
    loss = float(t.anchor_loss[t.contributing].sum() / c)
    dS = np.where(t.contributing[:, None], t.dL_ds, 0.0) / c
    grad = np.zeros_like(z)
    grad[t.active] = _similarity_backward(dS, t.norms, t.zh)
    return loss, grad


def _local(t: _ContrastiveTerms, i: int) -> int:
    hit = np.flatnonzero(t.active == i)
    if hit.size == 0:
        raise LossError(f"sample {i} does not take part in the contrastive loss")
    return int(hit[0])


def p_in(z, labels, cfg: LossConfig, i: int, n: int) -> float:
    """Mean over positives of anchor ``i`` of ``e^{s_in/t} / (e^{s_ip/t} + sum_n' e^{s_in'/t})``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels[i] == labels[n] or i == n:
        raise LossError(f"sample {n} is not a negative of anchor {i}")
    same = labels == labels[i]
    same[i] = False
    if cfg.neutral_excluded:
        same &= labels != NEUTRAL
    if not same.any():
        raise LossError(f"anchor {i} has no positives; p_in is undefined")
    t = _contrastive_terms(z, labels, cfg)
    li, ln = _local(t, i), _local(t, n)
    return float(t.dL_ds[li, ln] * cfg.tau)


def outer_sym(x_i, x_n) -> np.ndarray:
    """``x_i x_n^T + x_n x_i^T``; exactly symmetric."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_n = np.asarray(x_n, dtype=np.float64)
    if x_i.shape != x_n.shape or x_i.ndim != 1:
        raise LossError("outer_sym needs two vectors of equal length")
    return np.outer(x_i, x_n) + np.outer(x_n, x_i)


def cl_grad_negative_branch(X, W, labels, cfg: LossConfig, i: int, n: int) -> np.ndarray:
    """Gradient of anchor ``i``'s loss w.r.t. ``W`` flowing through ``s_in`` only.

    Dot similarity only: ``(1/t) * p_in * (x_i x_n^T + x_n x_i^T) @ W``.
    """
    if cfg.similarity != "dot":
        raise LossError("the negative-branch gradient form holds for dot similarity only")
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    z = X @ W
    labels = np.asarray(labels)
    if np.sum((labels == labels[i]) & (np.arange(len(labels)) != i)) == 0:
        prob = _repulsion_weight(z, labels, cfg, i, n)
    else:
        prob = p_in(z, labels, cfg, i, n)
    return (prob / cfg.tau) * (outer_sym(X[i], X[n]) @ W)


def _repulsion_weight(z, labels, cfg, i, n) -> float:
    t = _contrastive_terms(z, labels, cfg)
    return float(t.dL_ds[_local(t, i), _local(t, n)] * cfg.tau)


def anchor_branch_derivatives(z, labels, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(active positions, per-anchor losses, dL_i/ds_ij)`` for inspection and tests."""
    t = _contrastive_terms(z, labels, cfg)
    return t.active, t.anchor_loss, t.dL_ds


# -- combined objective -------------------------------------------------------


def _encoder(model) -> np.ndarray | None:
    return None if getattr(model, "identity_encoder", False) else model.W


def model_forward(model, X) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    W = _encoder(model)
    z = X if W is None else X @ W
    logits = z @ model.U
    if getattr(model, "b", None) is not None:
        logits = logits + model.b
    return z, logits


def _report(model, dZ, X, dU, db, layout: BlockLayout | None) -> GradReport:
    W = _encoder(model)
    gW = None if W is None else X.T @ dZ
    norms = None
    if gW is not None and layout is not None:
        row = np.linalg.norm(gW, axis=1)
        norms = tuple(float(np.linalg.norm(row[sl])) for sl in layout.slices().values())
    return GradReport(gW, dU, db, norms)


def ce_only_loss_and_grad(model, X, labels, layout: BlockLayout | None = None) -> tuple[float, GradReport]:
    X = np.asarray(X, dtype=np.float64)
    z, logits = model_forward(model, X)
    loss, dlogits = ce_loss_and_grad(logits, labels)
    db = dlogits.sum(axis=0) if getattr(model, "b", None) is not None else None
    return loss, _report(model, dlogits @ model.U.T, X, z.T @ dlogits, db, layout)


def combined_loss_and_grad(model, X, labels, cfg: LossConfig, layout: BlockLayout | None = None) -> tuple[float, GradReport]:
    """``lam * L_CL(z) + (1 - lam) * L_CE(logits)`` and its full gradient.

    The contrastive term acts on the encoder only; the head sees CE alone.
    ``lam == 0`` skips the contrastive term so the result equals the CE path bit-for-bit.
    """
    X = np.asarray(X, dtype=np.float64)
    lam = cfg.lam
    z, logits = model_forward(model, X)
    has_bias = getattr(model, "b", None) is not None
    if lam == 1.0:
        loss_ce, dlogits = 0.0, np.zeros_like(logits)
    else:
        loss_ce, dlogits = ce_loss_and_grad(logits, labels)
    if lam == 0.0:
        loss_cl, dZ_cl = 0.0, None
    else:
        loss_cl, dZ_cl = cl_loss_and_grad(z, labels, cfg)

    w_ce = 1.0 - lam
    dlogits = w_ce * dlogits
    dZ = dlogits @ model.U.T
    if dZ_cl is not None:
        dZ = dZ + lam * dZ_cl
    loss = lam * loss_cl + w_ce * loss_ce
    db = dlogits.sum(axis=0) if has_bias else None
    return float(loss), _report(model, dZ, X, z.T @ dlogits, db, layout)


# -- gradient-structure results ----------------------------------------------


@dataclass
class PairGradient:
    grad: np.ndarray  # m x K, summed over the pair
    y_hat_o: float  # probability of the original's own label
    y_hat_c: float  # probability of the counterfactual's own label
    unedited_norm: float
    predicted_unedited_norm: float
    unedited_max_abs: float

    @property
    def unedited_vanish(self) -> bool:
        return self.unedited_max_abs == 0.0


def _check_exact_pair(x_o, x_c, layout: BlockLayout):
    sl = layout.slices()
    rest = np.arange(layout.dim_r1, layout.m)
    if not (np.array_equal(x_c[sl["r1"]], -x_o[sl["r1"]]) and np.array_equal(x_c[rest], x_o[rest])):
        raise LossError("pair is not an exact-opposite counterfactual pair")
    return rest


def ce_pair_gradient(x_o, x_c, W, layout: BlockLayout, label_o: int = 0) -> PairGradient:
    """Summed CE gradient ``X (Y_hat - Y)^T`` of a single-layer softmax model on one pair.

    ``x_c`` must be the exact-opposite counterfactual of ``x_o``; the
    counterfactual's label is ``1 - label_o``.
    """
    x_o = np.asarray(x_o, dtype=np.float64)
    x_c = np.asarray(x_c, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if label_o not in (0, 1) or W.shape != (layout.m, 2):
        raise LossError("ce_pair_gradient needs a binary pair and an m x 2 weight matrix")
    rest = _check_exact_pair(x_o, x_c, layout)
    X = np.stack([x_o, x_c])
    labels = np.array([label_o, 1 - label_o])
    P = softmax(X @ W)
    R = P.copy()
    R[[0, 1], labels] -= 1.0
    grad = X.T @ R
    y_o, y_c = float(P[0, labels[0]]), float(P[1, labels[1]])
    ctx = grad[rest]
    return PairGradient(
        grad=grad,
        y_hat_o=y_o,
        y_hat_c=y_c,
        unedited_norm=float(np.linalg.norm(ctx)),
        predicted_unedited_norm=abs(y_o - y_c) * np.sqrt(2.0) * float(np.linalg.norm(x_o[rest])),
        unedited_max_abs=float(np.max(np.abs(ctx))) if ctx.size else 0.0,
    )


def sigmoid_pair_gradient(x_r: float, x_c_feat: float, w_r: float, w_c: float) -> tuple[float, float]:
    """Gradients of ``-log f(x) - log(1 - f(c))`` for ``f = sigmoid(w_r*x_r + w_c*x_c)``, ``c_r = -x_r``."""
    s_x = expit(w_r * x_r + w_c * x_c_feat)
    s_c = expit(-w_r * x_r + w_c * x_c_feat)
    g_r = x_r * (s_x - 1.0) - x_r * s_c
    g_c = x_c_feat * (s_x - 1.0 + s_c)
    return float(g_r), float(g_c)


def sigmoid_pair_trajectory(x_r: float, x_c_feat: float, steps: int = 100, lr: float = 0.1, w0=(0.0, 0.0)) -> np.ndarray:
    """Gradient-descent path of ``(w_r, w_c)`` on the toy pair loss; shape (steps + 1, 2)."""
    path = np.empty((steps + 1, 2))
    path[0] = w0
    for t in range(steps):
        g_r, g_c = sigmoid_pair_gradient(x_r, x_c_feat, *path[t])
        path[t + 1] = path[t] - lr * np.array([g_r, g_c])
    return path


@dataclass
class PairAReport:
    mean: np.ndarray
    stderr: np.ndarray
    exact: np.ndarray
    zero_mean_form: np.ndarray
    n: int

    def max_z_score(self, against: str = "exact") -> float:
        if against not in ("exact", "zero_mean"):
            raise ValueError(f"against must be 'exact' or 'zero_mean', got {against!r}")
        target = self.exact if against == "exact" else self.zero_mean_form
        diff = np.abs(self.mean - target)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(diff == 0, 0.0, diff / self.stderr)
        return float(np.max(z))


def expected_pair_A_exact(spec: FeatureModelSpec) -> np.ndarray:
    """``E[x_o x_c^T + x_c x_o^T]`` for exact-opposite edits and binary labels."""
    sl = spec.layout.slices()
    m = spec.layout.m
    mean = np.concatenate([spec.mu_r1, spec.mu_r2, spec.mu_s])
    second = np.outer(mean, mean)
    for b in sl:
        second[sl[b], sl[b]] += spec.cov(b)
    d = np.ones(m)
    d[sl["r1"]] = -1.0
    return second * d[None, :] + d[:, None] * second


def zero_mean_pair_A(spec: FeatureModelSpec) -> np.ndarray:
    """``2 diag(-Sigma_r1, Sigma_r2, Sigma_s)``: the pair expectation when every block mean is zero."""
    sl = spec.layout.slices()
    A = np.zeros((spec.layout.m, spec.layout.m))
    A[sl["r1"], sl["r1"]] = -2.0 * spec.sigma_r1
    A[sl["r2"], sl["r2"]] = 2.0 * spec.sigma_r2
    A[sl["s"], sl["s"]] = 2.0 * spec.sigma_s
    return A


def expected_pair_A(spec: FeatureModelSpec, n_mc: int, seed: int = 0, chunk: int = 50_000) -> PairAReport:
    """Monte-Carlo mean (and per-entry standard error) of ``A_{o,c}`` over exact-opposite pairs."""
    require_valid(spec)
    if spec.classes != 2:
        raise LossError("pair expectation is defined for binary specs")
    ds = generate_paircad(spec, n_mc, 1, "exact_opposite", seed)
    Xo, Xc = ds.x[0::2], ds.x[1::2]
    m = spec.layout.m
    s1 = np.zeros((m, m))
    s2 = np.zeros((m, m))
    for a in range(0, n_mc, chunk):
        xo, xc = Xo[a : a + chunk], Xc[a : a + chunk]
        A = np.einsum("ki,kj->kij", xo, xc)
        A = A + A.transpose(0, 2, 1)
        s1 += A.sum(axis=0)
        s2 += (A * A).sum(axis=0)
    mean = s1 / n_mc
    if n_mc > 1:
        var = np.maximum(s2 / n_mc - mean * mean, 0.0) * n_mc / (n_mc - 1)
        stderr = np.sqrt(var / n_mc)
    else:
        stderr = np.full((m, m), np.nan)
    return PairAReport(mean, stderr, expected_pair_A_exact(spec), zero_mean_pair_A(spec), n_mc)
