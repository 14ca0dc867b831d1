"""Numerical verification suite for the closed-form and gradient-structure results.

Each check returns a ``TheoremResult`` with the measured quantity, the
tolerance it is held to and whether it passed.  All randomness comes from
fixed seeds, so a suite run is reproducible bit for bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from ._rng import make_rng
from .closed_form import (
    empirical_weights,
    population_cad_moments,
    population_cad_weights,
    solve_least_squares,
    weight_report,
)
from .datasets import BlockLayout
from .feature_model import FeatureModelSpec, canonical_spec, generate_paircad
from .losses import (
    LossConfig,
    ce_pair_gradient,
    cl_grad_negative_branch,
    cl_loss_and_grad,
    expected_pair_A,
    sigmoid_pair_gradient,
    sigmoid_pair_trajectory,
)
from .trainer import LinearModel, ce_objective, finite_diff_check


@dataclass(frozen=True)
class SuiteConfig:
    """Sizes, seeds and tolerances of the verification suite."""

    seed: int = 0
    tau: float = 0.5
    closed_form_pairs: int = 100_000
    closed_form_ratio: float = 0.02
    closed_form_cosine: float = 0.999
    ce_pairs: int = 1000
    ce_zero_tol: float = 1e-12
    ce_norm_rtol: float = 1e-9
    cl_instances: int = 100
    cl_tol: float = 1e-12
    mc_pairs: int = 100_000
    mc_z: float = 5.0
    fd_instances: int = 100
    fd_tol: float = 1e-5
    fd_epsilon: float = 1e-6
    exact_tol: float = 1e-12

    def __post_init__(self):
        LossConfig(tau=self.tau)  # validates the temperature
        for name in ("closed_form_pairs", "ce_pairs", "cl_instances", "mc_pairs", "fd_instances"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mc_pairs < 2:
            raise ValueError("mc_pairs must be >= 2 for a standard error")
        for name in ("closed_form_ratio", "ce_zero_tol", "ce_norm_rtol", "cl_tol", "mc_z", "fd_tol", "fd_epsilon", "exact_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class TheoremResult:
    name: str
    statement: str
    passed: bool
    measured: dict[str, float]
    tolerance: dict[str, float]
    seconds: float = 0.0
    error: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.measured = {k: float(v) for k, v in self.measured.items()}
        self.tolerance = {k: float(v) for k, v in self.tolerance.items()}


@dataclass
class SuiteReport:
    config: SuiteConfig
    results: list[TheoremResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def to_dict(self) -> dict[str, Any]:
        return {"config": asdict(self.config), "passed": self.passed, "results": [asdict(r) for r in self.results]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [("theorem", "status", "measured", "tolerance", "seconds")]
        for r in self.results:
            meas = ", ".join(f"{k}={v:.3g}" for k, v in r.measured.items()) or r.error
            tol = ", ".join(f"{k}={v:.3g}" for k, v in r.tolerance.items())
            rows.append((r.name, "PASS" if r.passed else "FAIL", meas, tol, f"{r.seconds:.2f}"))
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


# -- individual checks ----------------------------------------------------------------


def _full_cov_spec() -> FeatureModelSpec:
    """A binary spec with correlated (non-isotropic) block covariances."""
    layout = BlockLayout(3, 2, 2)
    s1 = np.array([[1.5, 0.4, -0.2], [0.4, 1.0, 0.3], [-0.2, 0.3, 0.8]])
    s2 = np.array([[2.0, -0.5], [-0.5, 1.5]])
    s3 = np.array([[3.0, 0.4], [0.4, 0.8]])
    return FeatureModelSpec(layout, [0.9, -0.4, 0.6], [0.7, 0.2], [0.5, -0.3], s1, s2, s3)


def closed_form_population(cfg: SuiteConfig) -> TheoremResult:
    worst_solve = worst_ctx = worst_cos = 0.0
    for spec in (canonical_spec(), _full_cov_spec()):
        rep = population_cad_weights(spec)
        solved = solve_least_squares(population_cad_moments(spec))
        worst_solve = max(worst_solve, float(np.max(np.abs(solved - rep.w)) / np.max(np.abs(rep.w))))
        solved_rep = weight_report(solved, spec)
        _, n2, ns = solved_rep.block_norms
        worst_ctx = max(worst_ctx, (n2 + ns) / solved_rep.block_norms[0])
        worst_cos = max(worst_cos, 1.0 - solved_rep.direction_cosine_r1)
    tol = cfg.exact_tol
    return TheoremResult(
        "closed_form_population",
        "population least squares on pooled CAD puts zero weight on unedited blocks; r1 weights are parallel to Sigma_r1^-1 mu_r1",
        worst_solve <= tol and worst_ctx <= tol and worst_cos <= tol,
        {"solver_vs_formula": worst_solve, "context_ratio": worst_ctx, "one_minus_cosine": worst_cos},
        {"all": tol},
    )


def closed_form_empirical(cfg: SuiteConfig) -> TheoremResult:
    spec = canonical_spec()
    ds = generate_paircad(spec, cfg.closed_form_pairs, 1, "exact_opposite", cfg.seed)
    rep = weight_report(empirical_weights(ds), spec)
    n1, n2, ns = rep.block_norms
    ratio = max(n2, ns) / n1
    return TheoremResult(
        "closed_form_empirical",
        f"empirical least squares on {cfg.closed_form_pairs} exact-opposite pairs concentrates on r1",
        ratio <= cfg.closed_form_ratio and rep.direction_cosine_r1 >= cfg.closed_form_cosine,
        {"max_context_ratio": ratio, "cosine_r1": rep.direction_cosine_r1},
        {"max_context_ratio": cfg.closed_form_ratio, "min_cosine_r1": cfg.closed_form_cosine},
    )


def _random_pair(rng, layout: BlockLayout):
    x_o = rng.standard_normal(layout.m)
    x_c = x_o.copy()
    x_c[layout.slices()["r1"]] *= -1.0
    return x_o, x_c


def ce_pair_cancellation(cfg: SuiteConfig) -> TheoremResult:
    rng = make_rng(cfg.seed, "theorem", "ce_pair_cancellation")
    worst = 0.0
    for _ in range(cfg.ce_pairs):
        layout = BlockLayout(*(int(v) for v in rng.integers(1, 4, size=3)))
        x_o, x_c = _random_pair(rng, layout)
        W = rng.standard_normal((layout.m, 2))
        W[layout.dim_r1 :] = 0.0  # context blocks add nothing to the logits
        g = ce_pair_gradient(x_o, x_c, W, layout, label_o=int(rng.integers(2)))
        worst = max(worst, g.unedited_max_abs)
    return TheoremResult(
        "ce_pair_cancellation",
        "with zero context-block weights the summed CE pair gradient vanishes on unedited rows",
        worst <= cfg.ce_zero_tol,
        {"max_abs_unedited": worst},
        {"max_abs_unedited": cfg.ce_zero_tol},
    )


def ce_pair_norm(cfg: SuiteConfig) -> TheoremResult:
    rng = make_rng(cfg.seed, "theorem", "ce_pair_norm")
    worst = 0.0
    for _ in range(cfg.ce_pairs):
        layout = BlockLayout(*(int(v) for v in rng.integers(1, 4, size=3)))
        x_o, x_c = _random_pair(rng, layout)
        W = rng.standard_normal((layout.m, 2))
        g = ce_pair_gradient(x_o, x_c, W, layout, label_o=int(rng.integers(2)))
        if g.predicted_unedited_norm == 0.0:
            err = g.unedited_norm
        else:
            err = abs(g.unedited_norm - g.predicted_unedited_norm) / g.predicted_unedited_norm
        worst = max(worst, err)
    return TheoremResult(
        "ce_pair_norm",
        "unedited-row gradient norm equals |y_o - y_c| * sqrt(2) * ||(h_r2, h_s)||",
        worst <= cfg.ce_norm_rtol,
        {"max_rel_err": worst},
        {"max_rel_err": cfg.ce_norm_rtol},
    )


def cl_pair_gradient(cfg: SuiteConfig) -> TheoremResult:
    rng = make_rng(cfg.seed, "theorem", "cl_pair_gradient")
    loss_cfg = LossConfig(lam=1.0, tau=cfg.tau, similarity="dot", no_positive_policy="repulsion_only")
    worst_full = worst_branch = 0.0
    for _ in range(cfg.cl_instances):
        layout = BlockLayout(*(int(v) for v in rng.integers(1, 4, size=3)))
        d = int(rng.integers(1, 6))
        x_o, x_c = _random_pair(rng, layout)
        X = np.stack([x_o, x_c])
        W = rng.standard_normal((layout.m, d))
        labels = np.array([0, 1]) if rng.integers(2) else np.array([1, 0])
        target = (np.outer(x_o, x_c) + np.outer(x_c, x_o)) @ W / cfg.tau
        _, dZ = cl_loss_and_grad(X @ W, labels, loss_cfg)
        scale = max(1.0, float(np.max(np.abs(target))))
        worst_full = max(worst_full, float(np.max(np.abs(X.T @ dZ - target))) / scale)
        branch = cl_grad_negative_branch(X, W, labels, loss_cfg, 0, 1)
        worst_branch = max(worst_branch, float(np.max(np.abs(branch - target))) / scale)
    tol = cfg.cl_tol
    return TheoremResult(
        "cl_pair_gradient",
        "on a pair batch (no positives, dot similarity) the CL gradient is (1/tau) A_oc W",
        worst_full <= tol and worst_branch <= tol,
        {"full_gradient_err": worst_full, "branch_err": worst_branch},
        {"max_scaled_err": tol},
    )


def zero_mean_spec() -> FeatureModelSpec:
    layout = BlockLayout(2, 2, 2)
    s1 = np.array([[1.0, 0.3], [0.3, 1.0]])
    s2 = np.array([[2.0, -0.5], [-0.5, 1.5]])
    s3 = np.array([[3.0, 0.4], [0.4, 0.8]])
    return FeatureModelSpec(layout, [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], s1, s2, s3)


def expected_pair_A_zero_mean(cfg: SuiteConfig) -> TheoremResult:
    rep = expected_pair_A(zero_mean_spec(), cfg.mc_pairs, seed=cfg.seed)
    z = rep.max_z_score("zero_mean")
    return TheoremResult(
        "expected_pair_A_zero_mean",
        "Monte-Carlo E[A_oc] over zero-mean pairs equals 2 diag(-Sigma_r1, Sigma_r2, Sigma_s)",
        z <= cfg.mc_z,
        {"max_z": z, "max_abs_dev": float(np.max(np.abs(rep.mean - rep.zero_mean_form)))},
        {"max_z": cfg.mc_z},
    )


def expected_pair_A_with_means(cfg: SuiteConfig) -> TheoremResult:
    rep = expected_pair_A(canonical_spec(), cfg.mc_pairs, seed=cfg.seed)
    z = rep.max_z_score("exact")
    return TheoremResult(
        "expected_pair_A_with_means",
        "with non-zero block means E[A_oc] picks up the mu mu^T corrections and the r2-s cross block",
        z <= cfg.mc_z,
        {"max_z": z, "max_z_zero_mean_form": rep.max_z_score("zero_mean")},
        {"max_z": cfg.mc_z},
    )


def sigmoid_pair(cfg: SuiteConfig) -> TheoremResult:
    g_r, g_c = sigmoid_pair_gradient(2.0, 3.0, 0.0, 0.0)
    origin_err = abs(g_r + 2.0) + abs(g_c)
    rng = make_rng(cfg.seed, "theorem", "sigmoid_pair")
    fd_err = 0.0
    eps = cfg.fd_epsilon
    for _ in range(100):
        x_r, x_c, w_r, w_c = rng.standard_normal(4)

        def loss(a, b):
            zx, zc = a * x_r + b * x_c, -a * x_r + b * x_c
            return np.logaddexp(0.0, -zx) + np.logaddexp(0.0, zc)

        a_r, a_c = sigmoid_pair_gradient(x_r, x_c, w_r, w_c)
        n_r = (loss(w_r + eps, w_c) - loss(w_r - eps, w_c)) / (2 * eps)
        n_c = (loss(w_r, w_c + eps) - loss(w_r, w_c - eps)) / (2 * eps)
        fd_err = max(fd_err, abs(a_r - n_r) / max(1.0, abs(a_r)), abs(a_c - n_c) / max(1.0, abs(a_c)))
    path = sigmoid_pair_trajectory(2.0, 3.0, steps=100, lr=0.1)
    drift = float(np.max(np.abs(path[:, 1])))
    monotone = bool(np.all(np.diff(np.abs(path[:, 0])) > 0))
    return TheoremResult(
        "sigmoid_pair",
        "toy sigmoid pair: context gradient vanishes on the symmetric path while |w_r| grows",
        origin_err == 0.0 and fd_err <= cfg.fd_tol and drift <= cfg.exact_tol and monotone,
        {"origin_err": origin_err, "fd_err": fd_err, "w_c_drift": drift, "w_r_monotone": float(monotone)},
        {"origin_err": 0.0, "fd_err": cfg.fd_tol, "w_c_drift": cfg.exact_tol},
    )


GRADCHECK_CASES: dict[str, dict[str, Any]] = {
    "ce": {"lam": 0.0},
    "cl_cosine_repulsion": {"lam": 1.0, "similarity": "cosine", "no_positive_policy": "repulsion_only"},
    "cl_cosine_skip": {"lam": 1.0, "similarity": "cosine", "no_positive_policy": "skip_anchor"},
    "cl_dot_repulsion": {"lam": 1.0, "similarity": "dot", "no_positive_policy": "repulsion_only"},
    "cl_dot_skip": {"lam": 1.0, "similarity": "dot", "no_positive_policy": "skip_anchor"},
    "combined_cosine": {"lam": 0.6, "similarity": "cosine"},
    "combined_dot": {"lam": 0.6, "similarity": "dot"},
}


def random_instance(rng: np.random.Generator, with_bias: bool = False):
    """Random (model, X, labels) with n <= 16, m <= 10, d <= 6, K in {2, 3}; at least two labels and one positive pair present."""
    n = int(rng.integers(3, 17))
    m = int(rng.integers(2, 11))
    d = int(rng.integers(2, 7))
    K = int(rng.integers(2, 4))
    X = rng.standard_normal((n, m))
    labels = rng.integers(0, K, size=n)
    labels[:2] = rng.permutation(K)[:2]
    labels[2] = labels[0]
    model = LinearModel(
        0.5 * rng.standard_normal((m, d)),
        0.5 * rng.standard_normal((d, K)),
        0.1 * rng.standard_normal(K) if with_bias else None,
    )
    return model, X, labels


def gradcheck(cfg: SuiteConfig, cases: dict[str, dict[str, Any]] | None = None) -> dict[str, float]:
    """Worst finite-difference relative error per loss configuration."""
    cases = GRADCHECK_CASES if cases is None else cases
    out = {}
    for name, kw in cases.items():
        rng = make_rng(cfg.seed, "gradcheck", name)
        loss_cfg = LossConfig(tau=cfg.tau, **kw)
        worst = 0.0
        for i in range(cfg.fd_instances):
            model, X, labels = random_instance(rng, with_bias=bool(i % 2))
            objective = ce_objective() if loss_cfg.lam == 0.0 else None
            err = finite_diff_check(model, X, labels, loss_cfg, cfg.fd_epsilon, objective=objective)
            worst = max(worst, err)
        out[name] = worst
    return out


def finite_differences(cfg: SuiteConfig) -> TheoremResult:
    errs = gradcheck(cfg)
    return TheoremResult(
        "finite_differences",
        "analytic CE, CL and combined gradients agree with central differences",
        max(errs.values()) <= cfg.fd_tol,
        errs,
        {"max_rel_err": cfg.fd_tol},
    )


THEOREMS: dict[str, Callable[[SuiteConfig], TheoremResult]] = {
    "closed_form_population": closed_form_population,
    "closed_form_empirical": closed_form_empirical,
    "ce_pair_cancellation": ce_pair_cancellation,
    "ce_pair_norm": ce_pair_norm,
    "cl_pair_gradient": cl_pair_gradient,
    "expected_pair_A_zero_mean": expected_pair_A_zero_mean,
    "expected_pair_A_with_means": expected_pair_A_with_means,
    "sigmoid_pair": sigmoid_pair,
    "finite_differences": finite_differences,
}


def run_suite(cfg: SuiteConfig | None = None, only: list[str] | None = None) -> SuiteReport:
    cfg = cfg or SuiteConfig()
    names = list(THEOREMS) if not only else only
    unknown = [n for n in names if n not in THEOREMS]
    if unknown:
        raise KeyError(f"unknown theorem(s) {unknown}; available {list(THEOREMS)}")
    report = SuiteReport(cfg)
    for name in names:
        t0 = time.perf_counter()
        try:
            res = THEOREMS[name](cfg)
        except Exception as err:  # a crashing check is a failed check, not a crashed suite
            res = TheoremResult(name, "", False, {}, {}, error=f"{type(err).__name__}: {err}")
        res.seconds = time.perf_counter() - t0
        report.results.append(res)
    return report
