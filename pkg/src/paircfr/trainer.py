"""Linear encoder/head models and their mini-batch training loop.

The model is ``logits = U^T (W^T x)``: ``W`` (m x d) plays the role of the
sentence encoder and ``z = W^T x`` the pooled embedding, ``U`` (d x K) the
classification head.  Training minimises ``lam * CL + (1 - lam) * CE`` with
SGD or an AdamW-style optimiser, linear warmup, and early stopping on the
validation loss.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._rng import make_rng
from .datasets import BlockLayout, PairedDataset
from .losses import GradReport, LossConfig, LossError, ce_only_loss_and_grad, combined_loss_and_grad, model_forward

STRATEGIES = ("paircad", "shuffcad")
OPTIMIZERS = ("sgd", "adamw")
SCHEDULES = ("linear", "constant")


class TrainingError(RuntimeError):
    pass


@dataclass
class LinearModel:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray | None = None
    identity_encoder: bool = False
    layout: BlockLayout | None = None
    init: dict = field(default_factory=dict)

    def __post_init__(self):
        m, d = self.W.shape
        if self.U.shape[0] != d:
            raise ValueError(f"head rows {self.U.shape[0]} != embedding dim {d}")
        if self.identity_encoder and (m != d or not np.array_equal(self.W, np.eye(m))):
            raise ValueError("identity encoder requires W == I (d == m)")
        if self.layout is not None and self.layout.m != m:
            raise ValueError(f"layout m={self.layout.m} does not match W rows {m}")
        if self.b is not None and self.b.shape != (self.U.shape[1],):
            raise ValueError("bias length must equal the number of classes")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.W.shape[0], self.W.shape[1], self.U.shape[1])

    def params(self) -> dict[str, np.ndarray]:
        p = {"U": self.U}
        if not self.identity_encoder:
            p["W"] = self.W
        if self.b is not None:
            p["b"] = self.b
        return p

    def copy(self) -> "LinearModel":
        return copy.deepcopy(self)

    def discriminant(self) -> np.ndarray:
        """Feature-space direction ``W (U[:, 1] - U[:, 0])`` of a binary model."""
        return self.W @ (self.U[:, 1] - self.U[:, 0])

    def to_tsv(self, path: str | Path) -> None:
        """Plain-text snapshot: a ``name rows cols`` line followed by the rows of each parameter."""
        lines = [f"#linear-model\tidentity_encoder={int(self.identity_encoder)}\tlayout={json.dumps(self.layout.to_dict() if self.layout else None)}"]
        for name, arr in (("W", self.W), ("U", self.U), ("b", self.b)):
            if arr is None:
                continue
            a = np.atleast_2d(arr)
            lines.append(f"{name}\t{a.shape[0]}\t{a.shape[1]}")
            lines.extend("\t".join(repr(float(v)) for v in row) for row in a)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_tsv(cls, path: str | Path) -> "LinearModel":
        lines = Path(path).read_text().splitlines()
        head = dict(kv.split("=", 1) for kv in lines[0].split("\t")[1:])
        arrays: dict[str, np.ndarray] = {}
        i = 1
        while i < len(lines):
            name, r, c = lines[i].split("\t")
            r, c = int(r), int(c)
            rows = [[float(v) for v in lines[i + 1 + k].split("\t")] for k in range(r)]
            arrays[name] = np.array(rows, dtype=np.float64).reshape(r, c)
            i += 1 + r
        lay = json.loads(head["layout"])
        b = arrays.get("b")
        return cls(
            arrays["W"],
            arrays["U"],
            None if b is None else b.ravel(),
            identity_encoder=head["identity_encoder"] == "1",
            layout=BlockLayout(**lay) if lay else None,
        )


def init_model(
    m: int,
    d: int,
    K: int,
    init: str = "normal",
    seed: int = 0,
    sigma_init: float = 0.01,
    identity_encoder: bool = False,
    head_bias: bool = False,
    layout: BlockLayout | None = None,
) -> LinearModel:
    if min(m, d, K) < 1:
        raise ValueError("m, d and K must all be >= 1")
    if identity_encoder and d != m:
        raise ValueError("identity encoder needs d == m")
    if init == "zeros":
        W = np.zeros((m, d))
        U = np.zeros((d, K))
    elif init == "normal":
        rng = make_rng(seed, "init")
        W = sigma_init * rng.standard_normal((m, d))
        U = sigma_init * rng.standard_normal((d, K))
    else:
        raise ValueError(f"unknown init {init!r}; expected 'zeros' or 'normal'")
    if identity_encoder:
        W = np.eye(m)
    return LinearModel(
        W,
        U,
        np.zeros(K) if head_bias else None,
        identity_encoder=identity_encoder,
        layout=layout,
        init={"init": init, "seed": seed, "sigma_init": sigma_init},
    )


def forward(model: LinearModel, X) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.W.shape[0]:
        raise ValueError(f"features of shape {X.shape} do not match model input m={model.W.shape[0]}")
    return model_forward(model, X)


def make_batches(dataset: PairedDataset, strategy: str, batch_size: int, seed: int) -> list[np.ndarray]:
    """Sample positions per mini-batch.

    ``paircad`` packs whole pair groups (original + its counterfactuals) in a
    seeded random group order, never splitting a group.  ``shuffcad``
    shuffles all samples and slices fixed-size batches.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    rng = make_rng(seed, "batches", strategy)
    if strategy == "shuffcad":
        perm = rng.permutation(len(dataset))
        out = [perm[a : a + batch_size] for a in range(0, len(perm), batch_size)]
        return [b for b in out if b.size >= 2]
    if strategy != "paircad":
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    groups = dataset.groups()
    largest = max(len(g) for g in groups)
    if largest > batch_size:
        raise ValueError(f"paircad batch_size {batch_size} is smaller than a pair group of size {largest}")
    batches: list[np.ndarray] = []
    current: list[int] = []
    for gi in rng.permutation(len(groups)):
        g = groups[gi]
        if len(current) + len(g) > batch_size:
            batches.append(np.array(current, dtype=np.int64))
            current = []
        current.extend(g)
    if current:
        batches.append(np.array(current, dtype=np.int64))
    return batches


def is_colocated(dataset: PairedDataset, batch: np.ndarray) -> bool:
    """True when every sample's whole pair group lies inside ``batch``."""
    members = set(int(i) for i in batch)
    for pid in {int(dataset.pair_ids[i]) for i in batch}:
        o, cfs = dataset.pair_index[pid]
        if o not in members or any(c not in members for c in cfs):
            return False
    return True


# -- optimisers ----------------------------------------------------------------


class SGD:
    """``v <- momentum * v + g``; ``theta <- theta - lr * v``."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        lr = self.lr * lr_scale
        for k, g in grads.items():
            if self.momentum:
                v = self.velocity.get(k)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[k] = v
                params[k] -= lr * v
            else:
                params[k] -= lr * g


class AdamW:
    """Adam moments with bias correction plus decoupled weight decay."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr_scale: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_scale
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            if self.weight_decay:
                params[k] -= lr * self.weight_decay * params[k]
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 16
    strategy: str = "paircad"
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.05
    schedule: str = "linear"
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(self.lr, self.momentum)
        return AdamW(self.lr, self.betas, self.eps, self.weight_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(loss=loss, **d)


def lr_scale(step: int, total_steps: int, warmup_ratio: float, schedule: str = "linear") -> float:
    """Multiplier on the base learning rate at optimiser step ``step`` (0-based)."""
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return (step + 1) / warmup
    if schedule == "constant":
        return 1.0
    return max(0.0, (total_steps - step) / max(1, total_steps - warmup))


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    valid_accuracy: list[float] = field(default_factory=list)
    stopping_epoch: int = 0
    best_epoch: int = 0
    seed_chain: list[int] = field(default_factory=list)
    final_model: LinearModel | None = None

    def to_dict(self) -> dict:
        d = {
            "train_loss": self.train_loss,
            "valid_loss": self.valid_loss,
            "valid_accuracy": self.valid_accuracy,
            "stopping_epoch": self.stopping_epoch,
            "best_epoch": self.best_epoch,
            "seed_chain": self.seed_chain,
        }
        if self.final_model is not None:
            d["final_model"] = {k: v.tolist() for k, v in (("W", self.final_model.W), ("U", self.final_model.U))}
        return d


LossFn = Callable[[LinearModel, np.ndarray, np.ndarray], "tuple[float, GradReport]"]


def _objective(cfg: TrainConfig, layout) -> LossFn:
    def fn(model, X, labels):
        try:
            return combined_loss_and_grad(model, X, labels, cfg.loss, layout)
        except LossError as err:
            # batches without contrastive structure (e.g. one lone sample after
            # neutral exclusion) fall back to the CE term alone
            if "CL undefined" not in str(err) or cfg.loss.lam == 1.0:
                raise
            loss, rep = ce_only_loss_and_grad(model, X, labels, layout)
            w = 1.0 - cfg.loss.lam
            return w * loss, GradReport(
                None if rep.grad_encoder is None else w * rep.grad_encoder,
                w * rep.grad_head,
                None if rep.grad_bias is None else w * rep.grad_bias,
            )

    return fn


def ce_objective(layout=None) -> LossFn:
    return lambda model, X, labels: ce_only_loss_and_grad(model, X, labels, layout)


def _grads(model: LinearModel, rep: GradReport) -> dict[str, np.ndarray]:
    g = {"U": rep.grad_head}
    if not model.identity_encoder:
        g["W"] = rep.grad_encoder
    if model.b is not None:
        g["b"] = rep.grad_bias
    return g


def dataset_loss(model: LinearModel, dataset: PairedDataset, cfg: TrainConfig, objective: LossFn | None = None) -> tuple[float, float]:
    """Mean objective over fixed-seed validation batches, and argmax accuracy."""
    objective = objective or _objective(cfg, dataset.layout)
    batches = make_batches(dataset, cfg.strategy, max(cfg.batch_size, _largest_group(dataset)), seed=cfg.seed)
    losses = [objective(model, dataset.x[b], dataset.labels[b])[0] for b in batches]
    _, logits = forward(model, dataset.x)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return float(np.mean(losses)), acc


def _largest_group(dataset: PairedDataset) -> int:
    return max(len(g) for g in dataset.groups())


def train(
    model: LinearModel,
    train_set: PairedDataset,
    valid_set: PairedDataset,
    cfg: TrainConfig,
    objective: LossFn | None = None,
) -> tuple[LinearModel, TrainHistory]:
    """Train a copy of ``model``; return the lowest-validation-loss snapshot and the history."""
    if len(train_set) == 0 or len(valid_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    objective = objective or _objective(cfg, train_set.layout)
    model = model.copy()
    params = model.params()
    opt = cfg.make_optimizer()
    hist = TrainHistory()

    epoch_seeds = [int(s) for s in make_rng(cfg.seed, "epochs").integers(0, 2**31 - 1, size=cfg.max_epochs)]
    steps_per_epoch = len(make_batches(train_set, cfg.strategy, cfg.batch_size, epoch_seeds[0]))
    total_steps = steps_per_epoch * cfg.max_epochs
    step = 0
    best_loss = math.inf
    best = model.copy()
    wait = 0

    for epoch in range(cfg.max_epochs):
        hist.seed_chain.append(epoch_seeds[epoch])
        batch_losses = []
        for bi, b in enumerate(make_batches(train_set, cfg.strategy, cfg.batch_size, epoch_seeds[epoch])):
            # divergence is reported below as a TrainingError, not as numpy warnings
            with np.errstate(over="ignore", invalid="ignore"):
                loss, rep = objective(model, train_set.x[b], train_set.labels[b])
            grads = _grads(model, rep)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                norms = {k: float(np.linalg.norm(v)) for k, v in params.items()}
                raise TrainingError(f"non-finite loss/gradient at epoch {epoch + 1}, batch {bi}; parameter norms {norms}")
            opt.step(params, grads, lr_scale(step, total_steps, cfg.warmup_ratio, cfg.schedule))
            step += 1
            batch_losses.append(loss)
        hist.train_loss.append(float(np.mean(batch_losses)))
        v_loss, v_acc = dataset_loss(model, valid_set, cfg, objective)
        hist.valid_loss.append(v_loss)
        hist.valid_accuracy.append(v_acc)
        hist.stopping_epoch = epoch + 1
        if v_loss < best_loss:
            best_loss = v_loss
            best = model.copy()
            hist.best_epoch = epoch + 1
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    hist.final_model = model
    return best, hist


def finite_diff_check(
    model: LinearModel,
    X,
    labels,
    loss_cfg: LossConfig | None = None,
    epsilon: float = 1e-6,
    objective: LossFn | None = None,
    max_coords: int = 5000,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error uses ``max(1, |analytic|)`` as denominator.  Models with
    more than ``max_coords`` parameters are checked on a random subset of
    ``max(200, ...)`` coordinates.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if objective is None:
        if loss_cfg is None:
            raise ValueError("need a loss config or an objective")
        objective = lambda mdl, xx, yy: combined_loss_and_grad(mdl, xx, yy, loss_cfg)  # noqa: E731
    work = model.copy()
    params = work.params()
    _, rep = objective(work, X, labels)
    analytic = _grads(work, rep)
    coords = [(k, idx) for k, p in params.items() for idx in np.ndindex(p.shape)]
    if len(coords) > max_coords:
        pick = make_rng(seed, "fd").choice(len(coords), size=max(200, max_coords // 10), replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for k, idx in coords:
        p = params[k]
        orig = p[idx]
        p[idx] = orig + epsilon
        up = objective(work, X, labels)[0]
        p[idx] = orig - epsilon
        down = objective(work, X, labels)[0]
        p[idx] = orig
        num = (up - down) / (2 * epsilon)
        a = analytic[k][idx]
        worst = max(worst, abs(num - a) / max(1.0, abs(a)))
    return worst
