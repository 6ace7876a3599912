"""Training pipelines: clean pretraining, NT, SAT/PAT and Adv-4-Adv(*).

The Adv-4-Adv objective is realised with gradient reversal. Each discriminator
bank is fed through ``grl(embedding, weight)`` and its BCE enters the total
with coefficient +1: the discriminators descend their own loss while the
extractor and predictor receive ``-weight`` times that gradient. A bank whose
weight is 0 is left out of the graph entirely.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .attacks import AttackConfig, craft_dataset, run_attack
from .data import Batch, Dataset, batch_indices
from .evaluation import accuracy
from .nn import FEATURE, LOGIT, ModelParams, OptimizerState
from .tensor import Tensor

__all__ = [
    "VARIANTS",
    "TrainConfig",
    "TrainState",
    "EarlyStopper",
    "TrainingDivergedError",
    "route",
    "joint_forward",
    "sat_loss",
    "adv4adv_loss",
    "pretrain_clean",
    "train",
    "LOG_FIELDS",
]

log = logging.getLogger(__name__)

VARIANTS = ("NT", "SAT", "A4A", "A4A_STAR")

# feature-space bank for fmnist / cifar100, logit-space bank for cifar10
DOMAIN_WEIGHT_PRESETS = {"fmnist": (1.0, 0.0), "cifar100": (1.0, 0.0), "cifar10": (0.0, 1.0), "svhn": (0.0, 1.0)}

LOG_FIELDS = ["phase", "epoch", "ce_clean", "ce_adv", "dom_phi", "dom_lambda", "total", "holdout_acc", "wall_time"]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "A4A"
    source_attack: AttackConfig = field(default_factory=lambda: AttackConfig("FGSM", 0.1))
    beta: float = 1.0
    gamma: float = 0.0
    classwise: bool = True
    epochs: int = 30
    pretrain_epochs: int = 5
    patience: int = 5
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    crafting_mode: str = "online"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; known: {VARIANTS}")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be >= 0")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.crafting_mode not in ("online", "static"):
            raise ValueError(f"crafting_mode must be online or static, got {self.crafting_mode!r}")

    @property
    def adversarial(self) -> bool:
        return self.variant != "NT"

    def check_trainable(self) -> None:
        """Training-time invariant. Kept out of construction so the loss can be
        evaluated at beta = gamma = 0, where it reduces to the SAT loss."""
        if self.variant in ("A4A", "A4A_STAR") and self.beta == 0 and self.gamma == 0:
            raise ValueError("Adv-4-Adv variants need beta > 0 or gamma > 0")


@dataclass
class TrainState:
    params: ModelParams
    optimizer: OptimizerState
    epoch: int = 0
    best_holdout_adv_accuracy: float = -1.0
    epochs_since_improvement: int = 0
    rng: np.random.Generator | None = None


class EarlyStopper:
    """Tracks the best holdout score; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = None
        self.since = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.since = score, epoch, 0
        else:
            self.since += 1
        return self.since >= self.patience

    @property
    def improved(self) -> bool:
        return self.since == 0


# loss construction


def route(labels: np.ndarray, K: int, classwise: bool) -> list[tuple[int, np.ndarray]]:
    """Row indices per discriminator: by true label, or everything to bank member 0."""
    labels = np.asarray(labels)
    if not classwise:
        return [(0, np.arange(len(labels)))]
    out = []
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        if len(idx):
            out.append((k, idx))
    return out


def joint_forward(params: ModelParams, clean: Batch, adv: Batch) -> tuple[nn.Embedding, nn.Embedding]:
    """One pass over the stacked [clean; adv] batch."""
    _check_aligned(clean, adv)
    x = Tensor(np.concatenate([clean.images, adv.images]))
    phi = nn.feature_forward(params, x)
    lam, _ = nn.predictor_forward(params, phi)
    return phi, lam


def _check_aligned(clean: Batch, adv: Batch) -> None:
    if len(clean) != len(adv):
        raise ValueError(f"clean batch has {len(clean)} rows, adversarial batch {len(adv)}")
    if not np.array_equal(clean.labels, adv.labels):
        raise ValueError("clean and adversarial batches carry different labels")


def _ce_halves(lam: nn.Embedding, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    b = len(labels)
    ce_clean = T.softmax_cross_entropy(T.take(lam.vectors, np.arange(b)), labels)
    ce_adv = T.softmax_cross_entropy(T.take(lam.vectors, np.arange(b, 2 * b)), labels)
    return ce_clean, ce_adv


def sat_loss(params: ModelParams, clean: Batch, adv: Batch) -> Tensor:
    phi, lam = joint_forward(params, clean, adv)
    ce_clean, ce_adv = _ce_halves(lam, clean.labels)
    return ce_clean + ce_adv


def _bank_loss(bank: list[dict], emb: nn.Embedding, space: str, weight: float,
               labels: np.ndarray, domains: np.ndarray, classwise: bool) -> Tensor:
    """Sum of per-member BCEs over routed rows, averaged over the whole stacked batch."""
    parts = []
    for k, idx in route(labels, len(bank), classwise):
        sub = nn.Embedding(space, T.take(emb.vectors, idx))
        logit = nn.discriminator_forward(bank[k], sub, weight, space)
        parts.append(T.sigmoid_bce(logit, domains[idx], reduction="sum"))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return T.scale(total, 1.0 / len(labels))


def adv4adv_loss(params: ModelParams, clean: Batch, adv: Batch, cfg: TrainConfig) -> tuple[Tensor, dict]:
    """Total training loss and its per-term breakdown.

    The breakdown holds the mean CE on each half, the mean BCE of each bank
    (0.0 for a bank that is switched off), ``total`` (the differentiated value)
    and ``objective`` = CE terms - beta*dom_phi - gamma*dom_lambda.
    """
    phi, lam = joint_forward(params, clean, adv)
    ce_clean, ce_adv = _ce_halves(lam, clean.labels)
    labels = np.concatenate([clean.labels, adv.labels])
    domains = np.concatenate([clean.domain_labels, adv.domain_labels]).astype(T.get_dtype())
    total = ce_adv if cfg.variant == "A4A_STAR" else ce_clean + ce_adv
    dom_phi = dom_lam = None
    if cfg.beta > 0:
        dom_phi = _bank_loss(params.theta_d, phi, FEATURE, cfg.beta, labels, domains, cfg.classwise)
        total = total + dom_phi
    if cfg.gamma > 0:
        dom_lam = _bank_loss(params.theta_d_bar, lam, LOGIT, cfg.gamma, labels, domains, cfg.classwise)
        total = total + dom_lam
    parts = {
        "ce_clean": ce_clean.item(),
        "ce_adv": ce_adv.item(),
        "dom_phi": dom_phi.item() if dom_phi is not None else 0.0,
        "dom_lambda": dom_lam.item() if dom_lam is not None else 0.0,
        "total": total.item(),
    }
    ce = parts["ce_adv"] + (0.0 if cfg.variant == "A4A_STAR" else parts["ce_clean"])
    parts["objective"] = ce - cfg.beta * parts["dom_phi"] - cfg.gamma * parts["dom_lambda"]
    return total, parts


# training loops


def _trainable(params: ModelParams, cfg: TrainConfig) -> dict[str, Tensor]:
    kinds = ["f", "p"]
    if cfg.variant in ("A4A", "A4A_STAR"):
        if cfg.beta > 0:
            kinds.append("d")
        if cfg.gamma > 0:
            kinds.append("dbar")
    return params.named(*kinds)


def _step(loss: Tensor, params: dict[str, Tensor], opt: OptimizerState) -> None:
    for p in params.values():
        p.zero_grad()
    T.backward(loss)
    nn.adam_step(opt, params)


def _batches(n: int, cfg: TrainConfig, epoch: int, stream: int):
    return batch_indices(n, cfg.batch_size, seed=cfg.seed + stream, epoch=epoch)


def _as_batch(ds: Dataset, idx: np.ndarray, domain: float) -> Batch:
    return Batch(ds.images[idx], ds.labels[idx], np.full(len(idx), domain, dtype=np.float32))


def pretrain_clean(params: ModelParams, train_ds: Dataset, cfg: TrainConfig,
                   log_rows: list | None = None) -> ModelParams:
    """Minimise clean cross-entropy over theta_f, theta_p for ``cfg.pretrain_epochs``."""
    params = params.copy()
    opt = nn.adam_init(cfg.lr)
    trainable = params.named("f", "p")
    for epoch in range(cfg.pretrain_epochs):
        t0 = time.perf_counter()
        losses = []
        for b, idx in enumerate(_batches(len(train_ds), cfg, epoch, stream=0)):
            x = Tensor(train_ds.images[idx])
            try:
                loss = T.softmax_cross_entropy(params.logits(x), train_ds.labels[idx])
                _step(loss, trainable, opt)
            except T.NonFiniteError as exc:
                T.active_tape().clear()
                raise TrainingDivergedError(f"pretrain epoch {epoch} batch {b}: {exc}") from exc
            losses.append(loss.item())
        if log_rows is not None:
            log_rows.append(_row("pretrain", epoch, ce_clean=float(np.mean(losses)),
                                 total=float(np.mean(losses)), wall_time=time.perf_counter() - t0))
        log.info("pretrain epoch %d: ce %.4f", epoch, np.mean(losses))
    return params


def _row(phase, epoch, ce_clean=0.0, ce_adv=0.0, dom_phi=0.0, dom_lambda=0.0, total=0.0,
         holdout_acc=float("nan"), wall_time=0.0) -> dict:
    return {
        "phase": phase, "epoch": epoch, "ce_clean": ce_clean, "ce_adv": ce_adv, "dom_phi": dom_phi,
        "dom_lambda": dom_lambda, "total": total, "holdout_acc": holdout_acc, "wall_time": wall_time,
    }


def holdout_score(params: ModelParams, holdout: Dataset, cfg: TrainConfig) -> float:
    """Clean holdout accuracy for NT, source-attack holdout accuracy otherwise."""
    if not cfg.adversarial:
        return accuracy(params, holdout)
    adv = craft_dataset(holdout, params.logits, cfg.source_attack, seed=cfg.seed + 7, batch_size=cfg.batch_size)
    return accuracy(params, adv)


def train(cfg: TrainConfig, train_ds: Dataset, holdout: Dataset, params: ModelParams | None = None,
          arch: str = "fmnist-small", log_path=None,
          evaluate: Callable[[ModelParams, Dataset, TrainConfig], float] = holdout_score,
          ) -> tuple[ModelParams, list[dict]]:
    """Pretrain (if ``cfg.pretrain_epochs``), then adapt with early stopping.

    Returns the parameters of the best holdout epoch and the per-epoch log.
    ``evaluate`` scores a parameter snapshot on the holdout.
    """
    cfg.check_trainable()
    if len(holdout) == 0:
        raise ValueError("holdout set is empty")
    if params is None:
        params = nn.init_params(arch, train_ds.K, cfg.seed)
    rows: list[dict] = _CsvLog(log_path) if log_path is not None else []
    params = pretrain_clean(params, train_ds, cfg, rows)
    state = TrainState(params, nn.adam_init(cfg.lr), rng=np.random.default_rng([cfg.seed, 1]))
    stopper = EarlyStopper(cfg.patience)
    best = params.copy()
    trainable = _trainable(state.params, cfg)
    static_adv = None
    if cfg.adversarial and cfg.crafting_mode == "static":
        static_adv = craft_dataset(train_ds, state.params.logits, cfg.source_attack, seed=cfg.seed + 3,
                                   batch_size=cfg.batch_size)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums: dict[str, list[float]] = {k: [] for k in ("ce_clean", "ce_adv", "dom_phi", "dom_lambda", "total")}
        for b, idx in enumerate(_batches(len(train_ds), cfg, epoch, stream=1)):
            clean = _as_batch(train_ds, idx, 0.0)
            try:
                if cfg.variant == "NT":
                    loss = T.softmax_cross_entropy(state.params.logits(Tensor(clean.images)), clean.labels)
                    parts = {"ce_clean": loss.item(), "total": loss.item()}
                else:
                    if static_adv is not None:
                        adv_images = static_adv.images[idx]
                    else:
                        rng = np.random.default_rng([cfg.seed, epoch, b])
                        adv_images = run_attack(state.params.logits, clean.images, clean.labels,
                                                cfg.source_attack, rng=rng)
                    adv = Batch(adv_images, clean.labels, np.ones(len(idx), dtype=np.float32))
                    if cfg.variant == "SAT":
                        phi, lam = joint_forward(state.params, clean, adv)
                        ce_c, ce_a = _ce_halves(lam, clean.labels)
                        loss = ce_c + ce_a
                        parts = {"ce_clean": ce_c.item(), "ce_adv": ce_a.item(), "total": loss.item()}
                    else:
                        loss, parts = adv4adv_loss(state.params, clean, adv, cfg)
                _step(loss, trainable, state.optimizer)
            except T.NonFiniteError as exc:
                T.active_tape().clear()
                raise TrainingDivergedError(f"{cfg.variant} epoch {epoch} batch {b}: {exc}") from exc
            for k in sums:
                sums[k].append(parts.get(k, 0.0))
        state.epoch = epoch
        score = evaluate(state.params, holdout, cfg)
        stop = stopper.update(epoch, score)
        if stopper.improved:
            best = state.params.copy()
            state.best_holdout_adv_accuracy = score
        state.epochs_since_improvement = stopper.since
        means = {k: float(np.mean(v)) for k, v in sums.items()}
        rows.append(_row("adapt", epoch, holdout_acc=score, wall_time=time.perf_counter() - t0, **means))
        log.info("%s epoch %d: total %.4f holdout %.4f", cfg.variant, epoch, means["total"], score)
        if stop:
            break
    return best, list(rows)


class _CsvLog(list):
    """Row list that also appends each row to a CSV file as it arrives."""

    def __init__(self, path):
        super().__init__()
        self.path = Path(path)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_FIELDS)

    def append(self, row: dict) -> None:
        super().append(row)
        with self.path.open("a", newline="") as fh:
            csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n").writerow(_csv_row(row))


def _csv_row(row: dict) -> dict:
    return {k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()}


def write_log(path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(_csv_row(r))
