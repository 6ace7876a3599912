"""l-infinity gradient attacks: FGSM, PGD, R+FGSM and MIM.

A *model* here is any callable mapping an image tensor [B, C, H, W] to class
logits [B, K] (``ModelParams.logits`` is the usual one). The default attack
loss is the summed cross-entropy, so each sample's input gradient is the
gradient of its own loss and is never rescaled by the batch size.

Every attack clamps its output to [0, 1] and keeps it inside the epsilon ball
around the original images.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset
from .tensor import Tensor

__all__ = [
    "AttackConfig",
    "input_gradient",
    "fgsm",
    "pgd",
    "r_fgsm",
    "mim",
    "run_attack",
    "craft_dataset",
    "DOMAIN_TAG",
]

log = logging.getLogger(__name__)

KINDS = ("FGSM", "PGD", "RFGSM", "MIM")
DOMAIN_TAG = {"FGSM": "FGSM", "PGD": "PGD", "RFGSM": "R+FGSM", "MIM": "MIM"}

LossFn = Callable[[Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "FGSM"
    epsilon: float = 0.1
    alpha: float | None = None
    steps: int = 1
    momentum_decay: float = 1.0
    random_start: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; known: {KINDS}")
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.momentum_decay < 0:
            raise ValueError(f"momentum decay must be >= 0, got {self.momentum_decay}")
        a = self.step_size
        if not 0 <= a <= self.epsilon:
            raise ValueError(f"alpha must satisfy 0 <= alpha <= epsilon, got {a} vs {self.epsilon}")

    @property
    def step_size(self) -> float:
        """Explicit alpha, else the per-kind default."""
        if self.alpha is not None:
            return self.alpha
        if self.kind == "PGD":
            return self.epsilon / 10
        if self.kind == "MIM":
            return self.epsilon / self.steps
        if self.kind == "RFGSM":
            return self.epsilon / 2
        return self.epsilon

    @property
    def name(self) -> str:
        if self.kind == "PGD":
            return f"PGD-{self.steps}"
        return DOMAIN_TAG[self.kind]

    def resolved(self) -> dict:
        d = asdict(self)
        d["alpha"] = self.step_size
        return d

    @classmethod
    def preset(cls, name: str, epsilon: float) -> "AttackConfig":
        """Named evaluation attacks: FGSM, PGD-20, PGD-40, R+FGSM, MIM."""
        if name == "FGSM":
            return cls("FGSM", epsilon)
        if name.startswith("PGD-"):
            return cls("PGD", epsilon, steps=int(name[4:]))
        if name in ("R+FGSM", "RFGSM"):
            return cls("RFGSM", epsilon)
        if name == "MIM":
            return cls("MIM", epsilon, steps=10, momentum_decay=1.0)
        raise ValueError(f"unknown attack preset {name!r}")


def _ce_loss(model) -> LossFn:
    return lambda x, y: T.softmax_cross_entropy(model(x), y, reduction="sum")


def input_gradient(model, x: np.ndarray, y: np.ndarray, loss_fn: LossFn | None = None) -> np.ndarray:
    """Gradient of the attack loss w.r.t. the input images only."""
    xt = Tensor(x, requires_grad=True)
    loss = (loss_fn or _ce_loss(model))(xt, y)
    (g,) = T.grad(loss, [xt])
    return g


def _as_float(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=T.get_dtype())
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("attack input must lie in [0, 1]")
    return x


def _project(x_new, x0, eps, dt):
    e = dt(eps)
    return np.clip(np.clip(x_new, x0 - e, x0 + e), 0, 1)


def fgsm(model, x, y, epsilon: float, loss_fn: LossFn | None = None) -> np.ndarray:
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    x = _as_float(x)
    dt = T.get_dtype()
    g = input_gradient(model, x, y, loss_fn)
    return np.clip(x + dt(epsilon) * np.sign(g), 0, 1).astype(dt)


def pgd(model, x, y, epsilon: float, alpha: float, steps: int, random_start: bool = False,
        rng: np.random.Generator | None = None, loss_fn: LossFn | None = None, callback=None) -> np.ndarray:
    """Iterated signed-gradient steps, each projected onto the epsilon ball and [0, 1].

    ``callback(i, x_i)`` sees every iterate, including the (random) start as i=0.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if alpha > epsilon and steps == 1:
        log.warning("pgd: alpha=%g exceeds epsilon=%g with a single step; the ball clip bounds it", alpha, epsilon)
    x0 = _as_float(x)
    dt = T.get_dtype()
    xa = x0
    if random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        noise = rng.uniform(-epsilon, epsilon, size=x0.shape).astype(dt)
        xa = _project(x0 + noise, x0, epsilon, dt)
    if callback:
        callback(0, xa)
    a = dt(alpha)
    for i in range(steps):
        g = input_gradient(model, xa, y, loss_fn)
        xa = _project(xa + a * np.sign(g), x0, epsilon, dt).astype(dt)
        if callback:
            callback(i + 1, xa)
    return xa


def r_fgsm(model, x, y, epsilon: float, alpha: float, rng: np.random.Generator | None = None,
           loss_fn: LossFn | None = None) -> np.ndarray:
    """Random signed Gaussian start of size alpha, then FGSM with budget epsilon - alpha.

    One standard-normal draw per pixel is consumed even when alpha == 0.
    """
    if not 0 <= alpha < epsilon and not (alpha == 0 and epsilon == 0):
        raise ValueError(f"r_fgsm needs 0 <= alpha < epsilon, got alpha={alpha}, epsilon={epsilon}")
    x0 = _as_float(x)
    dt = T.get_dtype()
    rng = rng if rng is not None else np.random.default_rng(0)
    noise = rng.standard_normal(size=x0.shape).astype(dt)
    xs = np.clip(x0 + dt(alpha) * np.sign(noise), 0, 1).astype(dt)
    g = input_gradient(model, xs, y, loss_fn)
    xa = np.clip(xs + dt(epsilon - alpha) * np.sign(g), 0, 1)
    return _project(xa, x0, epsilon, dt).astype(dt)


def mim(model, x, y, epsilon: float, alpha: float, steps: int, decay: float = 1.0,
        loss_fn: LossFn | None = None, callback=None) -> np.ndarray:
    """Momentum iterative FGSM: signed steps along the decayed sum of per-sample
    L1-normalised gradients."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x0 = _as_float(x)
    dt = T.get_dtype()
    xa = x0
    mom = np.zeros_like(x0)
    a, mu = dt(alpha), dt(decay)
    for i in range(steps):
        g = input_gradient(model, xa, y, loss_fn)
        l1 = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape((-1,) + (1,) * (g.ndim - 1))
        # an all-zero gradient contributes nothing rather than 0/0
        normed = np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
        mom = mu * mom + normed
        xa = _project(xa + a * np.sign(mom), x0, epsilon, dt).astype(dt)
        if callback:
            callback(i + 1, xa)
    return xa


def run_attack(model, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None,
               loss_fn: LossFn | None = None) -> np.ndarray:
    if cfg.kind == "FGSM":
        return fgsm(model, x, y, cfg.epsilon, loss_fn=loss_fn)
    if cfg.kind == "PGD":
        return pgd(model, x, y, cfg.epsilon, cfg.step_size, cfg.steps, cfg.random_start, rng=rng, loss_fn=loss_fn)
    if cfg.kind == "RFGSM":
        return r_fgsm(model, x, y, cfg.epsilon, cfg.step_size, rng=rng, loss_fn=loss_fn)
    return mim(model, x, y, cfg.epsilon, cfg.step_size, cfg.steps, cfg.momentum_decay, loss_fn=loss_fn)


def craft_dataset(source: Dataset, model, cfg: AttackConfig, seed: int = 0, batch_size: int = 256) -> Dataset:
    """Attack every sample of a clean dataset; labels are carried over verbatim.

    Batches are taken in dataset order and batch ``i`` draws its randomness from
    ``default_rng([seed, i])``, so the result does not depend on scheduling.
    """
    if source.domain != "clean":
        raise ValueError(f"craft_dataset expects a clean source, got domain {source.domain!r}")
    out = np.empty_like(source.images)
    for i, start in enumerate(range(0, len(source), batch_size)):
        sl = slice(start, start + batch_size)
        rng = np.random.default_rng([seed, i])
        out[sl] = run_attack(model, source.images[sl], source.labels[sl], cfg, rng=rng)
    return replace(source, images=out, domain=DOMAIN_TAG[cfg.kind])
