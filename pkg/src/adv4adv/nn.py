"""Feature extractor, class predictor and the two class-wise discriminator banks.

Architectures are described as flat layer tables so the parameter tally in the
README can be recomputed from :data:`ARCHITECTURES` alone.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ARCHITECTURES",
    "DISC_HIDDEN",
    "Embedding",
    "ModelParams",
    "OptimizerState",
    "CheckpointError",
    "init_params",
    "feature_forward",
    "predictor_forward",
    "discriminator_forward",
    "adam_init",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "parameter_tally",
]

FEATURE = "phi"
LOGIT = "lambda"
DISC_HIDDEN = 128

# ("conv", out_channels, kernel) | ("pool", k) | ("flatten",) | ("linear", out)
# every conv/linear in the extractor is followed by relu
ARCHITECTURES: dict[str, dict] = {
    "fmnist-small": {
        "input": (1, 28, 28),
        "layers": [
            ("conv", 32, 3),
            ("conv", 32, 3),
            ("pool", 2),
            ("conv", 64, 3),
            ("pool", 2),
            ("flatten",),
            ("linear", 128),
        ],
    },
    # fast stand-in for unit tests and smoke runs
    "tiny": {
        "input": (1, 12, 12),
        "layers": [
            ("conv", 4, 3),
            ("pool", 2),
            ("flatten",),
            ("linear", 16),
        ],
    },
    "cifar-small": {
        "input": (3, 32, 32),
        "layers": [
            ("conv", 32, 3),
            ("conv", 32, 3),
            ("pool", 2),
            ("conv", 64, 3),
            ("pool", 2),
            ("conv", 64, 3),
            ("pool", 2),
            ("flatten",),
            ("linear", 128),
        ],
    },
}


class CheckpointError(ValueError):
    pass


@dataclass
class Embedding:
    space: str
    vectors: Tensor

    def __post_init__(self):
        if self.space not in (FEATURE, LOGIT):
            raise ValueError(f"unknown embedding space {self.space!r}")


@dataclass
class ModelParams:
    arch: str
    K: int
    theta_f: dict[str, Tensor]
    theta_p: dict[str, Tensor]
    theta_d: list[dict[str, Tensor]]
    theta_d_bar: list[dict[str, Tensor]]

    def __post_init__(self):
        if len(self.theta_d) != self.K or len(self.theta_d_bar) != self.K:
            raise ValueError("discriminator banks must hold exactly K members")

    @property
    def feature_dim(self) -> int:
        return _layer_shapes(self.arch)[-1][0]

    def groups(self) -> dict[str, dict[str, Tensor]]:
        """Parameter groups keyed by the prefix used in checkpoints."""
        out = {"f": self.theta_f, "p": self.theta_p}
        for k, d in enumerate(self.theta_d):
            out[f"d{k}"] = d
        for k, d in enumerate(self.theta_d_bar):
            out[f"dbar{k}"] = d
        return out

    def named(self, *kinds: str) -> dict[str, Tensor]:
        """Flat ``{"f.conv0.w": tensor, ...}`` view, optionally restricted to kinds f/p/d/dbar."""
        out = {}
        for g, params in self.groups().items():
            kind = "dbar" if g.startswith("dbar") else g[0]
            if kinds and kind not in kinds:
                continue
            for name, t in params.items():
                out[f"{g}.{name}"] = t
        return out

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.named().values())

    def count(self) -> int:
        return sum(t.size for t in self)

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def zero_grad(self) -> None:
        for t in self:
            t.zero_grad()

    def logits(self, x: Tensor) -> Tensor:
        """Class logits for images ``x``; the callable the attacks differentiate."""
        return predictor_forward(self, feature_forward(self, x))[0].vectors


def _layer_shapes(arch: str) -> list[tuple]:
    """Output shape after each extractor layer."""
    spec = ARCHITECTURES[arch]
    shape = spec["input"]
    shapes = []
    for layer in spec["layers"]:
        if layer[0] == "conv":
            c, h, w = shape
            shape = (layer[1], h - layer[2] + 1, w - layer[2] + 1)
        elif layer[0] == "pool":
            c, h, w = shape
            shape = (c, h // layer[1], w // layer[1])
        elif layer[0] == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer[0] == "linear":
            shape = (layer[1],)
        shapes.append(shape)
    return shapes


def parameter_tally(arch: str, K: int) -> dict[str, int]:
    """Per-layer parameter counts for the README table."""
    spec = ARCHITECTURES[arch]
    tally = {}
    shape = spec["input"]
    for i, (layer, out) in enumerate(zip(spec["layers"], _layer_shapes(arch))):
        if layer[0] == "conv":
            tally[f"f.conv{i}"] = layer[1] * shape[0] * layer[2] ** 2 + layer[1]
        elif layer[0] == "linear":
            tally[f"f.linear{i}"] = shape[0] * layer[1] + layer[1]
        shape = out
    feat = shape[0]
    tally["p.linear"] = feat * K + K
    tally["d (each of K)"] = feat * DISC_HIDDEN + DISC_HIDDEN + DISC_HIDDEN + 1
    tally["dbar (each of K)"] = K * DISC_HIDDEN + DISC_HIDDEN + DISC_HIDDEN + 1
    tally["total"] = (
        sum(v for k, v in tally.items() if k.startswith(("f.", "p.")))
        + K * tally["d (each of K)"]
        + K * tally["dbar (each of K)"]
    )
    return tally


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _bias(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _mlp(rng, d_in: int) -> dict[str, Tensor]:
    return {
        "w0": _he_uniform(rng, (d_in, DISC_HIDDEN), d_in),
        "b0": _bias(DISC_HIDDEN),
        "w1": _he_uniform(rng, (DISC_HIDDEN, 1), DISC_HIDDEN),
        "b1": _bias(1),
    }


def init_params(arch: str, K: int, seed: int) -> ModelParams:
    """He-uniform weights, zero biases, drawn in a fixed order from ``seed``."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    rng = np.random.default_rng(seed)
    spec = ARCHITECTURES[arch]
    theta_f = {}
    shape = spec["input"]
    for i, (layer, out) in enumerate(zip(spec["layers"], _layer_shapes(arch))):
        if layer[0] == "conv":
            fan_in = shape[0] * layer[2] ** 2
            theta_f[f"conv{i}.w"] = _he_uniform(rng, (layer[1], shape[0], layer[2], layer[2]), fan_in)
            theta_f[f"conv{i}.b"] = _bias(layer[1])
        elif layer[0] == "linear":
            theta_f[f"linear{i}.w"] = _he_uniform(rng, (shape[0], layer[1]), shape[0])
            theta_f[f"linear{i}.b"] = _bias(layer[1])
        shape = out
    feat = shape[0]
    theta_p = {"w": _he_uniform(rng, (feat, K), feat), "b": _bias(K)}
    theta_d = [_mlp(rng, feat) for _ in range(K)]
    theta_d_bar = [_mlp(rng, K) for _ in range(K)]
    return ModelParams(arch, K, theta_f, theta_p, theta_d, theta_d_bar)


def feature_forward(params: ModelParams, x: Tensor) -> Embedding:
    spec = ARCHITECTURES[params.arch]
    if x.ndim != 4 or x.shape[1:] != spec["input"]:
        raise T.ShapeError(f"feature_forward: {params.arch} expects [B, {spec['input']}], got {x.shape}")
    h = x
    for i, layer in enumerate(spec["layers"]):
        if layer[0] == "conv":
            h = T.relu(T.conv2d(h, params.theta_f[f"conv{i}.w"], params.theta_f[f"conv{i}.b"]))
        elif layer[0] == "pool":
            h = T.max_pool2d(h, layer[1])
        elif layer[0] == "flatten":
            h = T.flatten(h)
        elif layer[0] == "linear":
            h = T.relu(T.matmul(h, params.theta_f[f"linear{i}.w"]) + params.theta_f[f"linear{i}.b"])
    return Embedding(FEATURE, h)


def predictor_forward(params: ModelParams, phi: Embedding) -> tuple[Embedding, np.ndarray]:
    """Logit embedding plus softmax probabilities (probabilities are off-tape)."""
    if phi.space != FEATURE:
        raise ValueError(f"predictor expects a feature embedding, got {phi.space!r}")
    w = params.theta_p["w"]
    if phi.vectors.ndim != 2 or phi.vectors.shape[1] != w.shape[0]:
        raise T.ShapeError(f"predictor_forward: feature dim {phi.vectors.shape} vs weight {w.shape}")
    logits = T.matmul(phi.vectors, w) + params.theta_p["b"]
    return Embedding(LOGIT, logits), T.softmax(logits.data)


def discriminator_forward(params_k: dict[str, Tensor], e: Embedding, lam: float, space: str) -> Tensor:
    """Domain logit per row of ``e``; ``space`` names the bank ``params_k`` belongs to."""
    if e.space != space:
        raise ValueError(f"discriminator for {space!r} space received a {e.space!r} embedding")
    h = T.grl(e.vectors, lam)
    h = T.relu(T.matmul(h, params_k["w0"]) + params_k["b0"])
    out = T.matmul(h, params_k["w1"]) + params_k["b1"]
    return T.reshape(out, (out.shape[0],))


# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: OptimizerState, params: dict[str, Tensor]) -> None:
    """One bias-corrected Adam update of ``params`` in place from their ``.grad``."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    dt = T.get_dtype()
    b1, b2 = dt(state.beta1), dt(state.beta2)
    c1 = dt(1 - state.beta1 ** t)
    c2 = dt(1 - state.beta2 ** t)
    lr, eps = dt(state.lr), dt(state.eps)
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# checkpoints

_CKPT_MAGIC = b"A4ACKPT1"
_OPT_PREFIX = "__opt__/"
_META_PREFIX = "__meta__/"


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f4")
    head = struct.pack("<Q", len(raw)) + raw + struct.pack("<Q", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def save_checkpoint(path, params: ModelParams, opt: OptimizerState | None = None) -> None:
    """Write params (and optionally optimizer state) in the A4ACKPT1 container.

    Layout, little-endian: magic, u64 count, then per tensor u64 name length,
    UTF-8 name, u64 rank, u64 dims, raw f32 data.
    """
    entries = [(f"{_META_PREFIX}arch/{params.arch}", np.array(params.K, dtype=np.float32))]
    entries += [(name, t.data) for name, t in params.named().items()]
    if opt is not None:
        scalars = {"step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
        entries += [(f"{_OPT_PREFIX}{k}", np.array(v, dtype=np.float32)) for k, v in scalars.items()]
        entries += [(f"{_OPT_PREFIX}m/{k}", v) for k, v in sorted(opt.m.items())]
        entries += [(f"{_OPT_PREFIX}v/{k}", v) for k, v in sorted(opt.v.items())]
    blob = _CKPT_MAGIC + struct.pack("<Q", len(entries))
    blob += b"".join(_pack_tensor(n, a) for n, a in entries)
    Path(path).write_bytes(blob)


def _read_entries(blob: bytes) -> list[tuple[str, np.ndarray]]:
    if blob[:8] != _CKPT_MAGIC:
        raise CheckpointError("not an A4ACKPT1 checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        out.append((name, arr))
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def load_checkpoint(path, arch: str | None = None) -> tuple[ModelParams, OptimizerState | None]:
    entries = _read_entries(Path(path).read_bytes())
    meta = [n for n, _ in entries if n.startswith(f"{_META_PREFIX}arch/")]
    if len(meta) != 1:
        raise CheckpointError("checkpoint lacks architecture metadata")
    found_arch = meta[0].split("/", 2)[2]
    if arch is not None and arch != found_arch:
        raise CheckpointError(f"checkpoint holds a {found_arch!r} model, expected {arch!r}")
    table = dict(entries)
    K = int(table[meta[0]])
    params = init_params(found_arch, K, seed=0)
    for name, t in params.named().items():
        if name not in table:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        if table[name].shape != t.shape:
            raise CheckpointError(f"{name}: shape {table[name].shape} != architecture {t.shape}")
        t.data = table[name].copy()
    opt = None
    if f"{_OPT_PREFIX}step" in table:
        opt = OptimizerState(
            lr=float(table[f"{_OPT_PREFIX}lr"]),
            beta1=float(table[f"{_OPT_PREFIX}beta1"]),
            beta2=float(table[f"{_OPT_PREFIX}beta2"]),
            eps=float(table[f"{_OPT_PREFIX}eps"]),
            step=int(table[f"{_OPT_PREFIX}step"]),
        )
        for n, a in entries:
            if n.startswith(f"{_OPT_PREFIX}m/"):
                opt.m[n[len(_OPT_PREFIX) + 2:]] = a.copy()
            elif n.startswith(f"{_OPT_PREFIX}v/"):
                opt.v[n[len(_OPT_PREFIX) + 2:]] = a.copy()
    return params, opt
