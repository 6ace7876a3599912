"""Independent oracles: central finite differences, a brute-force silhouette and
the attack degeneracy lattice. Used by the ``selftest`` command and the tests."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import attacks
from . import tensor as T
from .tensor import Tensor

__all__ = [
    "finite_difference",
    "max_relative_error",
    "PRIMITIVE_CASES",
    "check_primitive",
    "check_composite",
    "silhouette_bruteforce",
    "degeneracy_lattice",
    "run_selftest",
]


def finite_difference(fn: Callable[[list[np.ndarray]], float], arrays: Sequence[np.ndarray],
                      h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of the scalar ``fn`` w.r.t. every element of every array."""
    arrays = [np.array(a, copy=True) for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros(a.shape, dtype=np.float64)
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(arrays)
            flat[i] = orig - h
            down = fn(arrays)
            flat[i] = orig
            # the step actually taken after rounding to the array dtype
            step = float(a.dtype.type(orig + h)) - float(a.dtype.type(orig - h))
            g.reshape(-1)[i] = (up - down) / step
        out.append(g)
    return out


def max_relative_error(auto: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """max |auto - numeric| scaled by the largest gradient magnitude across all arrays."""
    diff = max(float(np.max(np.abs(np.asarray(a, np.float64) - n))) for a, n in zip(auto, numeric))
    scale = max(max(float(np.max(np.abs(a))), float(np.max(np.abs(n)))) for a, n in zip(auto, numeric))
    return diff / max(scale, 1e-12)


def _away_from(x: np.ndarray, points: Sequence[float], margin: float) -> np.ndarray:
    """Push entries that sit within ``margin`` of a kink further away."""
    x = x.copy()
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.where(x[near] >= p, margin, -margin)
    return x


def _separated(rng, shape) -> np.ndarray:
    """Distinct values at least 0.05 apart (no near-ties inside pooling windows)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 - n * 0.025).reshape(shape)


def _projection(rng, shape):
    return rng.standard_normal(shape)


# name -> (input builder, forward) ; forward maps a list of Tensors to a Tensor
def _cases():
    def ew(op):
        return (lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))], lambda t: op(t[0], t[1]))

    return {
        "add": ew(T.add),
        "subtract": ew(T.sub),
        "multiply": ew(T.mul),
        "add_broadcast": (lambda r: [r.standard_normal((4, 5)), r.standard_normal(5)], lambda t: T.add(t[0], t[1])),
        "multiply_broadcast": (lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((3, 4))],
                               lambda t: T.mul(t[0], t[1])),
        "scale": (lambda r: [r.standard_normal((4, 4))], lambda t: T.scale(t[0], -1.7)),
        "matmul": (lambda r: [r.standard_normal((3, 5)), r.standard_normal((5, 4))], lambda t: T.matmul(t[0], t[1])),
        "conv2d": (lambda r: [r.standard_normal((2, 2, 4, 4)), r.standard_normal((2, 2, 3, 3)), r.standard_normal(2)],
                   lambda t: T.conv2d(t[0], t[1], t[2])),
        "conv2d_stride_pad": (lambda r: [r.standard_normal((1, 2, 5, 5)), r.standard_normal((3, 2, 3, 3))],
                              lambda t: T.conv2d(t[0], t[1], stride=2, padding=1)),
        "relu": (lambda r: [_away_from(r.standard_normal((4, 6)), [0.0], 0.05)], lambda t: T.relu(t[0])),
        "max_pool2d": (lambda r: [_separated(r, (2, 2, 4, 4))], lambda t: T.max_pool2d(t[0], 2)),
        "reshape": (lambda r: [r.standard_normal((2, 3, 4))], lambda t: T.reshape(t[0], (6, 4))),
        "flatten": (lambda r: [r.standard_normal((2, 3, 2, 2))], lambda t: T.flatten(t[0])),
        "sigmoid": (lambda r: [r.standard_normal((5, 5)) * 3], lambda t: T.sigmoid(t[0])),
        # few rows keep per-element gradients large relative to f32 round-off of the mean
        "softmax_cross_entropy": (lambda r: [r.standard_normal((2, 5)) * 2],
                                  lambda t: T.softmax_cross_entropy(t[0], np.array([4, 1]))),
        "sigmoid_bce": (lambda r: [r.standard_normal(8) * 2],
                        lambda t: T.sigmoid_bce(t[0], np.array([0, 1, 1, 0, 1, 0, 0, 1], dtype=np.float32))),
        "clip": (lambda r: [_away_from(r.standard_normal((4, 6)), [-0.5, 0.5], 0.05)],
                 lambda t: T.clip(t[0], -0.5, 0.5)),
        "sign": (lambda r: [_away_from(r.standard_normal((4, 4)), [0.0], 0.05)], lambda t: T.sign(t[0])),
        "sum": (lambda r: [r.standard_normal((4, 4, 2))], lambda t: T.tensor_sum(t[0])),
        "take": (lambda r: [r.standard_normal((5, 3))], lambda t: T.take(t[0], [4, 0, 0, 2])),
        "concat": (lambda r: [r.standard_normal((2, 3)), r.standard_normal((4, 3))], lambda t: T.concat(t, axis=0)),
    }


PRIMITIVE_CASES = _cases()


def check_primitive(name: str, seed: int, h: float = 1e-3) -> float:
    """Max relative error of autodiff vs central differences for one primitive."""
    build, fwd = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(seed)
    dt = T.get_dtype()
    inputs = [np.asarray(a, dtype=dt) for a in build(rng)]
    with T.no_grad():
        proj = _projection(rng, fwd([Tensor(a) for a in inputs]).shape).astype(dt)

    def value(arrs):
        with T.no_grad():
            out = fwd([Tensor(a) for a in arrs]).data
        return float(np.sum(out.astype(np.float64) * proj))

    leaves = [Tensor(a, requires_grad=True) for a in inputs]
    out = fwd(leaves)
    loss = T.tensor_sum(T.mul(out, Tensor(proj))) if out.ndim else T.scale(out, float(proj))
    auto = T.grad(loss, leaves)
    numeric = finite_difference(value, inputs, h)
    return max_relative_error(auto, numeric)


def _composite(t, labels):
    x, w1, b1, w2, b2 = t
    h = T.relu(T.conv2d(x, w1, b1))
    return T.softmax_cross_entropy(T.matmul(T.flatten(h), w2) + b2, labels)


def check_composite(seed: int, h: float = 1e-3) -> float:
    """Conv-relu-linear-CE network; gradients w.r.t. input and all parameters."""
    rng = np.random.default_rng(seed)
    dt = T.get_dtype()
    inputs = [
        rng.standard_normal((2, 1, 5, 5)),
        rng.standard_normal((3, 1, 3, 3)) * 0.5,
        rng.standard_normal(3) * 0.1,
        rng.standard_normal((27, 4)) * 0.3,
        rng.standard_normal(4) * 0.1,
    ]
    inputs = [np.asarray(a, dtype=dt) for a in inputs]
    labels = rng.integers(0, 4, size=2)

    def value(arrs):
        with T.no_grad():
            return float(_composite([Tensor(a) for a in arrs], labels).data)

    leaves = [Tensor(a, requires_grad=True) for a in inputs]
    auto = T.grad(_composite(leaves, labels), leaves)
    return max_relative_error(auto, finite_difference(value, inputs, h))


def silhouette_bruteforce(embeddings, labels) -> tuple[list[float], float]:
    """Textbook O(N^2) silhouette in plain Python floats."""
    e = [[float(v) for v in row] for row in np.asarray(embeddings, dtype=np.float64)]
    labels = [int(v) if not isinstance(v, str) else v for v in labels]
    n = len(e)
    clusters = sorted(set(labels), key=lambda c: (str(type(c)), c))
    if len(clusters) < 2:
        raise ValueError("need at least two clusters")

    def dist(i, j):
        acc = 0.0
        for a, b in zip(e[i], e[j]):
            d = a - b
            acc += d * d
        return math.sqrt(acc)

    members = {c: [j for j in range(n) if labels[j] == c] for c in clusters}
    s = []
    for i in range(n):
        own = labels[i]
        if len(members[own]) == 1:
            s.append(0.0)
            continue
        sums = {c: 0.0 for c in clusters}
        for j in range(n):
            sums[labels[j]] += dist(i, j)
        a = sums[own] / (len(members[own]) - 1)
        b = min(sums[c] / len(members[c]) for c in clusters if c != own)
        m = max(a, b)
        s.append((b - a) / m if m > 0 else 0.0)
    total = 0.0
    for v in s:
        total += v
    return s, total / n


def degeneracy_lattice(model, x: np.ndarray, y: np.ndarray, epsilon: float, seed: int = 0) -> dict[str, bool]:
    """Exact-equality checks: one-step PGD, one-step MIM and alpha=0 R+FGSM all equal FGSM."""
    ref = attacks.fgsm(model, x, y, epsilon)
    return {
        "pgd1==fgsm": np.array_equal(attacks.pgd(model, x, y, epsilon, epsilon, 1, random_start=False), ref),
        "mim1==fgsm": np.array_equal(attacks.mim(model, x, y, epsilon, epsilon, 1), ref),
        "rfgsm0==fgsm": np.array_equal(
            attacks.r_fgsm(model, x, y, epsilon, 0.0, rng=np.random.default_rng(seed)), ref),
    }


def run_selftest(seeds: int = 10, instances: int = 20) -> list[tuple[str, bool, str]]:
    """The invariant suite behind ``adv4adv selftest``; one (name, ok, detail) per check."""
    from . import nn
    from .evaluation import silhouette

    results = []
    for name in PRIMITIVE_CASES:
        worst = max(check_primitive(name, s) for s in range(seeds))
        results.append((f"gradcheck {name}", worst < 1e-3, f"max rel err {worst:.2e}"))
    worst = max(check_composite(s) for s in range(seeds))
    results.append(("gradcheck composite", worst < 1e-3, f"max rel err {worst:.2e}"))

    params = nn.init_params("tiny", 3, seed=0)
    rng = np.random.default_rng(0)
    x = rng.random((6, 1, 12, 12), dtype=np.float32)
    y = rng.integers(0, 3, size=6)
    for eps in (0.02, 0.1):
        for k, ok in degeneracy_lattice(params.logits, x, y, eps).items():
            results.append((f"lattice {k} eps={eps}", ok, "exact"))

    rng = np.random.default_rng(1)
    for i in range(instances):
        n = int(rng.integers(3, 60))
        emb = rng.standard_normal((n, int(rng.integers(1, 6))))
        labels = rng.integers(0, int(rng.integers(2, 5)), size=n)
        labels[:2] = [0, 1]
        ref = silhouette_bruteforce(emb, labels)
        got = silhouette(emb, labels)
        ok = list(got[0]) == ref[0] and got[1] == ref[1]
        results.append((f"silhouette oracle #{i}", ok, f"n={n}"))
    return results
