import hashlib
import logging

import numpy as np
import pytest

from adv4adv import attacks, nn
from adv4adv import tensor as T
from adv4adv.attacks import AttackConfig
from adv4adv.checks import degeneracy_lattice, finite_difference
from adv4adv.data import Dataset
from adv4adv.tensor import Tensor

from conftest import striped_images

RFGSM_SHA256 = "f7d363ac565b018ab33b25f4881799fe222556966dc89da635f796e1e8a1994f"


def test_zero_epsilon_is_identity(tiny, tiny_batch):
    x, y = tiny_batch
    assert np.array_equal(attacks.fgsm(tiny.logits, x, y, 0.0), x)
    assert np.array_equal(attacks.pgd(tiny.logits, x, y, 0.0, 0.0, 3), x)
    assert np.array_equal(attacks.mim(tiny.logits, x, y, 0.0, 0.0, 3), x)


def test_fgsm_on_sum_surrogate():
    x = np.full((2, 1, 3, 3), 0.5, np.float32)
    out = attacks.fgsm(None, x, np.zeros(2, int), 0.1, loss_fn=lambda xt, y: T.tensor_sum(xt))
    assert np.all(out == np.float32(0.6))


def test_fgsm_matches_finite_difference_sign():
    # synthetic stand-in image: no Fashion-MNIST file is shipped with the package
    params = nn.init_params("fmnist-small", 10, seed=42)
    rng = np.random.default_rng(42)
    label = 4
    img = (striped_images(rng, [label], size=28)[:, None] / 255.0).astype(np.float32)
    x_adv = attacks.fgsm(params.logits, img, np.array([label]), 0.1)
    with T.precision(np.float64):
        p64 = params.copy()
        for t in p64:
            t.data = t.data.astype(np.float64)

        def loss(arrs):
            with T.no_grad():
                return float(T.softmax_cross_entropy(p64.logits(Tensor(arrs[0])), np.array([label])).data)

        (fd,) = finite_difference(loss, [img.astype(np.float64)], h=1e-4)
    live = np.abs(fd) > 1e-9
    expected = np.clip(img + np.float32(0.1) * np.sign(fd).astype(np.float32), 0, 1)
    agree = np.mean(x_adv[live] == expected[live])
    assert live.sum() > 100
    assert agree >= 0.99


def _trace_ball(fn, x, eps):
    dist = []
    fn(lambda i, xi: dist.append(float(np.max(np.abs(xi.astype(np.float64) - x)))))
    assert dist and max(dist) <= eps + 1e-6


def test_pgd_every_iterate_in_ball(tiny, tiny_batch):
    x, y = tiny_batch
    _trace_ball(lambda cb: attacks.pgd(tiny.logits, x, y, 0.1, 0.03, 10, random_start=True,
                                       rng=np.random.default_rng(0), callback=cb), x, 0.1)


def test_mim_every_iterate_in_ball(tiny, tiny_batch):
    x, y = tiny_batch
    _trace_ball(lambda cb: attacks.mim(tiny.logits, x, y, 0.1, 0.03, 10, callback=cb), x, 0.1)


# independent oracles: a linear softmax model with a hand-derived input gradient

def _linear_model(seed=0, d=16, K=4):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((d, K)).astype(np.float32)
    b = rng.standard_normal(K).astype(np.float32)
    model = lambda xt: T.matmul(T.flatten(xt), Tensor(W)) + Tensor(b)  # noqa: E731

    def grad(x, y):
        z = x.reshape(len(x), -1).astype(np.float64) @ W + b
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        p[np.arange(len(y)), y] -= 1
        return (p @ W.T).reshape(x.shape)

    return model, grad


def _clip_loop(xa, x0, eps):
    out = xa.copy()
    for i in np.ndindex(xa.shape):
        lo = max(x0[i] - np.float32(eps), np.float32(0))
        hi = min(x0[i] + np.float32(eps), np.float32(1))
        out[i] = min(max(xa[i], lo), hi)
    return out


def _batch(seed=3, n=5, d=16, K=4):
    rng = np.random.default_rng(seed)
    return rng.random((n, 1, 4, d // 4), dtype=np.float32), rng.integers(0, K, n)


def test_pgd_matches_reference_loop():
    model, grad = _linear_model()
    x, y = _batch()
    eps = 0.1
    alpha = np.float32(eps / 4)
    ref = x.copy()
    for _ in range(8):
        ref = _clip_loop(ref + alpha * np.sign(grad(ref, y)).astype(np.float32), x, eps)
    got = attacks.pgd(model, x, y, eps, eps / 4, 8)
    assert np.array_equal(got, ref)


def test_mim_matches_reference_loop():
    model, grad = _linear_model(1)
    x, y = _batch(4)
    eps, steps = 0.1, 5
    alpha = np.float32(eps / steps)
    ref, g_acc = x.copy(), np.zeros(x.shape)
    for _ in range(steps):
        g = grad(ref, y)
        for n in range(len(g)):
            g_acc[n] = 1.0 * g_acc[n] + g[n] / np.sum(np.abs(g[n]))
        ref = _clip_loop(ref + alpha * np.sign(g_acc).astype(np.float32), x, eps)
    got = attacks.mim(model, x, y, eps, eps / steps, steps, decay=1.0)
    assert np.array_equal(got, ref)


def test_pgd_warns_on_oversized_single_step(tiny, tiny_batch, caplog):
    with caplog.at_level(logging.WARNING, logger="adv4adv.attacks"):
        out = attacks.pgd(tiny.logits, *tiny_batch, 0.05, 0.2, 1)
    assert "exceeds" in caplog.text
    assert np.max(np.abs(out - tiny_batch[0])) <= 0.05 + 1e-6


@pytest.mark.parametrize("eps", [0.02, 0.1, 4 / 255])
def test_degeneracy_lattice(tiny, tiny_batch, eps):
    assert all(degeneracy_lattice(tiny.logits, *tiny_batch, eps).values())


@pytest.mark.parametrize("kind", attacks.KINDS)
@pytest.mark.parametrize("eps", [0.02, 0.1, 4 / 255])
def test_budget_law(tiny, kind, eps):
    rng = np.random.default_rng(11)
    x = rng.random((8, 1, 12, 12), dtype=np.float32)
    x[:2] = np.round(x[:2])  # saturated pixels exercise the [0, 1] clamp
    y = rng.integers(0, 3, 8)
    cfg = AttackConfig(kind, eps, steps=1 if kind in ("FGSM", "RFGSM") else 7, random_start=kind == "PGD")
    out = attacks.run_attack(tiny.logits, x, y, cfg, rng=np.random.default_rng(0))
    assert np.all(np.abs(out.astype(np.float64) - x) <= eps + 1e-6)
    assert out.min() >= 0 and out.max() <= 1


def test_rfgsm_golden_and_deterministic(tiny, tiny_batch):
    a = attacks.r_fgsm(tiny.logits, *tiny_batch, 0.1, 0.05, rng=np.random.default_rng(9))
    b = attacks.r_fgsm(tiny.logits, *tiny_batch, 0.1, 0.05, rng=np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert hashlib.sha256(a.tobytes()).hexdigest() == RFGSM_SHA256


def test_rfgsm_rng_consumption_independent_of_alpha(tiny, tiny_batch):
    r0, r1 = np.random.default_rng(5), np.random.default_rng(5)
    attacks.r_fgsm(tiny.logits, *tiny_batch, 0.1, 0.0, rng=r0)
    attacks.r_fgsm(tiny.logits, *tiny_batch, 0.1, 0.05, rng=r1)
    assert r0.random() == r1.random()


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig("FGSM", -1)
    with pytest.raises(ValueError):
        AttackConfig("CW", 0.1)
    with pytest.raises(ValueError):
        AttackConfig("PGD", 0.1, steps=0)
    assert AttackConfig.preset("PGD-40", 0.1).steps == 40
    assert AttackConfig("PGD", 0.1).step_size == pytest.approx(0.01)
    assert AttackConfig("RFGSM", 0.1).name == "R+FGSM"


def test_craft_dataset(tiny, tiny_batch):
    x, y = tiny_batch
    src = Dataset(x, y, 3)
    zero = attacks.craft_dataset(src, tiny.logits, AttackConfig("PGD", 0.0, steps=2), seed=1, batch_size=4)
    assert np.array_equal(zero.images, x) and np.array_equal(zero.labels, y) and zero.domain == "PGD"
    cfg = AttackConfig("RFGSM", 0.1)
    a = attacks.craft_dataset(src, tiny.logits, cfg, seed=1, batch_size=4)
    b = attacks.craft_dataset(src, tiny.logits, cfg, seed=1, batch_size=4)
    assert np.array_equal(a.images, b.images) and a.domain == "R+FGSM"
    assert np.all(np.abs(a.images.astype(np.float64) - x) <= 0.1 + 1e-6)
    with pytest.raises(ValueError):
        attacks.craft_dataset(a, tiny.logits, cfg)
