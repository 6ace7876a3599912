import numpy as np
import pytest

import oracles
from adv4adv import attacks, nn
from adv4adv import tensor as T
from adv4adv.attacks import AttackConfig
from adv4adv.data import Batch, Dataset, split
from adv4adv.evaluation import accuracy
from adv4adv.training import (EarlyStopper, TrainConfig, adv4adv_loss, pretrain_clean, route, sat_loss,
                              train)

from conftest import striped_images


def _pair(params, n=8, seed=42, eps=0.1):
    shape = nn.ARCHITECTURES[params.arch]["input"]
    rng = np.random.default_rng(seed)
    x = rng.random((n,) + shape, dtype=np.float32)
    y = rng.integers(0, params.K, n)
    xa = attacks.fgsm(params.logits, x, y, eps)
    return Batch(x, y, np.zeros(n, np.float32)), Batch(xa, y, np.ones(n, np.float32))


def test_loss_matches_numpy_oracle():
    params = nn.init_params("fmnist-small", 10, seed=42)
    clean, adv = _pair(params)
    total, parts = adv4adv_loss(params, clean, adv, TrainConfig("A4A", beta=1.0, gamma=1.0))
    ref = oracles.adv4adv_total(params, clean.images, adv.images, clean.labels, 1.0, 1.0)
    assert abs(total.item() - ref) < 1e-5
    assert parts["total"] == total.item()
    assert parts["objective"] == pytest.approx(
        parts["ce_clean"] + parts["ce_adv"] - parts["dom_phi"] - parts["dom_lambda"])


@pytest.mark.parametrize("classwise", [True, False])
def test_star_variant_matches_oracle(tiny, classwise):
    clean, adv = _pair(tiny, n=10, seed=3)
    cfg = TrainConfig("A4A_STAR", beta=0.5, gamma=2.0, classwise=classwise)
    total, _ = adv4adv_loss(tiny, clean, adv, cfg)
    ref = oracles.adv4adv_total(tiny, clean.images, adv.images, clean.labels, 0.5, 2.0, classwise, star=True)
    assert abs(total.item() - ref) < 1e-5


def test_zero_weights_reduce_to_sat_exactly(tiny):
    clean, adv = _pair(tiny)
    total, parts = adv4adv_loss(tiny, clean, adv, TrainConfig("A4A", beta=0.0, gamma=0.0))
    assert total.item() == sat_loss(tiny, clean, adv).item()
    star, sp = adv4adv_loss(tiny, clean, adv, TrainConfig("A4A_STAR", beta=0.0, gamma=0.0))
    assert star.item() == sp["ce_adv"]
    T.active_tape().clear()


def test_single_class_routing_equals_single_discriminator(tiny):
    clean, adv = _pair(tiny)
    y0 = np.zeros(len(clean), dtype=np.int64)
    clean = Batch(clean.images, y0, clean.domain_labels)
    adv = Batch(adv.images, y0, adv.domain_labels)
    on, _ = adv4adv_loss(tiny, clean, adv, TrainConfig("A4A", beta=1.0, gamma=1.0, classwise=True))
    off, _ = adv4adv_loss(tiny, clean, adv, TrainConfig("A4A", beta=1.0, gamma=1.0, classwise=False))
    assert abs(on.item() - off.item()) < 1e-6
    T.active_tape().clear()


def test_misaligned_batches_rejected(tiny):
    clean, adv = _pair(tiny)
    with pytest.raises(ValueError):
        adv4adv_loss(tiny, clean, Batch(adv.images[:4], adv.labels[:4], adv.domain_labels[:4]), TrainConfig())
    shuffled = Batch(adv.images, np.roll(adv.labels, 1), adv.domain_labels)
    if not np.array_equal(shuffled.labels, clean.labels):
        with pytest.raises(ValueError):
            adv4adv_loss(tiny, clean, shuffled, TrainConfig())


def test_saddle_point_gradient_split(tiny):
    """Extractor sees CE minus beta times the domain gradient; discriminators see the plain domain gradient."""
    clean, adv = _pair(tiny)
    beta = 0.3
    with T.precision(np.float64):
        p = tiny.copy()
        for t in p:
            t.data = t.data.astype(np.float64)
        f = list(p.theta_f.values())
        d = [t for m in p.theta_d for t in m.values()]
        g_total = T.grad(adv4adv_loss(p, clean, adv, TrainConfig("A4A", beta=beta))[0], f + d)
        g_ce = T.grad(sat_loss(p, clean, adv), f)
        g_unit = T.grad(adv4adv_loss(p, clean, adv, TrainConfig("A4A", beta=1.0))[0], f + d)
    for gt, gc, gu in zip(g_total[:len(f)], g_ce, g_unit[:len(f)]):
        # at beta = 1 the extractor receives CE - dom, so -dom = g_unit - g_ce
        assert np.allclose(gt, gc + beta * (gu - gc), rtol=1e-9, atol=1e-12)
    for a, b in zip(g_total[len(f):], g_unit[len(f):]):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-15)


def test_route():
    labels = np.array([2, 0, 2, 1])
    assert [(k, i.tolist()) for k, i in route(labels, 3, True)] == [(0, [1]), (1, [3]), (2, [0, 2])]
    assert [(k, i.tolist()) for k, i in route(labels, 3, False)] == [(0, [0, 1, 2, 3])]


def test_early_stopper_patience():
    s = EarlyStopper(2)
    assert [s.update(e, v) for e, v in enumerate([0.5, 0.6, 0.6, 0.55])] == [False, False, False, True]
    assert s.best_epoch == 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta=-1)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(variant="A4A", beta=0, gamma=0).check_trainable()
    TrainConfig(variant="SAT", beta=0, gamma=0).check_trainable()


def _toy(n=240, seed=0, K=3):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, K, n)
    x = (striped_images(rng, y * 3)[:, None] / 255.0).astype(np.float32)
    return Dataset(x, y, K)


def _cfg(**kw):
    base = dict(variant="A4A", source_attack=AttackConfig("FGSM", 0.1), epochs=2, pretrain_epochs=1,
                batch_size=64, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_patience_one_returns_first_checkpoint(tiny):
    scores = iter([0.5, 0.4, 0.9])
    snaps = []

    def evaluate(params, holdout, cfg):
        snaps.append(params.copy())
        return next(scores)

    ds = _toy()
    best, rows = train(_cfg(epochs=5, patience=1), ds, ds, params=tiny, evaluate=evaluate)
    assert len(snaps) == 2 and [r["epoch"] for r in rows if r["phase"] == "adapt"] == [0, 1]
    assert all(np.array_equal(a.data, b.data) for a, b in zip(best, snaps[0]))


def test_zero_epochs_leave_params_unchanged(tiny):
    ds = _toy()
    best, rows = train(_cfg(epochs=0, pretrain_epochs=0), ds, ds, params=tiny)
    assert rows == [] and all(np.array_equal(a.data, b.data) for a, b in zip(best, tiny))


def test_pretrain_touches_only_extractor_and_predictor(tiny):
    out = pretrain_clean(tiny, _toy(), _cfg(pretrain_epochs=1))
    for kind, changed in (("f", True), ("p", True), ("d", False), ("dbar", False)):
        same = all(np.array_equal(a.data, b.data) for a, b in zip(out.named(kind).values(),
                                                                  tiny.named(kind).values()))
        assert same != changed


@pytest.mark.parametrize("variant,crafting", [("A4A", "online"), ("SAT", "static"), ("NT", "online")])
def test_training_is_reproducible(tiny, tmp_path, variant, crafting):
    ds = _toy()
    hold, rest = split(ds, 0.2, seed=0)
    cfg = _cfg(variant=variant, crafting_mode=crafting, gamma=0.5)
    a, ra = train(cfg, rest, hold, params=tiny, log_path=tmp_path / "a.csv")
    b, rb = train(cfg, rest, hold, params=tiny, log_path=tmp_path / "b.csv")
    assert all(np.array_equal(u.data, v.data) for u, v in zip(a, b))
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]  # noqa: E731
    assert strip(ra) == strip(rb)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0].startswith("phase,epoch,ce_clean") and len(lines) == len(ra) + 1


def test_discriminators_learn_only_when_enabled(tiny):
    ds = _toy()
    best, _ = train(_cfg(beta=1.0, gamma=0.0, epochs=1), ds, ds, params=tiny)
    assert any(not np.array_equal(a.data, b.data) for a, b in zip(best.named("d").values(),
                                                                  tiny.named("d").values()))
    assert all(np.array_equal(a.data, b.data) for a, b in zip(best.named("dbar").values(),
                                                              tiny.named("dbar").values()))


def test_nt_learns_separable_toy():
    ds = _toy(600)
    hold, rest = split(ds, 0.2, seed=0)
    best, rows = train(_cfg(variant="NT", epochs=6, pretrain_epochs=0, batch_size=32, lr=3e-3), rest, hold,
                       arch="tiny")
    assert accuracy(best, hold) > 0.9


def test_empty_holdout_rejected(tiny):
    ds = _toy()
    with pytest.raises(ValueError):
        train(_cfg(), ds, ds.take([]), params=tiny)
