"""``adv4adv`` command-line entry point.

Commands: ``train``, ``craft``, ``eval``, ``embed`` and ``selftest``. Exit status
is 0 on success, 2 on a usage or configuration error and 1 on a runtime
failure. Every command except ``selftest`` writes its artifacts and a
``manifest.txt`` under the output directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, checks, data, nn
from .attacks import AttackConfig, craft_dataset
from .config import ConfigError, RunConfig, parse_config
from .evaluation import build_report, export_embeddings
from .training import train

log = logging.getLogger("adv4adv")

_FMNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
_CIFAR_FILES = {
    "cifar10": ([f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100": (["train.bin"], ["test.bin"]),
}


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--dataset", choices=["fmnist", "cifar10", "cifar100"])
    common.add_argument("--data-dir", help="directory holding the standard dataset files")
    common.add_argument("--arch", help="architecture name (default per dataset)")
    common.add_argument("--variant", help="NT, SAT, PAT, A4A, A4A* or SURROGATE")
    common.add_argument("--beta", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--attack", help="FGSM, PGD, R+FGSM or MIM")
    common.add_argument("--steps", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default $A4A_OUT or ./runs)")
    common.add_argument("--classwise", choices=["on", "off"])
    common.add_argument("--crafting", choices=["online", "static"])
    common.add_argument("--subset", type=int, help="stratified cap on training rows")
    common.add_argument("--test-subset", type=int, help="stratified cap on test rows")
    common.add_argument("--epochs", type=int)
    common.add_argument("--pretrain-epochs", type=int)
    common.add_argument("--patience", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adv4adv", description="Adversarial training via adversarial domain adaptation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model (any variant, incl. the surrogate)")
    c = sub.add_parser("craft", parents=[common], help="craft an adversarial test set against a checkpoint")
    c.add_argument("--model", required=True, help="checkpoint to attack")
    e = sub.add_parser("eval", parents=[common], help="accuracy / silhouette report")
    e.add_argument("--model", action="append", required=True, metavar="NAME=PATH",
                   help="defense checkpoint; repeatable")
    e.add_argument("--surrogate", help="surrogate checkpoint for black-box columns")
    e.add_argument("--adv-path", action="append", default=[], help="pre-crafted dataset file; repeatable")
    e.add_argument("--attacks", help="comma-separated attack columns (default FGSM,PGD-20,PGD-40,R+FGSM,MIM)")
    e.add_argument("--svg", action="store_true", help="also write an SVG bar chart")
    m = sub.add_parser("embed", parents=[common], help="export feature or logit embeddings as CSV")
    m.add_argument("--model", required=True)
    m.add_argument("--space", choices=["phi", "lambda"], default="lambda")
    m.add_argument("--adv-path", help="embed this dataset file instead of the clean test set")
    s = sub.add_parser("selftest", help="gradient checks, degeneracy lattice, silhouette oracle")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(a: argparse.Namespace) -> dict:
    g = lambda k: getattr(a, k, None)  # noqa: E731
    return {
        "run": {"seed": g("seed"), "out": g("out"), "arch": g("arch")},
        "data": {"dataset": g("dataset"), "data_dir": g("data_dir"), "subset": g("subset"),
                 "test_subset": g("test_subset")},
        "train": {"variant": g("variant"), "beta": g("beta"), "gamma": g("gamma"), "classwise": g("classwise"),
                  "crafting": g("crafting"), "epochs": g("epochs"), "pretrain_epochs": g("pretrain_epochs"),
                  "patience": g("patience")},
        "attack": {"kind": g("attack"), "epsilon": g("epsilon"), "steps": g("steps"), "alpha": g("alpha")},
        "eval": {"attacks": g("attacks"), "svg": "on" if g("svg") else None},
    }


def _resolve(path_or_none: str | None, base: Path | None, name: str) -> str:
    if path_or_none:
        return path_or_none
    if base is None:
        raise ConfigError(f"no path for {name}: give --data-dir or set it in [data]")
    for cand in (base / name, base / f"{name}.gz"):
        if cand.exists():
            return str(cand)
    raise ConfigError(f"{name} not found under {base}")


def load_split(cfg: RunConfig, which: str) -> data.Dataset:
    """The train or test split named by ``cfg``, after any row cap."""
    base = Path(cfg.paths["data_dir"]) if "data_dir" in cfg.paths else None
    if cfg.dataset == "fmnist":
        ds = data.load_idx(_resolve(cfg.paths.get(f"{which}_images"), base, _FMNIST_FILES[f"{which}_images"]),
                           _resolve(cfg.paths.get(f"{which}_labels"), base, _FMNIST_FILES[f"{which}_labels"]))
    else:
        files = cfg.paths.get(f"{which}_files")
        if not files:
            names = _CIFAR_FILES[cfg.dataset][0 if which == "train" else 1]
            files = [_resolve(None, base, n) for n in names]
        ds = data.load_cifar_binary(files, cfg.dataset)
    cap = cfg.subset if which == "train" else cfg.test_subset
    if cap is not None:
        ds = data.subset(ds, cap, cfg.seed_for(f"subset-{which}") % 2**32)
    return ds


def write_manifest(cfg: RunConfig, extra: dict | None = None) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    m = cfg.manifest()
    m.update(extra or {})
    path = cfg.out / "manifest.txt"
    path.write_text("".join(f"{k} = {v}\n" for k, v in m.items()))
    return path


def _cmd_train(cfg: RunConfig, a) -> None:
    ds = load_split(cfg, "train")
    holdout, rest = data.split(ds, cfg.holdout_fraction, cfg.seed_for("holdout") % 2**32)
    variant = cfg.extra["variant_name"]
    init_seed = cfg.seed_for("surrogate-init" if variant == "SURROGATE" else "init") % 2**32
    params = nn.init_params(cfg.arch, ds.K, init_seed)
    write_manifest(cfg, {"data.n_train": len(rest), "data.n_holdout": len(holdout), "seed.init_used": init_seed})
    t0 = time.perf_counter()
    best, rows = train(cfg.train, rest, holdout, params=params, arch=cfg.arch, log_path=cfg.out / "log.csv")
    nn.save_checkpoint(cfg.out / "model.a4ackpt", best)
    adapt = [r for r in rows if r["phase"] == "adapt"]
    best_score = max((r["holdout_acc"] for r in adapt), default=float("nan"))
    print(f"{variant}: {len(adapt)} epochs, best holdout {best_score:.4f}, "
          f"{time.perf_counter() - t0:.1f}s -> {cfg.out / 'model.a4ackpt'}")


def _cmd_craft(cfg: RunConfig, a) -> None:
    params, _ = nn.load_checkpoint(a.model)
    test = load_split(cfg, "test")
    seed = cfg.seed_for("craft") % 2**32
    write_manifest(cfg, {"craft.model": a.model, "craft.seed_used": seed})
    adv = craft_dataset(test, params.logits, cfg.attack, seed=seed, batch_size=cfg.train.batch_size)
    echo = dict(cfg.attack.resolved(), seed=seed, model=str(a.model))
    path = cfg.out / f"{cfg.attack.name}.a4adata"
    data.write_dataset(path, adv, echo)
    print(f"wrote {len(adv)} {cfg.attack.name} examples -> {path}")


def _parse_models(specs: list[str]) -> dict[str, str]:
    out = {}
    for s in specs:
        name, sep, path = s.partition("=")
        if not sep:
            name, path = Path(s).stem, s
        if name in out:
            raise UsageError(f"duplicate model name {name!r}")
        out[name] = path
    return out


def _cmd_eval(cfg: RunConfig, a) -> None:
    paths = _parse_models(a.model)
    models = {n: nn.load_checkpoint(p)[0] for n, p in paths.items()}
    surrogate = nn.load_checkpoint(a.surrogate)[0] if a.surrogate else None
    extra = {}
    for p in a.adv_path:
        ds, echo = data.read_dataset(p)
        name = f"{Path(p).stem}"
        if echo.get("epsilon") is not None and not np.isclose(echo["epsilon"], cfg.attack.epsilon):
            raise ConfigError(f"{p} was crafted at epsilon {echo['epsilon']}, run uses {cfg.attack.epsilon}")
        extra[name] = ds
    test = load_split(cfg, "test")
    seed = cfg.seed_for("eval") % 2**32
    write_manifest(cfg, {**{f"eval.model.{n}": p for n, p in paths.items()},
                         "eval.surrogate": a.surrogate, "eval.adv_path": ",".join(a.adv_path),
                         "eval.seed_used": seed})
    report = build_report(models, test, cfg.eval_attacks, surrogate=surrogate, seed=seed,
                          epsilon=cfg.attack.epsilon, silhouette_cap=cfg.silhouette_cap,
                          batch_size=cfg.train.batch_size, out_dir=cfg.out, extra=extra)
    if cfg.svg:
        (cfg.out / "report.svg").write_text(report.to_svg())
    print(report.to_text(), end="")


def _cmd_embed(cfg: RunConfig, a) -> None:
    params, _ = nn.load_checkpoint(a.model)
    ds = data.read_dataset(a.adv_path)[0] if a.adv_path else load_split(cfg, "test")
    write_manifest(cfg, {"embed.model": a.model, "embed.space": a.space, "embed.adv_path": a.adv_path})
    path = export_embeddings(params, ds, a.space, cfg.out / f"embeddings_{a.space}.csv")
    print(f"wrote {len(ds)} {a.space} embeddings -> {path}")


def _cmd_selftest(a) -> int:
    results = checks.run_selftest(seeds=a.seeds)
    for name, ok, detail in results:
        if a.verbose or not ok:
            print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    failed = sum(not ok for _, ok, _ in results)
    print(f"selftest: {len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


_COMMANDS = {"train": _cmd_train, "craft": _cmd_craft, "eval": _cmd_eval, "embed": _cmd_embed}


def main(argv: list[str] | None = None) -> int:
    try:
        a = _parser().parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if a.command == "selftest":
            return _cmd_selftest(a)
        cfg = parse_config(a.config, _overrides(a), command=a.command)
        _COMMANDS[a.command](cfg, a)
        return 0
    except (ConfigError, UsageError) as exc:
        print(f"adv4adv {a.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:
        where = type(exc).__module__.replace("adv4adv.", "")
        print(f"adv4adv {a.command}: {where}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
