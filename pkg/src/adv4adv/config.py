"""Run configuration: INI-style file plus command-line overrides, and seed streams.

Config files use ``[section]`` headers and ``key = value`` lines. Every key
belongs to exactly one section (see :data:`SCHEMA`); unknown sections or keys
are rejected. Flags override file values.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackConfig
from .training import DOMAIN_WEIGHT_PRESETS, VARIANTS, TrainConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "SCHEMA",
    "EPSILON_PRESETS",
    "stream_seed",
    "parse_config",
]

EPSILON_PRESETS = {"fmnist": 0.1, "cifar10": 4 / 255, "cifar100": 4 / 255}
DEFAULT_ARCH = {"fmnist": "fmnist-small", "cifar10": "cifar-small", "cifar100": "cifar-small"}

_BOOL = {"on": True, "true": True, "yes": True, "1": True, "off": False, "false": False, "no": False, "0": False}


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit status 2."""


def _bool(v: str) -> bool:
    try:
        return _BOOL[v.strip().lower()]
    except KeyError:
        raise ValueError(f"expected on/off, got {v!r}") from None


def _list(v: str) -> list[str]:
    return [p.strip() for p in v.split(",") if p.strip()]


# section -> key -> parser
SCHEMA: dict[str, dict] = {
    "run": {"out": str, "seed": int, "arch": str},
    "data": {
        "dataset": str,
        "data_dir": str,
        "train_images": str,
        "train_labels": str,
        "test_images": str,
        "test_labels": str,
        "train_files": _list,
        "test_files": _list,
        "subset": int,
        "test_subset": int,
        "holdout_fraction": float,
    },
    "train": {
        "variant": str,
        "beta": float,
        "gamma": float,
        "classwise": _bool,
        "epochs": int,
        "pretrain_epochs": int,
        "patience": int,
        "lr": float,
        "batch_size": int,
        "crafting": str,
        "source_attack": str,
        "source_steps": int,
        "source_alpha": float,
    },
    "attack": {
        "kind": str,
        "epsilon": float,
        "alpha": float,
        "steps": int,
        "momentum": float,
        "random_start": _bool,
    },
    "eval": {"attacks": _list, "silhouette_cap": int, "svg": _bool},
}

REQUIRED = [("data", "dataset")]
PATH_KEYS = ["data_dir", "train_images", "train_labels", "test_images", "test_labels", "train_files", "test_files"]


def stream_seed(master: int, name: str) -> int:
    """64-bit seed for a named stream: first 8 bytes (little-endian) of
    BLAKE2b(f"{master}:{name}")."""
    digest = hashlib.blake2b(f"{master}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RunConfig:
    command: str
    dataset: str
    arch: str
    train: TrainConfig
    attack: AttackConfig
    eval_attacks: list[str]
    out: Path
    seed: int
    paths: dict = field(default_factory=dict)
    subset: int | None = None
    test_subset: int | None = None
    holdout_fraction: float = 0.1
    silhouette_cap: int = 2000
    svg: bool = False
    extra: dict = field(default_factory=dict)

    def seed_for(self, stream: str) -> int:
        return stream_seed(self.seed, stream)

    def manifest(self) -> dict[str, object]:
        """Every resolved tunable, flattened to ``section.key`` names."""
        m = {
            "run.command": self.command,
            "run.seed": self.seed,
            "run.arch": self.arch,
            "run.out": str(self.out),
            "data.dataset": self.dataset,
            "data.subset": self.subset,
            "data.test_subset": self.test_subset,
            "data.holdout_fraction": self.holdout_fraction,
            "eval.attacks": ",".join(self.eval_attacks),
            "eval.silhouette_cap": self.silhouette_cap,
            "eval.svg": self.svg,
        }
        for k, v in sorted(self.paths.items()):
            m[f"data.{k}"] = ",".join(v) if isinstance(v, list) else v
        t = self.train
        for k in ("variant", "beta", "gamma", "classwise", "epochs", "pretrain_epochs", "patience", "lr",
                  "batch_size", "crafting_mode", "seed"):
            m[f"train.{k}"] = getattr(t, k)
        for k, v in t.source_attack.resolved().items():
            m[f"train.source_attack.{k}"] = v
        for k, v in self.attack.resolved().items():
            m[f"attack.{k}"] = v
        for s in ("init", "train", "craft", "eval", "surrogate", "surrogate-init", "holdout", "subset-train",
                  "subset-test"):
            m[f"seed.{s}"] = self.seed_for(s)
        for k, v in sorted(self.extra.items()):
            m[f"cli.{k}"] = v
        return m


def _read_file(path) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return {s: dict(cp.items(s)) for s in cp.sections()}


def _typed(raw: dict[str, dict[str, str]], source: str) -> dict[tuple[str, str], object]:
    out = {}
    for section, items in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, value in items.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            parser = SCHEMA[section][key]
            try:
                out[(section, key)] = parser(value) if isinstance(value, str) else value
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key} = {value!r}: {exc}") from None
    return out


def parse_config(path=None, overrides: dict[str, dict[str, object]] | None = None, command: str = "train",
                 check_paths: bool = True) -> RunConfig:
    """Merge defaults < file < overrides and validate the result."""
    values = _typed(_read_file(path), str(path)) if path else {}
    if overrides:
        values.update(_typed({s: {k: v for k, v in kv.items() if v is not None} for s, kv in overrides.items()},
                             "flags"))
    for section, key in REQUIRED:
        if (section, key) not in values:
            raise ConfigError(f"missing required key {key!r} in [{section}]")

    def get(section, key, default=None):
        return values.get((section, key), default)

    dataset = get("data", "dataset")
    if dataset not in EPSILON_PRESETS:
        raise ConfigError(f"unknown dataset {dataset!r}; known: {sorted(EPSILON_PRESETS)}")
    seed = get("run", "seed", 0)
    epsilon = get("attack", "epsilon", EPSILON_PRESETS[dataset])
    beta0, gamma0 = DOMAIN_WEIGHT_PRESETS[dataset]
    variant = get("train", "variant", "A4A").upper().replace("*", "_STAR")

    try:
        # PAT is SAT with a PGD-20 source domain
        src_kind = get("train", "source_attack", "PGD" if variant == "PAT" else "FGSM").upper()
        src_steps = get("train", "source_steps", 20 if src_kind == "PGD" else 1)
        if src_kind in ("R+FGSM",):
            src_kind = "RFGSM"
        source = AttackConfig(src_kind, epsilon, alpha=get("train", "source_alpha"), steps=src_steps)
        train_variant = {"PAT": "SAT", "SURROGATE": "NT"}.get(variant, variant)
        if train_variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        train = TrainConfig(
            variant=train_variant,
            source_attack=source,
            beta=get("train", "beta", beta0),
            gamma=get("train", "gamma", gamma0),
            classwise=get("train", "classwise", True),
            epochs=get("train", "epochs", 30),
            pretrain_epochs=get("train", "pretrain_epochs", 5),
            patience=get("train", "patience", 5),
            lr=get("train", "lr", 1e-3),
            batch_size=get("train", "batch_size", 256),
            seed=stream_seed(seed, "surrogate" if variant == "SURROGATE" else "train") % 2**32,
            crafting_mode=get("train", "crafting", "online"),
        )
        train.check_trainable()
        kind = get("attack", "kind", "FGSM").upper()
        if kind == "R+FGSM":
            kind = "RFGSM"
        attack = AttackConfig(
            kind,
            epsilon,
            alpha=get("attack", "alpha"),
            steps=get("attack", "steps", 20 if kind == "PGD" else (10 if kind == "MIM" else 1)),
            momentum_decay=get("attack", "momentum", 1.0),
            random_start=get("attack", "random_start", False),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None

    paths = {k: get("data", k) for k in PATH_KEYS if get("data", k) is not None}
    if check_paths:
        for k, v in paths.items():
            for p in v if isinstance(v, list) else [v]:
                if not Path(p).exists():
                    raise ConfigError(f"[data] {k}: path does not exist: {p}")
    holdout = get("data", "holdout_fraction", 0.1)
    if not 0 < holdout < 1:
        raise ConfigError(f"[data] holdout_fraction must be in (0, 1), got {holdout}")
    for key in ("subset", "test_subset"):
        v = get("data", key)
        if v is not None and v < 1:
            raise ConfigError(f"[data] {key} must be >= 1, got {v}")
    out = Path(get("run", "out", os.environ.get("A4A_OUT", "runs")))
    return RunConfig(
        command=command,
        dataset=dataset,
        arch=get("run", "arch", DEFAULT_ARCH[dataset]),
        train=train,
        attack=attack,
        eval_attacks=get("eval", "attacks", ["FGSM", "PGD-20", "PGD-40", "R+FGSM", "MIM"]),
        out=out,
        seed=seed,
        paths=paths,
        subset=get("data", "subset"),
        test_subset=get("data", "test_subset"),
        holdout_fraction=holdout,
        silhouette_cap=get("eval", "silhouette_cap", 2000),
        svg=get("eval", "svg", False),
        extra={"variant_name": variant},
    )
