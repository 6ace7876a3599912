"""Accuracy under attack, logit-space silhouette scores, embedding export and the
Table-1-style report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .attacks import AttackConfig, craft_dataset
from .data import Dataset, subset
from .nn import ModelParams
from .tensor import Tensor

__all__ = [
    "predict_logits",
    "embed",
    "accuracy",
    "silhouette",
    "export_embeddings",
    "EvalReport",
    "build_report",
    "DEFAULT_SUITE",
]

DEFAULT_SUITE = ("FGSM", "PGD-20", "PGD-40", "R+FGSM", "MIM")


def embed(params: ModelParams, images: np.ndarray, space: str = nn.LOGIT, batch_size: int = 500) -> np.ndarray:
    """Feature (``"phi"``) or logit (``"lambda"``) embeddings, computed off-tape."""
    if space not in (nn.FEATURE, nn.LOGIT):
        raise ValueError(f"unknown embedding space {space!r}")
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            phi = nn.feature_forward(params, Tensor(images[s:s + batch_size]))
            if space == nn.FEATURE:
                out.append(phi.vectors.data)
            else:
                out.append(nn.predictor_forward(params, phi)[0].vectors.data)
    return np.concatenate(out)


def predict_logits(params: ModelParams, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    return embed(params, images, nn.LOGIT, batch_size)


def accuracy(model, ds: Dataset) -> float:
    """Fraction of rows whose argmax logit (lowest index on ties) equals the label.

    ``model`` is a :class:`ModelParams` or any callable returning logits for a
    batch of images as an array.
    """
    if len(ds) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    if isinstance(model, ModelParams):
        if model.K != ds.K:
            raise ValueError(f"model has K={model.K}, dataset K={ds.K}")
        logits = predict_logits(model, ds.images)
    else:
        logits = np.asarray(model(ds.images))
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def silhouette(embeddings: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-sample silhouette coefficients and their mean, Euclidean distance.

    Computed in float64 with sequential accumulation in sample and coordinate
    order. Members of singleton clusters get s_i = 0; a pair with a_i = b_i = 0
    also gets 0.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if e.ndim != 2 or labels.shape != (e.shape[0],):
        raise ValueError(f"embeddings {e.shape} vs labels {labels.shape}")
    classes, inv = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two distinct clusters")
    n, dim = e.shape
    sq = np.zeros((n, n))
    for d in range(dim):
        diff = e[:, None, d] - e[None, :, d]
        sq += diff * diff
    dist = np.sqrt(sq)
    # per-cluster distance sums, accumulated over j in index order
    sums = np.zeros((n, len(classes)))
    for j in range(n):
        sums[:, inv[j]] += dist[:, j]
    counts = np.bincount(inv, minlength=len(classes)).astype(np.float64)
    s = np.zeros(n)
    for i in range(n):
        c = inv[i]
        if counts[c] == 1:
            continue
        a = sums[i, c] / (counts[c] - 1)
        b = min(sums[i, o] / counts[o] for o in range(len(classes)) if o != c)
        m = max(a, b)
        s[i] = (b - a) / m if m > 0 else 0.0
    total = 0.0
    for v in s:
        total += float(v)
    return s, total / n


def export_embeddings(params: ModelParams, ds: Dataset, space: str, path) -> Path:
    """CSV: ``label,domain,e0..e{D-1}``; values printed with 9 significant digits (exact for f32)."""
    vectors = embed(params, ds.images, space)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "domain"] + [f"e{i}" for i in range(vectors.shape[1])])
        for lab, row in zip(ds.labels, vectors):
            w.writerow([int(lab), ds.domain] + [f"{float(v):.9g}" for v in row])
    return path


# reports

@dataclass
class EvalReport:
    defenses: list[str]
    attacks: list[str]
    accuracy: dict[tuple[str, str, str], float] = field(default_factory=dict)
    silhouette: dict[tuple[str, str, str], float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def validate(self) -> None:
        for v in self.accuracy.values():
            if not 0 <= v <= 1:
                raise ValueError(f"accuracy {v} outside [0, 1]")
        for v in self.silhouette.values():
            if not math.isnan(v) and not -1 <= v <= 1:
                raise ValueError(f"silhouette {v} outside [-1, 1]")

    def columns(self) -> list[tuple[str, str]]:
        present = {(s, a) for (_, s, a) in self.accuracy}
        cols = [("clean", "clean")]
        for setting in ("white", "black", "file"):
            cols += [(setting, a) for a in self.attacks if (setting, a) in present]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "defense", "setting", "attack", "value"])
        for metric, table in (("accuracy", self.accuracy), ("silhouette", self.silhouette)):
            for d in self.defenses:
                for setting, attack in self.columns():
                    key = (d, setting, attack)
                    if key in table:
                        w.writerow([metric, d, setting, attack, repr(float(table[key]))])
        for k in sorted(self.config):
            w.writerow(["config", "", "", k, self.config[k]])
        return buf.getvalue()

    def to_text(self) -> str:
        cols = self.columns()
        head = ["Defense"] + [a if s == "clean" else f"{s[0].upper()}B {a}" for s, a in cols]
        out = []
        for metric, table, fmt in (("Accuracy (%)", self.accuracy, lambda v: f"{100 * v:.2f}"),
                                   ("Silhouette (logits)", self.silhouette, lambda v: f"{v:.3f}")):
            rows = [[d] + [fmt(table[(d, s, a)]) if (d, s, a) in table else "-" for s, a in cols]
                    for d in self.defenses]
            widths = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]
            out.append(metric)
            out.append("  ".join(h.ljust(w) for h, w in zip(head, widths)))
            for r in rows:
                out.append("  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
            out.append("")
        out.append("config: " + ", ".join(f"{k}={self.config[k]}" for k in sorted(self.config)))
        return "\n".join(out) + "\n"

    def to_svg(self, setting: str = "white") -> str:
        """Grouped bar chart of the accuracy map for one setting."""
        cols = [c for c in self.columns() if c[0] in ("clean", setting)]
        bw, gap, h = 10, 14, 200
        width = 40 + len(cols) * (len(self.defenses) * bw + gap)
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h + 40}">']
        x = 30
        for s, a in cols:
            for j, d in enumerate(self.defenses):
                v = self.accuracy.get((d, s, a), 0.0)
                hue = int(360 * j / max(1, len(self.defenses)))
                parts.append(f'<rect x="{x}" y="{h - v * h:.1f}" width="{bw}" height="{v * h:.1f}" '
                             f'fill="hsl({hue},60%,50%)"><title>{d} {s} {a}: {100 * v:.2f}%</title></rect>')
                x += bw
            parts.append(f'<text x="{x - len(self.defenses) * bw}" y="{h + 15}" font-size="9">{a}</text>')
            x += gap
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def _silhouette_on(params: ModelParams, ds: Dataset, cap: int, seed: int) -> float:
    small = subset(ds, cap, seed)
    labels = small.labels
    if len(np.unique(labels)) < 2:
        return float("nan")
    return silhouette(predict_logits(params, small.images), labels)[1]


def build_report(models: dict[str, ModelParams], test: Dataset, attacks: Sequence[AttackConfig | str],
                 surrogate: ModelParams | None = None, seed: int = 0, epsilon: float | None = None,
                 silhouette_cap: int = 2000, batch_size: int = 256, out_dir=None,
                 extra: dict[str, Dataset] | None = None) -> EvalReport:
    """Evaluate every defense on clean data and under every attack.

    White-box sets are crafted against each defense; black-box sets are
    crafted once against ``surrogate`` and transferred. ``extra`` maps column
    names to pre-crafted datasets evaluated as-is. When ``out_dir`` is given,
    ``report.csv`` and ``report.txt`` are written there.
    """
    if not models:
        raise ValueError("no defense models given")
    cfgs = []
    for a in attacks:
        if isinstance(a, str):
            if epsilon is None:
                raise ValueError("named attacks need an epsilon")
            a = AttackConfig.preset(a, epsilon)
        cfgs.append(a)
    eps = {c.epsilon for c in cfgs}
    if len(eps) > 1:
        raise ValueError(f"attack columns use different epsilons: {sorted(eps)}")
    names = [c.name for c in cfgs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate attack columns: {names}")
    report = EvalReport(list(models), names)
    report.config = {
        "epsilon": next(iter(eps)) if eps else None,
        "seed": seed,
        "silhouette_cap": silhouette_cap,
        "black_box": surrogate is not None,
        "n_test": len(test),
    }
    for c in cfgs:
        report.config[f"attack[{c.name}]"] = ";".join(f"{k}={v}" for k, v in c.resolved().items())

    black = {}
    if surrogate is not None:
        for i, c in enumerate(cfgs):
            black[c.name] = craft_dataset(test, surrogate.logits, c, seed=seed + 1000 + i, batch_size=batch_size)

    for d, params in models.items():
        report.accuracy[(d, "clean", "clean")] = accuracy(params, test)
        report.silhouette[(d, "clean", "clean")] = _silhouette_on(params, test, silhouette_cap, seed)
        for i, c in enumerate(cfgs):
            adv = craft_dataset(test, params.logits, c, seed=seed + i, batch_size=batch_size)
            report.accuracy[(d, "white", c.name)] = accuracy(params, adv)
            report.silhouette[(d, "white", c.name)] = _silhouette_on(params, adv, silhouette_cap, seed)
            if c.name in black:
                report.accuracy[(d, "black", c.name)] = accuracy(params, black[c.name])
                report.silhouette[(d, "black", c.name)] = _silhouette_on(params, black[c.name], silhouette_cap, seed)
        for name, ds in (extra or {}).items():
            report.accuracy[(d, "file", name)] = accuracy(params, ds)
            report.silhouette[(d, "file", name)] = _silhouette_on(params, ds, silhouette_cap, seed)
    if extra:
        report.attacks = report.attacks + [n for n in extra if n not in report.attacks]
    report.validate()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text(report.to_csv())
        (out_dir / "report.txt").write_text(report.to_text())
    return report
