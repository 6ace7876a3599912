"""Plain-numpy float64 re-implementations used as test oracles. Nothing here
touches the autodiff engine."""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from adv4adv.nn import ARCHITECTURES


def _arr(t):
    return np.asarray(t.data, dtype=np.float64)


def conv_valid(x, w, b):
    win = sliding_window_view(x, w.shape[2:], axis=(2, 3))  # [B, C, oh, ow, kh, kw]
    return np.einsum("bchwij,ocij->bohw", win, w) + b[None, :, None, None]


def maxpool(x, k):
    B, C, H, W = x.shape
    return x[:, :, :H // k * k, :W // k * k].reshape(B, C, H // k, k, W // k, k).max(axis=(3, 5))


def features(params, x):
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(ARCHITECTURES[params.arch]["layers"]):
        if layer[0] == "conv":
            h = np.maximum(conv_valid(h, _arr(params.theta_f[f"conv{i}.w"]), _arr(params.theta_f[f"conv{i}.b"])), 0)
        elif layer[0] == "pool":
            h = maxpool(h, layer[1])
        elif layer[0] == "flatten":
            h = h.reshape(len(h), -1)
        else:
            h = np.maximum(h @ _arr(params.theta_f[f"linear{i}.w"]) + _arr(params.theta_f[f"linear{i}.b"]), 0)
    return h


def logits(params, phi):
    return phi @ _arr(params.theta_p["w"]) + _arr(params.theta_p["b"])


def cross_entropy(z, y):
    total = 0.0
    for row, label in zip(z, y):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[label]
    return total / len(y)


def disc_logit(member, e):
    h = np.maximum(e @ _arr(member["w0"]) + _arr(member["b0"]), 0)
    return (h @ _arr(member["w1"]) + _arr(member["b1"]))[:, 0]


def bce(z, t):
    p = 1.0 / (1.0 + math.exp(-z))
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def bank_term(bank, e, labels, domains, classwise):
    total = 0.0
    for i in range(len(labels)):
        member = bank[labels[i]] if classwise else bank[0]
        total += bce(float(disc_logit(member, e[i:i + 1])[0]), float(domains[i]))
    return total / len(labels)


def adv4adv_total(params, x_clean, x_adv, y, beta, gamma, classwise=True, star=False):
    """Objective value as differentiated by training: CE terms plus each active bank's mean BCE."""
    x = np.concatenate([x_clean, x_adv])
    labels = np.concatenate([y, y])
    domains = np.concatenate([np.zeros(len(y)), np.ones(len(y))])
    phi = features(params, x)
    lam = logits(params, phi)
    b = len(y)
    total = cross_entropy(lam[b:], y) + (0.0 if star else cross_entropy(lam[:b], y))
    if beta > 0:
        total += bank_term(params.theta_d, phi, labels, domains, classwise)
    if gamma > 0:
        total += bank_term(params.theta_d_bar, lam, labels, domains, classwise)
    return total
