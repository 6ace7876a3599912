import struct
import sys

import numpy as np
import pytest

from adv4adv import nn


def write_idx(directory, prefix, images, labels):
    """Write uint8 images [N, H, W] and labels [N] as an IDX pair."""
    n, h, w = images.shape
    (directory / f"{prefix}-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes())
    (directory / f"{prefix}-labels-idx1-ubyte").write_bytes(
        struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes())


def striped_images(rng, labels, size=12):
    """Noise plus a bright band whose row encodes the label: learnable but not trivial."""
    x = (rng.random((len(labels), size, size)) * 80).astype(np.uint8)
    for i, y in enumerate(labels):
        x[i, y:y + 2, :] = 220
    return x


@pytest.fixture
def fmnist_dir(tmp_path):
    rng = np.random.default_rng(0)
    for prefix, n in (("train", 400), ("t10k", 120)):
        labels = rng.integers(0, 10, n)
        write_idx(tmp_path, prefix, striped_images(rng, labels), labels)
    return tmp_path


@pytest.fixture
def tiny():
    return nn.init_params("tiny", 3, seed=0)


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(1)
    return rng.random((6, 1, 12, 12), dtype=np.float32), rng.integers(0, 3, size=6)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'}  {detail}")
