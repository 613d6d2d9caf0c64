import os
import sys

import numpy as np
import pytest

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
HARNESS_DIR = os.path.join(PROJECT_ROOT, "bicd")

# Корень - для src и bi_*, каталог bicd/ - для bc_* и самого bicd.py
for path in (HARNESS_DIR, PROJECT_ROOT):
    if path not in sys.path:
        sys.path.insert(0, path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(fn, arr: np.ndarray, index, eps: float = 1e-6) -> float:
    """Центральная разность по одному элементу массива (меняется на месте и восстанавливается)."""
    old = arr[index]
    arr[index] = old + eps
    plus = fn()
    arr[index] = old - eps
    minus = fn()
    arr[index] = old
    return (plus - minus) / (2 * eps)


@pytest.fixture
def fd():
    return numeric_grad
