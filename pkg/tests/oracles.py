"""Reference computations shared by the test modules, independent of the package."""

import itertools
from decimal import Decimal, getcontext

import numpy as np


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def rel_err(a, b, floor=1e-10):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def sigmoid_exact(x, digits=60):
    getcontext().prec = digits
    return float(Decimal(1) / (Decimal(1) + (-Decimal(repr(float(x)))).exp()))


def noisy_or_product(grid):
    """1 - prod(1 - sigmoid) per class, one python float at a time."""
    g = np.asarray(grid, dtype=np.float64)
    out = []
    for c in range(g.shape[2]):
        keep = 1.0
        for i, j in itertools.product(range(g.shape[0]), range(g.shape[1])):
            keep *= 1.0 - 1.0 / (1.0 + np.exp(-g[i, j, c]))
        out.append(1.0 - keep)
    return np.array(out)


def scan_argmax(heat):
    """Row-major first maximum by exhaustive scan."""
    best, where = None, None
    for r in range(heat.shape[0]):
        for c in range(heat.shape[1]):
            if best is None or heat[r, c] > best:
                best, where = heat[r, c], (r, c)
    return where
