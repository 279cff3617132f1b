"""Shared test helpers: finite-difference oracle and error metrics."""

import numpy as np
import pytest


def central_diff(f, arrays, h=1e-3):
    """Central finite differences of a scalar function.

    ``f`` takes no arguments and reads the (mutated in place) float64
    ``arrays``; returns one gradient array per input.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(got, want):
    """Largest |got-want| relative to the largest reference magnitude.

    The floor of 1e-4 keeps near-zero gradients from blowing the ratio up on
    pure float noise.
    """
    got, want = np.asarray(got), np.asarray(want)
    denom = max(np.max(np.abs(want)), 1e-4)
    return float(np.max(np.abs(got - want)) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
