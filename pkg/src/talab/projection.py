"""Feasible-set projection for L-infinity bounded pixel perturbations."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


def project_linf(x: np.ndarray, delta: np.ndarray, eps: float) -> np.ndarray:
    """Clamp ``delta`` into the eps-ball and keep ``x + delta`` in [0, 1].

    The pixel constraint is applied as bounds on delta itself
    (``-x <= delta <= 1 - x``), which makes the projection idempotent
    bit-for-bit and guarantees ``x + delta`` never rounds outside [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x.shape != delta.shape:
        raise ConfigurationError(
            f"projection shape mismatch: {x.shape} vs {delta.shape}"
        )
    out = np.clip(delta, -eps, eps)
    return np.clip(out, -x, 1.0 - x)


def uniform_linf_init(x: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform per-coordinate draw in [-eps, eps], pixel-clamped."""
    draw = rng.uniform(-eps, eps, size=np.asarray(x).shape)
    return project_linf(x, draw, eps)
