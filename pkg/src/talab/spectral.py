"""Orthonormal 2D discrete cosine transform (type II / III pair).

The basis matrices are precomputed per (H, W), so the forward transform is
two small matrix products and its adjoint equals its inverse.  That makes
the spectral ops linear graph nodes with exact gradients.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * m + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0, :] = np.sqrt(1.0 / n)
    return mat


class SpectralPlan:
    """Precomputed orthonormal DCT bases for a fixed spatial extent."""

    def __init__(self, height: int, width: int):
        if height < 1 or width < 1:
            raise ConfigurationError("spectral plan needs positive extents")
        self.height = height
        self.width = width
        self.basis_h = _dct_matrix(height)
        self.basis_w = _dct_matrix(width)

    def _check(self, image: np.ndarray):
        if image.ndim == 2:
            h, w = image.shape
        elif image.ndim == 3:
            h, w, _ = image.shape
        elif image.ndim == 4:
            _, h, w, _ = image.shape
        else:
            raise ConfigurationError(f"unsupported image rank {image.ndim}")
        if (h, w) != (self.height, self.width):
            raise ConfigurationError(
                f"image extent {h}x{w} does not match plan "
                f"{self.height}x{self.width}"
            )


def _apply(plan: SpectralPlan, image: np.ndarray, bh, bw) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    plan._check(image)
    if image.ndim == 2:
        return bh @ image @ bw.T
    if image.ndim == 3:
        return np.einsum("ij,jwc,kw->ikc", bh, image, bw)
    return np.einsum("ij,njwc,kw->nikc", bh, image, bw)


def dct2(plan: SpectralPlan, image: np.ndarray) -> np.ndarray:
    """Forward orthonormal type-II DCT over the two spatial axes."""
    return _apply(plan, image, plan.basis_h, plan.basis_w)


def idct2(plan: SpectralPlan, coeffs: np.ndarray) -> np.ndarray:
    """Inverse (type-III) transform; exact adjoint of :func:`dct2`."""
    return _apply(plan, coeffs, plan.basis_h.T, plan.basis_w.T)


def dct2_op(x: ad.Var, plan: SpectralPlan) -> ad.Var:
    plan._check(x.value)
    return ad.apply_axis_maps(x, plan.basis_h, plan.basis_w)


def idct2_op(x: ad.Var, plan: SpectralPlan) -> ad.Var:
    plan._check(x.value)
    return ad.apply_axis_maps(x, plan.basis_h.T, plan.basis_w.T)
