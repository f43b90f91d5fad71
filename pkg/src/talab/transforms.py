"""Input-transformation attacks and spectral augmentation tricks.

Each transform is built as a differentiable graph segment, so gradients of
a loss on the transformed image flow back to input coordinates through the
exact adjoint (resampling transforms are linear maps; spectral transforms
are orthonormal).

Spectral kinds: ``ssa`` perturbs and modulates the full spectrum,
``ssa_h`` restricts both to the highest-frequency coefficients, and
``ssa_plus`` applies one of {scale, add-noise, dropout} inside that
high-frequency set while passing every other coefficient through
untouched.  "High frequency" ranks coefficients by (u+v, u, v)
descending and keeps the top ``ceil(rho * H * W)``.

The translation-style attack does not transform inputs at all; it smooths
the plain gradient with a normalized Gaussian kernel
(:func:`tim_smooth_gradient`).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .attacks import ROLE_TRANSFORM, image_streams
from .errors import ConfigurationError
from .spectral import SpectralPlan, dct2, dct2_op, idct2_op

TRANSFORM_KINDS = (
    "none",
    "dim",
    "tim",
    "sim",
    "admix",
    "ssa",
    "ssa_h",
    "ssa_plus",
)


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "none"
    copies: int = 20
    rho: float = 0.2
    dim_pad: float = 1.1
    dim_prob: float = 0.5
    tim_kernel: int = 5
    tim_sigma: float = 1.5
    sim_scales: int = 5
    admix_eta: float = 0.2
    admix_count: int = 3
    ssa_sigma: float = 1.0
    rho_amp: float = 0.5
    dropout_frac: float = 0.10

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigurationError(f"unknown transform kind {self.kind!r}")
        if self.copies < 1:
            raise ConfigurationError("copies must be >= 1")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigurationError("rho must be in (0, 1]")
        if self.dim_pad < 1.0:
            raise ConfigurationError("dim_pad must be >= 1")


@dataclass(frozen=True)
class FrequencyMask:
    height: int
    width: int
    selected: np.ndarray  # bool (H, W)

    @property
    def count(self) -> int:
        return int(self.selected.sum())


def highfreq_mask(height: int, width: int, rho: float) -> FrequencyMask:
    """Top ceil(rho*H*W) coefficients under (u+v, u, v) descending order."""
    if height < 1 or width < 1:
        raise ConfigurationError("mask extents must be positive")
    if not 0.0 < rho <= 1.0:
        raise ConfigurationError("rho must be in (0, 1]")
    keep = int(np.ceil(rho * height * width))
    coords = [(u, v) for u in range(height) for v in range(width)]
    coords.sort(key=lambda uv: (uv[0] + uv[1], uv[0], uv[1]), reverse=True)
    selected = np.zeros((height, width), dtype=bool)
    for u, v in coords[:keep]:
        selected[u, v] = True
    return FrequencyMask(height=height, width=width, selected=selected)


@lru_cache(maxsize=32)
def _plan(height: int, width: int) -> SpectralPlan:
    return SpectralPlan(height, width)


@lru_cache(maxsize=64)
def _mask(height: int, width: int, rho: float) -> FrequencyMask:
    return highfreq_mask(height, width, rho)


# ---------------------------------------------------------------------------
# resampling matrices
# ---------------------------------------------------------------------------


def resize_matrix(out_n: int, in_n: int) -> np.ndarray:
    """Bilinear 1-D resampling matrix (out_n, in_n), edge-clamped."""
    mat = np.zeros((out_n, in_n))
    if in_n == 1:
        mat[:, 0] = 1.0
        return mat
    src = (np.arange(out_n) + 0.5) * in_n / out_n - 0.5
    i0 = np.clip(np.floor(src).astype(int), 0, in_n - 1)
    i1 = np.minimum(i0 + 1, in_n - 1)
    w1 = np.clip(src - i0, 0.0, 1.0)
    rows = np.arange(out_n)
    np.add.at(mat, (rows, i0), 1.0 - w1)
    np.add.at(mat, (rows, i1), w1)
    return mat


def _pad_matrix(out_n: int, in_n: int, offset: int) -> np.ndarray:
    mat = np.zeros((out_n, in_n))
    mat[offset : offset + in_n, :] = np.eye(in_n)
    return mat


def _dim_axis_matrix(n: int, padded: int, resized: int, offset: int) -> np.ndarray:
    # resize n -> resized, zero-pad into padded at offset, resize back to n
    return resize_matrix(n, padded) @ _pad_matrix(padded, resized, offset) @ resize_matrix(resized, n)


def rotation_pixel_map(height: int, width: int, degrees: float) -> np.ndarray:
    """Dense (HW, HW) bilinear rotation about the image center, zero fill."""
    theta = np.deg2rad(degrees)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    mat = np.zeros((height * width, height * width))
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    for oy in range(height):
        for ox in range(width):
            # inverse-map the output pixel into source coordinates
            dy, dx = oy - cy, ox - cx
            sy = cos_t * dy + sin_t * dx + cy
            sx = -sin_t * dy + cos_t * dx + cx
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            wy, wx = sy - y0, sx - x0
            row = oy * width + ox
            for iy, wyv in ((y0, 1 - wy), (y0 + 1, wy)):
                for ix, wxv in ((x0, 1 - wx), (x0 + 1, wx)):
                    if 0 <= iy < height and 0 <= ix < width and wyv * wxv:
                        mat[row, iy * width + ix] += wyv * wxv
    return mat


def scale_axis_matrix(n: int, factor: float) -> np.ndarray:
    """Resize by ``factor`` then center-pad or center-crop back to n."""
    m = max(1, int(round(n * factor)))
    resized = resize_matrix(m, n)
    if m == n:
        return resized
    if m < n:
        return _pad_matrix(n, m, (n - m) // 2) @ resized
    start = (m - n) // 2
    return resized[start : start + n, :]


def shift_axis_matrix(n: int, offset: int) -> np.ndarray:
    """Integer shift with zero fill (positive moves content down/right)."""
    mat = np.zeros((n, n))
    for i in range(n):
        j = i - offset
        if 0 <= j < n:
            mat[i, j] = 1.0
    return mat


# ---------------------------------------------------------------------------
# spectral coefficient maps
# ---------------------------------------------------------------------------


def spectral_op_factors(
    op: str,
    mask: FrequencyMask,
    rng,
    noise_span: float,
    dropout_frac: float,
):
    """Multiplier/offset applied to the DCT coefficients of one image.

    ``op`` is one of scale / noise / dropout; outside the mask the
    multiplier is 1 and the offset 0 (exact pass-through).
    """
    sel = mask.selected
    mult = np.ones(sel.shape)
    add = np.zeros(sel.shape)
    if op == "scale":
        mult[sel] = rng.uniform(0.0, 1.0)
    elif op == "noise":
        add[sel] = rng.uniform(-noise_span, noise_span, size=int(sel.sum()))
    elif op == "dropout":
        count = int(sel.sum())
        drop = int(round(dropout_frac * count))
        if drop > 0:
            chosen = rng.choice(count, size=drop, replace=False)
            coords = np.argwhere(sel)[chosen]
            mult[coords[:, 0], coords[:, 1]] = 0.0
    else:
        raise ConfigurationError(f"unknown spectral op {op!r}")
    return mult, add


_SPECTRAL_OPS = ("scale", "noise", "dropout")


def _spectral_coeff_maps(spec: TransformSpec, shape, rng, eps: float):
    """Per-image (multiplier, offset) pair on DCT coefficients."""
    h, w, c = shape
    plan = _plan(h, w)
    if spec.kind == "ssa_plus":
        mask = _mask(h, w, spec.rho)
        op = _SPECTRAL_OPS[int(rng.integers(len(_SPECTRAL_OPS)))]
        mult, add = spectral_op_factors(
            op, mask, rng, spec.ssa_sigma * eps, spec.dropout_frac
        )
        return mult[:, :, None] * np.ones((1, 1, c)), add[:, :, None] * np.ones((1, 1, c))
    # ssa / ssa_h: modulate and add transformed pixel noise
    noise = rng.normal(0.0, spec.ssa_sigma * eps, size=(h, w, c))
    noise_coeffs = dct2(plan, noise)
    mult = rng.uniform(1.0 - spec.rho_amp, 1.0 + spec.rho_amp, size=(h, w, c))
    if spec.kind == "ssa_h":
        sel = _mask(h, w, spec.rho).selected[:, :, None]
        mult = np.where(sel, mult, 1.0)
        noise_coeffs = np.where(sel, noise_coeffs, 0.0)
    return mult, mult * noise_coeffs


# ---------------------------------------------------------------------------
# transform application
# ---------------------------------------------------------------------------


def apply_transform(
    spec: TransformSpec,
    x: ad.Var,
    rngs: list,
    *,
    eps: float = 16 / 255,
    copy_index: int = 0,
    pool: np.ndarray | None = None,
) -> ad.Var:
    """One transformed copy of the batch ``x`` with a differentiable path.

    ``rngs`` holds one generator per image in the batch.  ``pool`` is the
    other-class candidate stack required by the mixing transform.
    """
    n, h, w, c = x.value.shape
    if len(rngs) != n:
        raise ConfigurationError("need one rng stream per image")
    kind = spec.kind
    if kind == "none":
        return x
    if kind == "tim":
        raise ConfigurationError(
            "tim smooths gradients, it is not an input transform"
        )
    if kind == "sim":
        return ad.scale(x, 0.5 ** (copy_index % spec.sim_scales))
    if kind == "admix":
        if pool is None or len(pool) == 0:
            raise ConfigurationError("admix requires a non-empty other-class pool")
        shared = isinstance(pool, np.ndarray)
        picks = np.empty_like(x.value)
        for i, rng in enumerate(rngs):
            candidates = pool if shared else pool[i]
            if len(candidates) == 0:
                raise ConfigurationError(
                    "admix requires a non-empty other-class pool"
                )
            picks[i] = candidates[int(rng.integers(len(candidates)))]
        mixed = ad.add_const(x, spec.admix_eta * picks)
        return ad.scale(mixed, 0.5 ** (copy_index % spec.sim_scales))
    if kind == "dim":
        pad_h, pad_w = int(round(spec.dim_pad * h)), int(round(spec.dim_pad * w))
        ah = np.empty((n, h, h))
        aw = np.empty((n, w, w))
        for i, rng in enumerate(rngs):
            if rng.uniform() < spec.dim_prob and (pad_h > h or pad_w > w):
                rh = int(rng.integers(h, pad_h + 1))
                rw = int(rng.integers(w, pad_w + 1))
                oh = int(rng.integers(0, pad_h - rh + 1))
                ow = int(rng.integers(0, pad_w - rw + 1))
                ah[i] = _dim_axis_matrix(h, pad_h, rh, oh)
                aw[i] = _dim_axis_matrix(w, pad_w, rw, ow)
            else:
                ah[i] = np.eye(h)
                aw[i] = np.eye(w)
        return ad.apply_axis_maps(x, ah, aw)
    if kind in ("ssa", "ssa_h", "ssa_plus"):
        plan = _plan(h, w)
        mults = np.empty((n, h, w, c))
        adds = np.empty((n, h, w, c))
        for i, rng in enumerate(rngs):
            mults[i], adds[i] = _spectral_coeff_maps(spec, (h, w, c), rng, eps)
        coeffs = dct2_op(x, plan)
        modulated = ad.add_const(ad.mul_const(coeffs, mults), adds)
        return idct2_op(modulated, plan)
    raise ConfigurationError(f"unknown transform kind {kind!r}")


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ConfigurationError("kernel size must be odd and >= 1")
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def tim_smooth_gradient(grad: np.ndarray, kernel_size: int, sigma: float) -> np.ndarray:
    """Same-padded convolution of a gradient with a normalized Gaussian."""
    kernel = gaussian_kernel(kernel_size, sigma)
    grad = np.asarray(grad, dtype=np.float64)
    single = grad.ndim == 3
    batch = grad[None] if single else grad
    k = kernel_size
    pt, pb = k // 2, k - 1 - k // 2
    padded = np.pad(batch, ((0, 0), (pt, pb), (pt, pb), (0, 0)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    out = np.einsum("nhwcij,ij->nhwc", windows, kernel)
    return out[0] if single else out


class TransformedTarget:
    """Gradient target averaging over transformed copies of the input.

    Each ``loss_and_grad`` call draws ``copies`` fresh transforms per
    image and averages the pulled-back gradients in copy order.
    """

    def __init__(
        self,
        model,
        spec: TransformSpec,
        seed: int = 0,
        eps: float = 16 / 255,
        pool: np.ndarray | None = None,
        mix_labels: np.ndarray | None = None,
        stream_offset: int = 0,
    ):
        self.model = model
        self.spec = spec
        self.seed = seed
        self.eps = eps
        self.pool = pool
        # labels of the pool images let the mixing transform draw only
        # from classes other than the attacked image's own
        self.mix_labels = (
            None if mix_labels is None else np.asarray(mix_labels, dtype=np.int64)
        )
        self.stream_offset = stream_offset
        self._streams = None
        self.input_shape = model.input_shape
        self.classes = model.classes

    def _rngs(self, n: int):
        if self._streams is None:
            self._streams = image_streams(
                self.seed, ROLE_TRANSFORM, n + self.stream_offset
            )[self.stream_offset :]
        if len(self._streams) != n:
            raise ConfigurationError("batch size changed under a transform target")
        return self._streams

    def loss_and_grad(self, images, labels):
        spec = self.spec
        if spec.kind == "none":
            return self.model.loss_and_grad(images, labels)
        if spec.kind == "tim":
            loss, grad = self.model.loss_and_grad(images, labels)
            return loss, tim_smooth_gradient(grad, spec.tim_kernel, spec.tim_sigma)
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        batch = images[None] if single else images
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        rngs = self._rngs(batch.shape[0])
        pool = self.pool
        if spec.kind == "admix" and pool is not None and self.mix_labels is not None:
            pool = [pool[self.mix_labels != yi] for yi in y]
        loss_acc = None
        grad_acc = None
        for j in range(spec.copies):
            x = ad.constant(batch)
            xt = apply_transform(
                spec, x, rngs, eps=self.eps, copy_index=j, pool=pool
            )
            logits = self.model.build_logits(xt)
            per_sample = ad.softmax_cross_entropy(logits, y)
            total = ad.sum_all(per_sample)
            ad.backward(total)
            if loss_acc is None:
                loss_acc = per_sample.value.copy()
                grad_acc = x.grad.copy()
            else:
                loss_acc += per_sample.value
                grad_acc += x.grad
        loss = loss_acc / spec.copies
        grad = grad_acc / spec.copies
        if single:
            return float(loss[0]), grad[0]
        return loss, grad


def averaged_transformed_gradient(
    model,
    x,
    y,
    spec: TransformSpec,
    copies: int | None = None,
    seed: int = 0,
    eps: float = 16 / 255,
    pool: np.ndarray | None = None,
):
    """Mean gradient over transformed copies (one-shot convenience)."""
    if copies is not None:
        if copies < 1:
            raise ConfigurationError("copies must be >= 1")
        spec = replace(spec, copies=copies)
    target = TransformedTarget(model, spec, seed=seed, eps=eps, pool=pool)
    return target.loss_and_grad(x, y)
