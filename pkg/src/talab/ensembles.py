"""Multi-model attack surfaces: lateral fusion and the longitudinal loop.

Lateral fusion modes (uniform or explicit weights w_k, sum 1):

* ``loss``        L = sum_k w_k * CE(softmax(z_k), y)
* ``logit``       L = CE(softmax(sum_k w_k z_k), y)
* ``prediction``  L = -log(sum_k w_k softmax(z_k)_y)

:func:`analytic_fusion_gradient` gives the hand-derived dL/dz_{k,c} for
the three modes at uniform weights; it is the independent oracle the
reverse-mode engine is checked against.

Three ensemble tricks:

* gradient alignment - a model's gradient that conflicts with the mean of
  the others (cosine below tau, or a sign-inner-product rule) is
  orthogonalized against that mean before summing;
* asynchronous input transformation - each model gets its own transform
  draw per iteration instead of one shared draw;
* model shuffle - the longitudinal visit order is redrawn per iteration.

Model-shuffle and transform-assignment draws come from one run-level
stream per attack call (all images in a batch share the visit order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import (
    ROLE_ENSEMBLE,
    AttackConfig,
    PerturbationState,
    _l1_normalize,
)
from .errors import ConfigurationError
from .projection import project_linf
from .schedules import make_schedule
from .transforms import (
    rotation_pixel_map,
    scale_axis_matrix,
    shift_axis_matrix,
    _dim_axis_matrix,
)

FUSION_MODES = ("loss", "logit", "prediction", "longitude")


@dataclass
class EnsembleSpec:
    models: list
    fusion: str = "logit"
    weights: list[float] | None = None
    tau: float = 0.1
    ga_enabled: bool = False
    ait_enabled: bool = False
    ms_enabled: bool = False
    ait_pool: list | None = None
    conflict_rule: str = "cosine"  # or "sign" for the listing-faithful test

    def __post_init__(self):
        if len(self.models) < 1:
            raise ConfigurationError("ensemble needs at least one model")
        if self.fusion not in FUSION_MODES:
            raise ConfigurationError(f"unknown fusion mode {self.fusion!r}")
        if self.weights is None:
            self.weights = [1.0 / len(self.models)] * len(self.models)
        if len(self.weights) != len(self.models):
            raise ConfigurationError("weight/model count mismatch")
        if min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigurationError("weights must be nonnegative and sum to 1")
        if self.conflict_rule not in ("cosine", "sign"):
            raise ConfigurationError(f"unknown conflict rule {self.conflict_rule!r}")


@dataclass
class FusionView:
    """Per-model logits with derived probabilities and the one-hot label."""

    logits: np.ndarray  # (K, C)
    label: int
    probabilities: np.ndarray = field(init=False)
    onehot: np.ndarray = field(init=False)

    def __post_init__(self):
        z = np.asarray(self.logits, dtype=np.float64)
        if z.ndim != 2:
            raise ConfigurationError("fusion view expects (K, C) logits")
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        self.logits = z
        self.probabilities = e / e.sum(axis=1, keepdims=True)
        self.onehot = np.zeros(z.shape[1])
        self.onehot[self.label] = 1.0


def fuse_outputs(logit_vars: list[ad.Var], labels, mode: str, weights) -> ad.Var:
    """Graph-connected per-sample fused loss; logits are (N, C) nodes."""
    if mode == "longitude":
        raise ConfigurationError("longitude fusion is a sequential attack loop")
    if mode not in FUSION_MODES:
        raise ConfigurationError(f"unknown fusion mode {mode!r}")
    weights = [float(w) for w in weights]
    if len(weights) != len(logit_vars):
        raise ConfigurationError("weight/model count mismatch")
    if mode == "loss":
        return ad.weighted_sum(
            [ad.softmax_cross_entropy(z, labels) for z in logit_vars], weights
        )
    if mode == "logit":
        fused = ad.weighted_sum(logit_vars, weights)
        return ad.softmax_cross_entropy(fused, labels)
    # prediction: -log of the weighted class-y probability
    picked = [ad.pick_class(ad.softmax(z), labels) for z in logit_vars]
    return ad.scale(ad.log(ad.weighted_sum(picked, weights)), -1.0)


def fusion_loss(view: FusionView, mode: str, weights=None) -> float:
    """Scalar fused loss of one K-model view (test convenience)."""
    k = view.logits.shape[0]
    weights = weights if weights is not None else [1.0 / k] * k
    logit_vars = [ad.constant(z[None, :]) for z in view.logits]
    out = fuse_outputs(logit_vars, [view.label], mode, weights)
    return float(out.value[0])


def analytic_fusion_gradient(view: FusionView, mode: str) -> np.ndarray:
    """Closed-form dL/dz_{k,c} for uniform weights; shape (K, C).

    Derived by hand from the three fused objectives, independent of the
    reverse-mode path:

    * loss:        (p_{k,c} - y_c) / K
    * logit:       (softmax(z_bar)_c - y_c) / K  with z_bar the mean logits
    * prediction:  -(p_{k,y} / (K * p_bar_y)) * (y_c - p_{k,c})
    """
    k, _ = view.logits.shape
    p = view.probabilities
    y = view.onehot
    if mode == "loss":
        return (p - y[None, :]) / k
    if mode == "logit":
        zbar = view.logits.mean(axis=0)
        e = np.exp(zbar - zbar.max())
        q = e / e.sum()
        return np.tile((q - y) / k, (k, 1))
    if mode == "prediction":
        pbar_y = p[:, view.label].mean()
        coeff = p[:, view.label] / (k * pbar_y)
        return -coeff[:, None] * (y[None, :] - p)
    raise ConfigurationError(f"no analytic gradient for fusion mode {mode!r}")


# ---------------------------------------------------------------------------
# gradient alignment
# ---------------------------------------------------------------------------


def _align_batch(grads: np.ndarray, tau: float, rule: str) -> np.ndarray:
    """Vectorized alignment; grads is (K, N, ...) and returns same shape."""
    k = grads.shape[0]
    if k < 2:
        raise ConfigurationError("gradient alignment needs at least two models")
    axes = tuple(range(2, grads.ndim))
    total = grads.sum(axis=0)
    out = grads.copy()
    for i in range(k):
        g_avg = (total - grads[i]) / (k - 1)
        dot = (grads[i] * g_avg).sum(axis=axes)
        avg_sq = (g_avg * g_avg).sum(axis=axes)
        if rule == "cosine":
            self_sq = (grads[i] * grads[i]).sum(axis=axes)
            denom = np.sqrt(self_sq * avg_sq)
            cos = np.where(denom > 0, dot / np.maximum(denom, 1e-300), 1.0)
            conflict = cos < tau
        else:
            sign_dot = (np.sign(grads[i]) * np.sign(g_avg)).sum(axis=axes)
            conflict = sign_dot < 0
        conflict = conflict & (avg_sq > 0)
        if np.any(conflict):
            coeff = np.where(conflict, dot / np.where(avg_sq > 0, avg_sq, 1.0), 0.0)
            shape = coeff.shape + (1,) * len(axes)
            out[i] = grads[i] - coeff.reshape(shape) * g_avg
    return out


def align_gradients(grads, tau: float, rule: str = "cosine"):
    """Orthogonalize each gradient that conflicts with the others' mean.

    ``grads`` is a list of K same-shaped arrays for a single instance;
    non-conflicted entries are returned bit-identical.
    """
    stacked = np.stack([np.asarray(g, dtype=np.float64) for g in grads])[:, None]
    aligned = _align_batch(stacked, tau, rule)
    return [aligned[i, 0] for i in range(len(grads))]


# ---------------------------------------------------------------------------
# asynchronous input transformations
# ---------------------------------------------------------------------------


class AitTransform:
    """A named random input transform drawn fresh per use."""

    def __init__(self, name: str, draw):
        self.name = name
        self._draw = draw  # draw(rng, shape, eps) -> callable(Var) -> Var

    def build(self, rng, shape, eps):
        return self._draw(rng, shape, eps)

    def __repr__(self):
        return f"AitTransform({self.name})"


def _draw_shift(rng, shape, eps):
    h, w, _ = shape
    dy, dx = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
    ah, aw = shift_axis_matrix(h, dy), shift_axis_matrix(w, dx)
    return lambda x: ad.apply_axis_maps(x, ah, aw)


def _draw_rotation(rng, shape, eps):
    h, w, _ = shape
    mat = rotation_pixel_map(h, w, float(rng.uniform(-15.0, 15.0)))
    return lambda x: ad.apply_pixel_map(x, mat)


def _draw_scale(rng, shape, eps):
    h, w, _ = shape
    factor = float(rng.uniform(0.8, 1.2))
    ah, aw = scale_axis_matrix(h, factor), scale_axis_matrix(w, factor)
    return lambda x: ad.apply_axis_maps(x, ah, aw)


def _draw_resize_pad(rng, shape, eps):
    h, w, _ = shape
    pad_h, pad_w = int(round(1.1 * h)), int(round(1.1 * w))
    rh, rw = int(rng.integers(h, pad_h + 1)), int(rng.integers(w, pad_w + 1))
    oh, ow = int(rng.integers(0, pad_h - rh + 1)), int(rng.integers(0, pad_w - rw + 1))
    ah = _dim_axis_matrix(h, pad_h, rh, oh)
    aw = _dim_axis_matrix(w, pad_w, rw, ow)
    return lambda x: ad.apply_axis_maps(x, ah, aw)


def _draw_noise(rng, shape, eps):
    noise = rng.uniform(-eps / 2.0, eps / 2.0, size=shape)
    return lambda x: ad.add_const(x, noise)


def _draw_dropout(rng, shape, eps):
    keep = (rng.uniform(size=shape[:2]) >= 0.10).astype(float)[:, :, None]
    return lambda x: ad.mul_const(x, keep)


def default_ait_pool() -> list[AitTransform]:
    return [
        AitTransform("shift", _draw_shift),
        AitTransform("rotation", _draw_rotation),
        AitTransform("scale", _draw_scale),
        AitTransform("resize_pad", _draw_resize_pad),
        AitTransform("noise", _draw_noise),
        AitTransform("dropout", _draw_dropout),
    ]


def assign_async_transforms(pool: list, count: int, rng) -> list:
    """One independent pool pick per model (redrawn every iteration)."""
    if not pool:
        raise ConfigurationError("transform pool is empty")
    return [pool[int(rng.integers(len(pool)))] for _ in range(count)]


# ---------------------------------------------------------------------------
# lateral attack surface
# ---------------------------------------------------------------------------


class EnsembleTarget:
    """Fused multi-model gradient target for the attack driver.

    Per-model branch gradients are obtained by giving every model its own
    copy of the input leaf; alignment (when enabled) then operates on
    exactly those branch gradients before they are summed.
    """

    def __init__(self, spec: EnsembleSpec, seed: int = 0, eps: float = 16 / 255):
        if spec.fusion == "longitude":
            raise ConfigurationError("longitude fusion uses longitude_attack")
        self.spec = spec
        self.eps = eps
        self.rng = np.random.default_rng(
            np.random.SeedSequence([int(seed), ROLE_ENSEMBLE])
        )
        self.input_shape = spec.models[0].input_shape
        self.classes = spec.models[0].classes
        self._iteration_transforms = None

    def begin_iteration(self, t: int):
        spec = self.spec
        pool = spec.ait_pool if spec.ait_pool is not None else default_ait_pool()
        if spec.ait_enabled:
            self._iteration_transforms = assign_async_transforms(
                pool, len(spec.models), self.rng
            )
        elif spec.ait_pool is not None:
            # aligned baseline: one draw reused across every model
            pick = pool[int(self.rng.integers(len(pool)))]
            self._iteration_transforms = [pick] * len(spec.models)
        else:
            self._iteration_transforms = None

    def loss_and_grad(self, images, labels):
        spec = self.spec
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        batch = images[None] if single else images
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        leaves = []
        logit_vars = []
        for k, model in enumerate(spec.models):
            leaf = ad.constant(batch)
            x_k = leaf
            if self._iteration_transforms is not None:
                closure = self._iteration_transforms[k].build(
                    self.rng, batch.shape[1:], self.eps
                )
                x_k = closure(leaf)
            logit_vars.append(model.build_logits(x_k))
            leaves.append(leaf)
        per_sample = fuse_outputs(logit_vars, y, spec.fusion, spec.weights)
        total = ad.sum_all(per_sample)
        ad.backward(total)
        branch = np.stack(
            [
                leaf.grad if leaf.grad is not None else np.zeros_like(batch)
                for leaf in leaves
            ]
        )
        if spec.ga_enabled and len(spec.models) > 1:
            branch = _align_batch(branch, spec.tau, spec.conflict_rule)
        grad = branch.sum(axis=0)
        if single:
            return float(per_sample.value[0]), grad[0]
        return per_sample.value.copy(), grad


# ---------------------------------------------------------------------------
# longitudinal attack
# ---------------------------------------------------------------------------


def longitude_attack(
    spec: EnsembleSpec,
    x: np.ndarray,
    y,
    config: AttackConfig,
    seed: int = 0,
    on_iterate=None,
    on_order=None,
) -> np.ndarray:
    """Attack the models one at a time, momentum and delta carried across.

    Each outer iteration takes one momentum sign-step per model; with the
    shuffle trick the visit order is redrawn uniformly every iteration.
    """
    if spec.fusion != "longitude":
        raise ConfigurationError("longitude_attack requires fusion='longitude'")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    batch = x[None] if single else x
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] == 1 and batch.shape[0] > 1:
        y = np.repeat(y, batch.shape[0])
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), ROLE_ENSEMBLE]))
    steps = config.eps * config.step_scale * make_schedule(
        config.schedule, config.iters
    )
    k = len(spec.models)
    state = PerturbationState(
        delta=np.zeros_like(batch), momentum=np.zeros_like(batch)
    )
    norm = _l1_normalize if config.normalize_grad else (lambda g: g)
    for t in range(config.iters):
        order = rng.permutation(k) if spec.ms_enabled else np.arange(k)
        if on_order is not None:
            on_order(t, order.copy())
        for idx in order:
            _, g = spec.models[int(idx)].loss_and_grad(batch + state.delta, y)
            state.momentum = config.decay * state.momentum + norm(g)
            state.delta = project_linf(
                batch, state.delta + steps[t] * np.sign(state.momentum), config.eps
            )
            state.iter = t + 1
            if on_iterate is not None:
                on_iterate(state)
    return state.delta[0] if single else state.delta
