"""Iterative gradient attacks and their gradient-side tricks.

Methods: fgsm, ifgsm, mifgsm, nifgsm, pifgsm, emifgsm, vmifgsm, gimifgsm.
Tricks: random multi-start momentum initialization, scheduled step sizes,
and dual-example gradient averaging.

Every iterate is routed through :func:`talab.projection.project_linf`, so
``||delta||_inf <= eps`` and ``x + delta in [0, 1]`` hold after every step.

The attack target is anything exposing
``loss_and_grad(images, labels) -> (losses, grads)`` - a plain
:class:`talab.models.Model`, a transform-averaged wrapper, or an ensemble
surface.  An optional ``begin_iteration(t)`` hook is invoked once per
iteration for targets that redraw state per step.

Randomness is drawn from per-image streams seeded as
``SeedSequence([seed, role, image_index])`` with a fixed integer per role,
so results do not depend on batch chunking and replays can reconstruct
every draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError
from .projection import project_linf
from .schedules import ScheduleSpec, make_schedule

METHODS = (
    "fgsm",
    "ifgsm",
    "mifgsm",
    "nifgsm",
    "pifgsm",
    "emifgsm",
    "vmifgsm",
    "gimifgsm",
)

# role tags for per-image random streams
ROLE_INIT = 1
ROLE_VMI = 2
ROLE_DUAL = 3
ROLE_TRANSFORM = 4
ROLE_ENSEMBLE = 5


@dataclass(frozen=True)
class MethodParams:
    """Per-method knobs the original attack definitions leave exposed."""

    ni_lookahead: float = 1.6 / 255
    pi_amplification: float = 2.5
    pi_kernel: int = 3
    emi_samples: int = 11
    emi_radius: float = 7.0
    vmi_samples: int = 20
    vmi_radius: float = 1.5
    gimi_pre_iters: int = 5


@dataclass(frozen=True)
class AttackConfig:
    method: str = "mifgsm"
    eps: float = 16 / 255
    iters: int = 10
    step_scale: float = 1.0
    decay: float = 1.0
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    params: MethodParams = field(default_factory=MethodParams)
    # per-step L1 gradient normalization in momentum accumulation; the
    # multi-start/dual algorithm listings accumulate raw gradients, so
    # faithful replays run with this off
    normalize_grad: bool = True
    # keep warm-up and dual iterates inside the threat model; faithful
    # replays of the listings (which never clip them) run with this off
    clip_inner: bool = True
    rgi: bool = False
    rgi_restarts: int = 5
    rgi_iters: int = 5
    dual: bool = False
    dual_count: int = 3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown attack method {self.method!r}")
        if not self.eps > 0:
            raise ConfigurationError("eps must be positive")
        if self.iters < 1:
            raise ConfigurationError("iters must be >= 1")
        if not self.step_scale > 0:
            raise ConfigurationError("step_scale must be positive")
        if self.decay < 0:
            raise ConfigurationError("decay must be nonnegative")
        if self.rgi and (self.rgi_restarts < 1 or self.rgi_iters < 1):
            raise ConfigurationError("rgi needs restarts >= 1 and iters >= 1")
        if self.dual and self.dual_count < 1:
            raise ConfigurationError("dual needs at least one dual example")


@dataclass
class PerturbationState:
    """The iterate of every attack; mutated in place by the driver."""

    delta: np.ndarray
    momentum: np.ndarray
    iter: int = 0
    duals: np.ndarray | None = None  # (n_dual, N, H, W, C)
    variance: np.ndarray | None = None
    prev_update: np.ndarray | None = None


def image_streams(seed: int, role: int, count: int) -> list[np.random.Generator]:
    """One independent generator per image, stable under batch chunking."""
    return [
        np.random.default_rng(np.random.SeedSequence([int(seed), role, i]))
        for i in range(count)
    ]


def _l1_normalize(g: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, g.ndim))
    scale = np.abs(g).mean(axis=axes, keepdims=True)
    return g / np.maximum(scale, 1e-12)


def _uniform_smooth(field_: np.ndarray, k: int) -> np.ndarray:
    """Same-padded k x k uniform-kernel smoothing, per channel."""
    if k == 1:
        return field_
    pt, pb = k // 2, k - 1 - k // 2
    padded = np.pad(field_, ((0, 0), (pt, pb), (pt, pb), (0, 0)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    return windows.mean(axis=(-2, -1))


def momentum_warmup(
    target,
    x: np.ndarray,
    y: np.ndarray,
    delta0: np.ndarray,
    iters: int,
    gamma: float,
    alpha: float,
    eps: float,
    normalize: bool,
    clip: bool,
) -> np.ndarray:
    """Accumulate momentum along a short sign-step trajectory.

    This is both the single-start momentum pre-run of gimifgsm and the
    inner loop of the multi-start initialization below.
    """
    m = np.zeros_like(x)
    delta = delta0
    for _ in range(iters):
        _, g = target.loss_and_grad(x + delta, y)
        m = gamma * m + (_l1_normalize(g) if normalize else g)
        delta = delta + alpha * np.sign(m)
        if clip:
            delta = project_linf(x, delta, eps)
    return m


def rgi_initialize(
    target,
    x: np.ndarray,
    y,
    restarts: int,
    iters: int,
    gamma: float,
    alpha: float,
    eps: float,
    seed: int,
    normalize: bool = False,
    clip: bool = False,
) -> np.ndarray:
    """Mean final momentum over ``restarts`` random starts in the eps-ball.

    Each start draws delta uniformly per coordinate in [-eps, eps]
    (pixel-clamped), runs ``iters`` momentum-accumulation steps, and the
    returned mean is meant to seed the main attack's momentum with delta
    reset to zero.  Defaults accumulate raw gradients and leave the
    exploration iterates unclipped, exactly as the listing is written.
    """
    if restarts < 1 or iters < 1:
        raise ConfigurationError("momentum initialization needs restarts, iters >= 1")
    x, y, single = _as_batch(target, x, y)
    streams = image_streams(seed, ROLE_INIT, x.shape[0])
    total = np.zeros_like(x)
    for n in range(restarts):
        draw = np.stack(
            [rng.uniform(-eps, eps, size=x.shape[1:]) for rng in streams]
        )
        delta0 = project_linf(x, draw, eps)
        total += momentum_warmup(
            target, x, y, delta0, iters, gamma, alpha, eps, normalize, clip
        )
    m0 = total / restarts
    return m0[0] if single else m0


def _as_batch(target, x, y):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        single = True
        x = x[None]
    elif x.ndim == 4:
        single = False
    else:
        raise ConfigurationError("images must be (H, W, C) or (N, H, W, C)")
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] == 1 and x.shape[0] > 1:
        y = np.repeat(y, x.shape[0])
    if y.shape[0] != x.shape[0]:
        raise ConfigurationError("label count does not match image count")
    return x, y, single


def run_attack(
    config: AttackConfig,
    target,
    x: np.ndarray,
    y,
    seed: int = 0,
    on_iterate=None,
) -> np.ndarray:
    """Craft perturbations for ``x`` (single image or batch) on ``target``.

    Returns delta with the shape of ``x``; ``x + delta`` is the
    adversarial input.  ``on_iterate(state)`` is called after every
    projected update.
    """
    x, y, single = _as_batch(target, x, y)
    method = config.method
    if method == "fgsm":
        method = "ifgsm"
        iters = 1
        steps = np.array([config.eps])
    else:
        iters = config.iters
        sched = config.schedule
        if config.dual and sched.direction != "increasing":
            sched = sched.reversed()
        steps = config.eps * config.step_scale * make_schedule(sched, iters)

    eps = config.eps
    gamma = config.decay
    p = config.params
    norm = _l1_normalize if config.normalize_grad else (lambda g: g)

    state = PerturbationState(
        delta=np.zeros_like(x), momentum=np.zeros_like(x)
    )

    # momentum initialization: multi-start mean, or the single pre-run
    warm_alpha = config.eps * config.step_scale / iters
    if config.rgi:
        state.momentum = rgi_initialize(
            target,
            x,
            y,
            config.rgi_restarts,
            config.rgi_iters,
            gamma,
            warm_alpha,
            eps,
            seed,
            normalize=config.normalize_grad,
            clip=config.clip_inner,
        )
    elif method == "gimifgsm":
        state.momentum = momentum_warmup(
            target,
            x,
            y,
            np.zeros_like(x),
            p.gimi_pre_iters,
            gamma,
            warm_alpha,
            eps,
            config.normalize_grad,
            config.clip_inner,
        )

    if config.dual:
        streams = image_streams(seed, ROLE_DUAL, x.shape[0])
        state.duals = np.stack(
            [
                project_linf(
                    x,
                    np.stack(
                        [rng.uniform(-eps, eps, size=x.shape[1:]) for rng in streams]
                    ),
                    eps,
                )
                for _ in range(config.dual_count)
            ]
        )

    if method == "emifgsm":
        state.prev_update = np.zeros_like(x)
    if method == "pifgsm":
        state.prev_update = np.zeros_like(x)  # accumulated amplified noise
    if method == "vmifgsm":
        state.variance = np.zeros_like(x)
        vmi_streams = image_streams(seed, ROLE_VMI, x.shape[0])

    for t in range(iters):
        if hasattr(target, "begin_iteration"):
            target.begin_iteration(t)
        alpha = steps[t]

        # --- gradient source: dual-example mean or the plain iterate ----
        if config.dual:
            shift = (
                p.ni_lookahead * np.sign(state.momentum)
                if method == "nifgsm"
                else 0.0
            )
            grads = []
            for n in range(config.dual_count):
                _, g_n = target.loss_and_grad(x + state.duals[n] + shift, y)
                grads.append(g_n)
            g = grads[0].copy()
            for g_n in grads[1:]:
                g = g + g_n
            g = g / config.dual_count
            for n in range(config.dual_count):
                new = state.duals[n] + alpha * np.sign(grads[n])
                state.duals[n] = (
                    project_linf(x, new, eps) if config.clip_inner else new
                )
        elif method == "nifgsm":
            point = x + state.delta + p.ni_lookahead * np.sign(state.momentum)
            _, g = target.loss_and_grad(point, y)
        elif method == "emifgsm":
            coeffs = np.linspace(-p.emi_radius, p.emi_radius, p.emi_samples)
            acc = np.zeros_like(x)
            for c in coeffs:
                _, g_c = target.loss_and_grad(
                    x + state.delta + c * alpha * state.prev_update, y
                )
                acc += g_c
            g = acc / p.emi_samples
            state.prev_update = _l1_normalize(g)
        else:
            _, g = target.loss_and_grad(x + state.delta, y)

        # --- method update rule -----------------------------------------
        if method == "ifgsm":
            direction = g
        elif method in ("mifgsm", "nifgsm", "emifgsm", "gimifgsm"):
            state.momentum = gamma * state.momentum + norm(g)
            direction = state.momentum
        elif method == "vmifgsm":
            state.momentum = gamma * state.momentum + norm(g + state.variance)
            direction = state.momentum
            if config.dual:
                _, g_plain = target.loss_and_grad(x + state.delta, y)
            else:
                g_plain = g
            radius = p.vmi_radius * eps
            acc = np.zeros_like(x)
            for _ in range(p.vmi_samples):
                noise = np.stack(
                    [
                        rng.uniform(-radius, radius, size=x.shape[1:])
                        for rng in vmi_streams
                    ]
                )
                _, g_s = target.loss_and_grad(x + state.delta + noise, y)
                acc += g_s
            state.variance = acc / p.vmi_samples - g_plain
        elif method == "pifgsm":
            beta = p.pi_amplification
            state.prev_update = state.prev_update + beta * alpha * np.sign(g)
            cut = np.maximum(np.abs(state.prev_update) - eps, 0.0) * np.sign(
                state.prev_update
            )
            projection = beta * alpha * np.sign(_uniform_smooth(cut, p.pi_kernel))
            state.prev_update = state.prev_update + projection
            state.delta = project_linf(
                x, state.delta + beta * alpha * np.sign(g) + projection, eps
            )
            state.iter = t + 1
            if on_iterate is not None:
                on_iterate(state)
            continue
        else:
            raise ConfigurationError(f"unknown attack method {method!r}")

        state.delta = project_linf(
            x, state.delta + alpha * np.sign(direction), eps
        )
        state.iter = t + 1
        if on_iterate is not None:
            on_iterate(state)

    return state.delta[0] if single else state.delta


def dual_example_attack(
    target,
    x: np.ndarray,
    y,
    config: AttackConfig,
    count: int = 3,
    schedule: ScheduleSpec | None = None,
    seed: int = 0,
    on_iterate=None,
) -> np.ndarray:
    """Dual-example attack: auxiliary iterates supply the gradients.

    ``count`` dual perturbations start from random draws in the eps-ball
    and follow sign steps with an increasing schedule; the main iterate is
    driven by the mean of their gradients.  ``count`` = 1 is the vanilla
    single-dual variant.
    """
    if count < 1:
        raise ConfigurationError("need at least one dual example")
    sched = schedule if schedule is not None else config.schedule
    if sched.direction != "increasing":
        sched = sched.reversed()
    cfg = replace(config, dual=True, dual_count=count, schedule=sched)
    return run_attack(cfg, target, x, y, seed=seed, on_iterate=on_iterate)


def adjusted_preset(method: str) -> AttackConfig:
    """Per-method hyper-parameter preset tuned for remote-API attacks."""
    base = AttackConfig(method=method)
    if method == "ifgsm":
        return replace(base, iters=2)
    if method == "mifgsm":
        return replace(base, iters=5, decay=1.2)
    if method == "pifgsm":
        return replace(base, iters=18, step_scale=0.8, decay=0.95)
    if method == "vmifgsm":
        return replace(
            base, iters=32, decay=1.0, params=MethodParams(vmi_samples=15)
        )
    if method == "gimifgsm":
        return replace(
            base, iters=4, decay=1.3, params=MethodParams(gimi_pre_iters=9)
        )
    return base
