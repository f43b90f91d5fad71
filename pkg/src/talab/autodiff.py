"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is a flat tape: every :class:`Var` records its parents and one
vector-Jacobian closure per parent, and carries a global construction-order
index.  Backward walks the reachable nodes in reverse construction order,
which is a valid topological order because an operation can only consume
values that already exist.

All values are numpy ``float64`` arrays.  Spatial data uses the layout
``(H, W, C)`` for a single image and ``(N, H, W, C)`` for a batch; dense
layers operate on ``(N, D)``.  Models evaluate each sample independently,
so the gradient of a summed per-sample loss holds each sample's own
gradient in its batch slice.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError

_order_counter = itertools.count()


class Var:
    """One node of the compute graph: a value plus backward closures."""

    __slots__ = ("value", "parents", "vjps", "order", "grad")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps
        self.order = next(_order_counter)
        self.grad = None

    def __repr__(self):
        return f"Var(order={self.order}, shape={self.value.shape})"


def constant(value) -> Var:
    """Leaf node; gradients are accumulated but nothing flows past it."""
    return Var(value)


def _reachable(out: Var) -> list[Var]:
    seen = {}
    stack = [out]
    while stack:
        node = stack.pop()
        if node.order in seen:
            continue
        seen[node.order] = node
        stack.extend(node.parents)
    return [seen[k] for k in sorted(seen)]


def backward(out: Var) -> None:
    """Accumulate ``grad`` on every node reachable from ``out``.

    ``out`` must be scalar-valued (shape () or size 1).
    """
    if out.value.size != 1:
        raise ConfigurationError("backward() requires a scalar output node")
    nodes = _reachable(out)
    for node in nodes:
        node.grad = None
    out.grad = np.ones_like(out.value)
    for node in reversed(nodes):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contribution = vjp(node.grad)
            if parent.grad is None:
                parent.grad = contribution
            else:
                parent.grad = parent.grad + contribution


def check_finite(out: Var) -> None:
    """Raise :class:`NumericError` naming the first non-finite node."""
    if np.isfinite(out.value).all():
        return
    for node in _reachable(out):
        if not np.isfinite(node.value).all():
            raise NumericError(
                f"non-finite value at graph node {node.order}",
                node_index=node.order,
            )


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ConfigurationError(
            f"add shape mismatch: {a.value.shape} vs {b.value.shape}"
        )
    return Var(a.value + b.value, (a, b), (lambda g: g, lambda g: g))


def add_const(a: Var, c) -> Var:
    c = np.asarray(c, dtype=np.float64)
    return Var(a.value + c, (a,), (lambda g: g,))


def mul_const(a: Var, c) -> Var:
    c = np.asarray(c, dtype=np.float64)
    return Var(a.value * c, (a,), (lambda g: g * c,))


def scale(a: Var, s: float) -> Var:
    return Var(a.value * s, (a,), (lambda g: g * s,))


def relu(a: Var) -> Var:
    mask = a.value > 0.0
    return Var(a.value * mask, (a,), (lambda g: g * mask,))


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return Var(a.value.reshape(shape), (a,), (lambda g: g.reshape(old),))


def log(a: Var) -> Var:
    val = a.value
    return Var(np.log(val), (a,), (lambda g: g / val,))


def sum_all(a: Var) -> Var:
    shape = a.value.shape
    return Var(a.value.sum(), (a,), (lambda g: np.broadcast_to(g, shape).copy(),))


def mean_vars(items: list[Var]) -> Var:
    """Arithmetic mean of same-shaped nodes, summed in list order."""
    inv = 1.0 / len(items)
    value = items[0].value.copy()
    for item in items[1:]:
        value += item.value
    value *= inv
    return Var(value, tuple(items), tuple(lambda g: g * inv for _ in items))


def weighted_sum(items: list[Var], weights) -> Var:
    weights = [float(w) for w in weights]
    if len(items) != len(weights):
        raise ConfigurationError("weighted_sum: weight/item count mismatch")
    value = items[0].value * weights[0]
    for item, w in zip(items[1:], weights[1:]):
        value = value + item.value * w
    vjps = tuple((lambda g, w=w: g * w) for w in weights)
    return Var(value, tuple(items), vjps)


def dense(x: Var, w: Var, b: Var) -> Var:
    """x (N, Din) @ w (Din, Dout) + b (Dout)."""
    value = x.value @ w.value + b.value
    return Var(
        value,
        (x, w, b),
        (
            lambda g: g @ w.value.T,
            lambda g: x.value.T @ g,
            lambda g: g.sum(axis=0),
        ),
    )


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------


def _pad_amounts(kh: int, kw: int, padding: str):
    if padding == "same":
        return kh // 2, kh - 1 - kh // 2, kw // 2, kw - 1 - kw // 2
    if padding == "valid":
        return 0, 0, 0, 0
    raise ConfigurationError(f"unknown conv padding {padding!r}")


def conv2d(x: Var, w: Var, b: Var, padding: str = "same") -> Var:
    """Direct stride-1 2D convolution (cross-correlation).

    x: (N, H, W, Cin); w: (kh, kw, Cin, Cout); b: (Cout,).
    """
    kh, kw, cin, cout = w.value.shape
    if x.value.ndim != 4 or x.value.shape[3] != cin:
        raise ConfigurationError(
            f"conv2d input shape {x.value.shape} incompatible with kernel "
            f"{w.value.shape}"
        )
    pt, pb, pl, pr = _pad_amounts(kh, kw, padding)
    xp = np.pad(x.value, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    n, hp, wp, _ = xp.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    # windows: (N, OH, OW, C, kh, kw) -> cols (N, OH, OW, kh*kw*Cin)
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n, oh, ow, kh * kw * cin)
    wmat = w.value.reshape(kh * kw * cin, cout)
    value = cols @ wmat + b.value

    def vjp_x(g):
        gcols = (g @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + oh, j : j + ow, :] += gcols[:, :, :, i, j, :]
        return gxp[:, pt : pt + x.value.shape[1], pl : pl + x.value.shape[2], :]

    def vjp_w(g):
        gmat = np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2]))
        return gmat.reshape(kh, kw, cin, cout)

    return Var(
        value, (x, w, b), (vjp_x, vjp_w, lambda g: g.sum(axis=(0, 1, 2)))
    )


def avg_pool2d(x: Var, k: int) -> Var:
    n, h, w, c = x.value.shape
    if h % k or w % k:
        raise ConfigurationError(f"avg_pool2d: extents {h}x{w} not divisible by {k}")
    value = x.value.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def vjp(g):
        g = g[:, :, None, :, None, :] / (k * k)
        return np.broadcast_to(g, (n, h // k, k, w // k, k, c)).reshape(n, h, w, c)

    return Var(value, (x,), (vjp,))


# ---------------------------------------------------------------------------
# losses and probability ops
# ---------------------------------------------------------------------------


def _stable_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: Var) -> Var:
    p = _stable_softmax(z.value)

    def vjp(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return p * (g - dot)

    return Var(p, (z,), (vjp,))


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Per-sample cross-entropy on softmaxed logits; logits (N, C)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    z = logits.value
    if z.ndim != 2 or labels.shape[0] != z.shape[0]:
        raise ConfigurationError("softmax_cross_entropy expects (N, C) logits")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + z.max(axis=1)
    value = lse - z[np.arange(z.shape[0]), labels]
    p = _stable_softmax(z)
    onehot = np.zeros_like(z)
    onehot[np.arange(z.shape[0]), labels] = 1.0

    def vjp(g):
        return (p - onehot) * g[:, None]

    return Var(value, (logits,), (vjp,))


def pick_class(x: Var, labels) -> Var:
    """Select one column per row: x (N, C), labels (N,) -> (N,)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows = np.arange(x.value.shape[0])
    value = x.value[rows, labels]

    def vjp(g):
        out = np.zeros_like(x.value)
        out[rows, labels] = g
        return out

    return Var(value, (x,), (vjp,))


# ---------------------------------------------------------------------------
# linear spatial resampling (resize / pad / rotate / spectral)
# ---------------------------------------------------------------------------


def apply_axis_maps(x: Var, ah, aw) -> Var:
    """Separable linear resampling: rows by ``ah``, columns by ``aw``.

    x: (N, H, W, C); ah: (Ho, H) or per-sample (N, Ho, H); aw likewise.
    The adjoint (transposed maps) is the exact vector-Jacobian product.
    """
    ah = np.asarray(ah, dtype=np.float64)
    aw = np.asarray(aw, dtype=np.float64)
    if ah.ndim == 2:
        value = np.einsum("ij,njwc,kw->nikc", ah, x.value, aw, optimize=True)

        def vjp(g):
            return np.einsum("ij,nikc,kw->njwc", ah, g, aw, optimize=True)

    else:
        value = np.einsum("nij,njwc,nkw->nikc", ah, x.value, aw, optimize=True)

        def vjp(g):
            return np.einsum("nij,nikc,nkw->njwc", ah, g, aw, optimize=True)

    return Var(value, (x,), (vjp,))


def apply_pixel_map(x: Var, m) -> Var:
    """Full linear resampling: m is (HWo, HWi) or per-sample (N, HWo, HWi).

    Output spatial extents must keep the input aspect (square maps only
    need the same H, W on both sides, which is all the attacks use).
    """
    m = np.asarray(m, dtype=np.float64)
    n, h, w, c = x.value.shape
    flat = x.value.reshape(n, h * w, c)
    if m.ndim == 2:
        value = np.einsum("oi,nic->noc", m, flat)

        def vjp(g):
            return np.einsum("oi,noc->nic", m, g.reshape(n, -1, c)).reshape(
                n, h, w, c
            )

    else:
        value = np.einsum("noi,nic->noc", m, flat)

        def vjp(g):
            return np.einsum("noi,noc->nic", m, g.reshape(n, -1, c)).reshape(
                n, h, w, c
            )

    return Var(value.reshape(n, h, w, c), (x,), (vjp,))


# ---------------------------------------------------------------------------
# gradient evaluation entry points
# ---------------------------------------------------------------------------


def evaluate_with_gradient(model, image, label, loss: str = "ce"):
    """Loss value and exact input gradient for one image (or a batch).

    ``model`` must expose ``input_shape``, ``classes`` and
    ``build_logits(x: Var) -> Var``.  Returns ``(loss, grad)`` where
    ``grad`` has the shape of ``image``; for a batch, ``loss`` is the
    per-sample vector.
    """
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == len(model.input_shape)
    batch = image[None] if single else image
    labels = np.asarray(label, dtype=np.int64).reshape(-1)
    if batch.shape[1:] != tuple(model.input_shape):
        raise ConfigurationError(
            f"input shape {batch.shape[1:]} does not match model input "
            f"{tuple(model.input_shape)}"
        )
    if labels.min() < 0 or labels.max() >= model.classes:
        raise ConfigurationError(
            f"label out of range for {model.classes} classes"
        )
    if labels.shape[0] != batch.shape[0]:
        raise ConfigurationError("label count does not match batch size")

    x = constant(batch)
    logits = model.build_logits(x)
    if loss == "ce":
        per_sample = softmax_cross_entropy(logits, labels)
    else:
        raise ConfigurationError(f"unknown loss kind {loss!r}")
    total = sum_all(per_sample)
    if not np.isfinite(total.value):
        check_finite(total)
    backward(total)
    grad = x.grad
    if not np.isfinite(grad).all():
        raise NumericError("non-finite input gradient", node_index=x.order)
    if single:
        return float(per_sample.value[0]), grad[0]
    return per_sample.value.copy(), grad


def finite_difference_gradient(f, x, h: float, coords) -> list[float]:
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h at each coord."""
    if not h > 0:
        raise ConfigurationError("finite differences require h > 0")
    x = np.asarray(x, dtype=np.float64)
    out = []
    for coord in coords:
        idx = tuple(np.atleast_1d(coord)) if not np.isscalar(coord) else (coord,)
        for axis, extent in zip(idx, x.shape):
            if not 0 <= axis < extent:
                raise ConfigurationError(f"coordinate {idx} outside {x.shape}")
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite function value in finite differences")
        out.append((fp - fm) / (2.0 * h))
    return out
