"""Toy classifier zoo: four small architectures, SGD training, weight files.

The four architectures were picked for cheap-but-heterogeneous inductive
biases so that transfer between them is neither trivial nor hopeless:

* ``mlp2``     two dense layers
* ``cnn_a``    two 3x3 convolutions + dense head
* ``cnn_b``    three convolutions with mixed kernel sizes
* ``cnn_pool`` convolution / average-pool stacks + dense head

Weight files are self-describing: magic ``TALW1``, a version byte, the
architecture string, then named parameters with explicit extents
(little-endian u32) and float64 little-endian data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, FormatError, NumericError

ARCH_IDS = ("mlp2", "cnn_a", "cnn_b", "cnn_pool")

WEIGHT_MAGIC = b"TALW1"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    input_shape: tuple[int, int, int] = (16, 16, 1)
    classes: int = 8

    def __post_init__(self):
        if self.arch_id not in ARCH_IDS:
            raise ConfigurationError(f"unknown arch_id {self.arch_id!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError("input_shape must be (H, W, C) positive")
        if self.classes < 2:
            raise ConfigurationError("need at least two classes")

    def encode(self) -> str:
        h, w, c = self.input_shape
        return f"{self.arch_id}/{h}x{w}x{c}/{self.classes}"

    @staticmethod
    def decode(text: str) -> "ArchSpec":
        try:
            arch_id, extents, classes = text.split("/")
            h, w, c = (int(v) for v in extents.split("x"))
            return ArchSpec(arch_id, (h, w, c), int(classes))
        except (ValueError, ConfigurationError) as exc:
            raise FormatError(f"bad architecture string {text!r}: {exc}") from exc


# Layer plans: (kind, name, *args).  Conv kernels are (kh, kw, cin, cout).
def _layer_plan(spec: ArchSpec):
    h, w, c = spec.input_shape
    k = spec.classes
    if spec.arch_id == "mlp2":
        return [
            ("flatten",),
            ("dense", "fc1", h * w * c, 64),
            ("relu",),
            ("dense", "fc2", 64, k),
        ]
    if spec.arch_id == "cnn_a":
        return [
            ("conv", "conv1", 3, 3, c, 8, "same"),
            ("relu",),
            ("conv", "conv2", 3, 3, 8, 16, "same"),
            ("relu",),
            ("flatten",),
            ("dense", "fc", h * w * 16, k),
        ]
    if spec.arch_id == "cnn_b":
        return [
            ("conv", "conv1", 5, 5, c, 8, "same"),
            ("relu",),
            ("conv", "conv2", 3, 3, 8, 8, "same"),
            ("relu",),
            ("conv", "conv3", 1, 1, 8, 16, "same"),
            ("relu",),
            ("flatten",),
            ("dense", "fc", h * w * 16, k),
        ]
    if spec.arch_id == "cnn_pool":
        return [
            ("conv", "conv1", 3, 3, c, 8, "same"),
            ("relu",),
            ("pool", 2),
            ("conv", "conv2", 3, 3, 8, 16, "same"),
            ("relu",),
            ("pool", 2),
            ("flatten",),
            ("dense", "fc", (h // 4) * (w // 4) * 16, k),
        ]
    raise ConfigurationError(f"unknown arch_id {spec.arch_id!r}")


@dataclass
class Model:
    """A parameterized classifier; parameters live in ``params`` by name."""

    spec: ArchSpec
    params: dict[str, np.ndarray] = field(default_factory=dict)
    trained: bool = False
    train_seed: int | None = None

    @property
    def input_shape(self):
        return self.spec.input_shape

    @property
    def classes(self):
        return self.spec.classes

    def build_logits(self, x: ad.Var) -> ad.Var:
        out = x
        for layer in _layer_plan(self.spec):
            kind = layer[0]
            if kind == "flatten":
                n = out.value.shape[0]
                out = ad.reshape(out, (n, -1))
            elif kind == "relu":
                out = ad.relu(out)
            elif kind == "pool":
                out = ad.avg_pool2d(out, layer[1])
            elif kind == "dense":
                name = layer[1]
                out = ad.dense(
                    out,
                    ad.constant(self.params[name + ".w"]),
                    ad.constant(self.params[name + ".b"]),
                )
            elif kind == "conv":
                name = layer[1]
                out = ad.conv2d(
                    out,
                    ad.constant(self.params[name + ".w"]),
                    ad.constant(self.params[name + ".b"]),
                    padding=layer[6],
                )
        return out

    def logits(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        batch = images[None] if single else images
        if batch.shape[1:] != tuple(self.input_shape):
            raise ConfigurationError(
                f"input shape {batch.shape[1:]} does not match model input "
                f"{tuple(self.input_shape)}"
            )
        out = self.build_logits(ad.constant(batch)).value
        return out[0] if single else out

    def loss_and_grad(self, images, labels):
        """Per-sample cross-entropy losses and input gradients (batched)."""
        return ad.evaluate_with_gradient(self, images, labels, loss="ce")


def build_model(spec: ArchSpec, seed: int) -> Model:
    """Deterministic uniform fan-in initialization from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for layer in _layer_plan(spec):
        if layer[0] == "dense":
            _, name, din, dout = layer
            bound = 1.0 / np.sqrt(din)
            params[name + ".w"] = rng.uniform(-bound, bound, size=(din, dout))
            params[name + ".b"] = np.zeros(dout)
        elif layer[0] == "conv":
            _, name, kh, kw, cin, cout, _pad = layer
            bound = 1.0 / np.sqrt(kh * kw * cin)
            params[name + ".w"] = rng.uniform(
                -bound, bound, size=(kh, kw, cin, cout)
            )
            params[name + ".b"] = np.zeros(cout)
    return Model(spec=spec, params=params)


def classify(model: Model, images: np.ndarray):
    """Logits and argmax prediction (ties go to the lowest class index)."""
    logits = model.logits(images)
    predicted = np.argmax(logits, axis=-1)
    if logits.ndim == 1:
        return logits, int(predicted)
    return logits, predicted


@dataclass
class TrainReport:
    epochs: int
    train_accuracy: float
    holdout_accuracy: float
    loss_curve: list[float]


def _accuracy(model: Model, images, labels) -> float:
    _, pred = classify(model, images)
    return float(np.mean(pred == labels))


def train_model(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int = 20,
    lr: float = 0.08,
    seed: int = 0,
    batch_size: int = 64,
    momentum: float = 0.9,
    holdout_fraction: float = 0.2,
) -> TrainReport:
    """SGD-with-momentum cross-entropy training, deterministic from seed.

    The trailing ``holdout_fraction`` of the dataset is held out for the
    reported accuracy and never trained on.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[1:] != tuple(model.input_shape):
        raise ConfigurationError("dataset extents do not match model input")
    if labels.max() >= model.classes:
        raise ConfigurationError("dataset labels exceed model class count")
    n = images.shape[0]
    n_train = n - int(round(n * holdout_fraction))
    train_x, train_y = images[:n_train], labels[:n_train]
    hold_x, hold_y = images[n_train:], labels[n_train:]

    rng = np.random.default_rng(seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    loss_curve = []
    for epoch in range(epochs):
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, batch_size):
            idx = order[start : start + batch_size]
            x = ad.constant(train_x[idx])
            logits = model.build_logits(x)
            per_sample = ad.softmax_cross_entropy(logits, train_y[idx])
            total = ad.sum_all(per_sample)
            ad.backward(total)
            epoch_loss += float(total.value)
            # parameter leaves are the constant() nodes fed by build_logits;
            # collect their grads by walking the reachable set once
            grads = _param_grads(model, total)
            for name, grad in grads.items():
                velocity[name] = momentum * velocity[name] - lr * grad / len(idx)
                model.params[name] = model.params[name] + velocity[name]
        mean_loss = epoch_loss / n_train
        if not np.isfinite(mean_loss):
            raise NumericError(
                f"training diverged at epoch {epoch}", epoch=epoch
            )
        loss_curve.append(mean_loss)
    model.trained = True
    model.train_seed = seed
    return TrainReport(
        epochs=epochs,
        train_accuracy=_accuracy(model, train_x, train_y) if n_train else 0.0,
        holdout_accuracy=_accuracy(model, hold_x, hold_y) if len(hold_y) else 0.0,
        loss_curve=loss_curve,
    )


def _param_grads(model: Model, total: ad.Var) -> dict[str, np.ndarray]:
    # identify parameter leaves by array identity (constant() keeps the ref)
    by_id = {id(v): k for k, v in model.params.items()}
    grads = {}
    for node in ad._reachable(total):
        key = by_id.get(id(node.value))
        if key is not None and node.grad is not None:
            grads[key] = node.grad
    return grads


# ---------------------------------------------------------------------------
# weight file format
# ---------------------------------------------------------------------------


def save_weights(model: Model, path) -> None:
    """Write magic, version, arch string, then named float64 parameters."""
    blob = bytearray()
    blob += WEIGHT_MAGIC
    blob += struct.pack("<B", WEIGHT_VERSION)
    arch = model.spec.encode().encode("utf-8")
    blob += struct.pack("<I", len(arch)) + arch
    blob += struct.pack("<I", len(model.params))
    for name in sorted(model.params):
        data = np.ascontiguousarray(model.params[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded)) + encoded
        blob += struct.pack("<I", data.ndim)
        for extent in data.shape:
            blob += struct.pack("<I", extent)
        blob += data.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.blob):
            raise FormatError(
                f"truncated weight file while reading {what}",
                offset=self.offset,
            )
        out = self.blob[self.offset : self.offset + count]
        self.offset += count
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_weight_file(path) -> tuple[ArchSpec, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(WEIGHT_MAGIC), "magic") != WEIGHT_MAGIC:
        raise FormatError("bad magic in weight file", offset=0)
    version = r.take(1, "version")[0]
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight format version {version}", offset=5)
    arch_len = r.u32("arch length")
    spec = ArchSpec.decode(r.take(arch_len, "arch string").decode("utf-8"))
    count = r.u32("parameter count")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32("name length")
        name = r.take(name_len, "name").decode("utf-8")
        rank = r.u32("rank")
        shape = tuple(r.u32("extent") for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        raw = r.take(size * 8, f"data of {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if r.offset != len(blob):
        raise FormatError("trailing bytes after weights", offset=r.offset)
    return spec, params


def load_weights(model: Model, path) -> None:
    """Load parameters into ``model``; arch and extents must match."""
    spec, params = read_weight_file(path)
    if spec != model.spec:
        raise FormatError(
            f"weight file is for {spec.encode()}, model is {model.spec.encode()}"
        )
    for name, value in model.params.items():
        if name not in params:
            raise FormatError(f"weight file is missing parameter {name!r}")
        if params[name].shape != value.shape:
            raise FormatError(f"parameter {name!r} has wrong extents")
    model.params = params
    model.trained = True


def load_model(path) -> Model:
    """Reconstruct a trained model from a weight file alone."""
    spec, params = read_weight_file(path)
    model = build_model(spec, seed=0)
    for name in model.params:
        if name not in params or params[name].shape != model.params[name].shape:
            raise FormatError(f"parameter {name!r} missing or wrong extents")
    model.params = params
    model.trained = True
    return model
