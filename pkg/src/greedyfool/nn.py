"""Small networks on top of :mod:`greedyfool.autodiff`, their trainer and
checkpoint container.

Every network is a pure function of ``(params, x)``. Classifier inputs live
on the 0-255 scale and are normalised inside the first layer.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .losses import LossSpec, loss_tensor

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass(frozen=True)
class InputSpec:
    channels: int
    height: int
    width: int
    scale: float = 255.0

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    weight_decay: float = 0.0
    momentum: float = 0.9

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def _dense(x, p, name):
    return ad.matmul(x, p[name + ".w"]) + p[name + ".b"]


def _conv(x, p, name, stride=1, pad=1):
    return ad.conv2d(x, p[name + ".w"], p[name + ".b"], stride=stride, pad=pad)


class Network:
    """Base class: holds parameters, input spec, architecture description."""

    kind = "network"

    def __init__(self, spec: InputSpec, params: dict[str, np.ndarray], arch: dict,
                 metadata: dict | None = None):
        self.spec = spec
        self.arch = dict(arch)
        self.metadata = dict(metadata or {})
        self._params: dict[str, np.ndarray] = {}
        self._tensors: dict[str, ad.Tensor] = {}
        self.params = params

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self._params

    @params.setter
    def params(self, values: dict[str, np.ndarray]) -> None:
        self._params = {k: np.array(v) for k, v in values.items()}
        for v in self._params.values():
            v.flags.writeable = False
        self._tensors = {k: ad.Tensor(v, _owned=True) for k, v in self._params.items()}

    @property
    def param_tensors(self) -> dict[str, ad.Tensor]:
        return self._tensors

    @property
    def dtype(self):
        return next(iter(self._params.values())).dtype

    def forward(self, x: ad.Tensor, p: dict[str, ad.Tensor]) -> ad.Tensor:
        raise NotImplementedError

    def _batch(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.shape == self.spec.shape:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.spec.shape:
            raise ValueError(f"input shape {x.shape} does not match model input {self.spec.shape}")
        return x.astype(self.dtype, copy=False)

    def __call__(self, x) -> np.ndarray:
        """Raw outputs for one image (C, H, W) or a batch (N, C, H, W)."""
        single = np.asarray(x).shape == self.spec.shape
        out = self.forward(ad.Tensor(self._batch(x), _owned=True), self._tensors).data
        return np.array(out[0] if single else out)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self._params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._params[k]).tobytes())
        return h.hexdigest()


class Classifier(Network):
    """Anything producing class logits; provides the attack-facing API."""

    @property
    def n_classes(self) -> int:
        return int(self.arch["classes"])

    def logits(self, x) -> np.ndarray:
        return self(x)

    def predict(self, x, batch_size: int = 256):
        x = np.asarray(x)
        if x.shape == self.spec.shape:
            return int(np.argmax(self(x)))
        out = [np.argmax(self(x[i:i + batch_size]), axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def loss_and_gradient(self, x, loss: LossSpec) -> tuple[float, np.ndarray, np.ndarray]:
        """(loss value, logits, d loss / d x) for a single image."""
        if not isinstance(loss, LossSpec):
            raise ValueError(f"unsupported loss spec {loss!r}")
        x = np.asarray(x)
        if x.shape != self.spec.shape:
            raise ValueError(f"input shape {x.shape} does not match model input {self.spec.shape}")
        xt = ad.Tensor(self._batch(x), _owned=True)
        with ad.Record() as rec:
            logits = self.forward(xt, self._tensors)
            value = loss_tensor(logits, loss)
        grads = rec.backward(value)
        return float(value.data), np.array(logits.data[0], dtype=np.float64), \
            np.asarray(grads[xt][0], dtype=np.float64)

    def input_gradient(self, x, loss: LossSpec) -> np.ndarray:
        return self.loss_and_gradient(x, loss)[2]


class ConvClassifier(Classifier):
    """conv-relu-pool x2, dense-relu, dense."""

    kind = "conv-classifier"

    @classmethod
    def create(cls, spec: InputSpec, classes: int = 10, widths=(8, 16), hidden: int = 64,
               seed: int = 0, dtype=np.float32) -> ConvClassifier:
        rng = np.random.default_rng(seed)
        w1, w2 = widths
        flat = w2 * (spec.height // 4) * (spec.width // 4)
        params = {
            "conv1.w": _he(rng, (w1, spec.channels, 3, 3), 9 * spec.channels, dtype),
            "conv1.b": np.zeros(w1, dtype),
            "conv2.w": _he(rng, (w2, w1, 3, 3), 9 * w1, dtype),
            "conv2.b": np.zeros(w2, dtype),
            "fc1.w": _he(rng, (flat, hidden), flat, dtype),
            "fc1.b": np.zeros(hidden, dtype),
            "fc2.w": _he(rng, (hidden, classes), hidden, dtype) * 0.5,
            "fc2.b": np.zeros(classes, dtype),
        }
        arch = {"kind": cls.kind, "classes": classes, "widths": list(widths), "hidden": hidden}
        return cls(spec, params, arch)

    def forward(self, x, p):
        h = ad.scale(x, 1.0 / self.spec.scale)
        h = ad.max_pool2d(ad.relu(_conv(h, p, "conv1")), 2)
        h = ad.max_pool2d(ad.relu(_conv(h, p, "conv2")), 2)
        h = ad.relu(_dense(ad.flatten(h), p, "fc1"))
        return _dense(h, p, "fc2")


class LinearClassifier(Classifier):
    """logits = flatten(x) @ W + b, with no input normalisation."""

    kind = "linear"

    @classmethod
    def from_weights(cls, spec: InputSpec, weights, bias=None) -> LinearClassifier:
        weights = np.asarray(weights, dtype=np.float64)
        d = int(np.prod(spec.shape))
        if weights.ndim != 2 or weights.shape[0] != d:
            raise ValueError(f"weights must have shape ({d}, classes), got {weights.shape}")
        bias = np.zeros(weights.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
        arch = {"kind": cls.kind, "classes": int(weights.shape[1])}
        return cls(spec, {"fc.w": weights, "fc.b": bias}, arch)

    def forward(self, x, p):
        return _dense(ad.flatten(x), p, "fc")


class DistortionGenerator(Network):
    """Three leaky-relu convs and a 1-channel sigmoid conv: image -> (0,1)^{HxW}.

    Operates on the [0, 1] value scale. The sigmoid is squashed into
    [OUTPUT_MARGIN, 1 - OUTPUT_MARGIN] so saturated float32 outputs stay
    strictly inside the open interval.
    """

    OUTPUT_MARGIN = 1e-6

    kind = "generator"

    @classmethod
    def create(cls, spec: InputSpec, width: int = 16, seed: int = 0,
               dtype=np.float32) -> DistortionGenerator:
        rng = np.random.default_rng(seed)
        c = spec.channels
        params = {
            "g1.w": _he(rng, (width, c, 3, 3), 9 * c, dtype), "g1.b": np.zeros(width, dtype),
            "g2.w": _he(rng, (width, width, 3, 3), 9 * width, dtype), "g2.b": np.zeros(width, dtype),
            "g3.w": _he(rng, (width, width, 3, 3), 9 * width, dtype), "g3.b": np.zeros(width, dtype),
            "g4.w": _he(rng, (1, width, 3, 3), 9 * width, dtype) * 0.1, "g4.b": np.zeros(1, dtype),
        }
        arch = {"kind": cls.kind, "width": width}
        return cls(InputSpec(spec.channels, spec.height, spec.width, 1.0), params, arch)

    def forward(self, x, p):
        h = ad.leaky_relu(_conv(x, p, "g1"))
        h = ad.leaky_relu(_conv(h, p, "g2"))
        h = ad.leaky_relu(_conv(h, p, "g3"))
        m = self.OUTPUT_MARGIN
        return ad.scale(ad.sigmoid(_conv(h, p, "g4")), 1.0 - 2.0 * m) + m


class Discriminator(Network):
    """Three stride-2 leaky-relu convs, dense, sigmoid -> P(clean)."""

    kind = "discriminator"

    @classmethod
    def create(cls, spec: InputSpec, width: int = 16, seed: int = 0,
               dtype=np.float32) -> Discriminator:
        rng = np.random.default_rng(seed)
        c = spec.channels
        h, w = spec.height, spec.width
        for _ in range(3):
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        flat = 2 * width * h * w
        params = {
            "d1.w": _he(rng, (width, c, 3, 3), 9 * c, dtype), "d1.b": np.zeros(width, dtype),
            "d2.w": _he(rng, (2 * width, width, 3, 3), 9 * width, dtype),
            "d2.b": np.zeros(2 * width, dtype),
            "d3.w": _he(rng, (2 * width, 2 * width, 3, 3), 18 * width, dtype),
            "d3.b": np.zeros(2 * width, dtype),
            "fc.w": _he(rng, (flat, 1), flat, dtype) * 0.1, "fc.b": np.zeros(1, dtype),
        }
        arch = {"kind": cls.kind, "width": width}
        return cls(InputSpec(spec.channels, spec.height, spec.width, 1.0), params, arch)

    def forward(self, x, p):
        h = ad.leaky_relu(_conv(x, p, "d1", stride=2))
        h = ad.leaky_relu(_conv(h, p, "d2", stride=2))
        h = ad.leaky_relu(_conv(h, p, "d3", stride=2))
        return ad.sigmoid(_dense(ad.flatten(h), p, "fc"))


ARCHITECTURES: dict[str, type[Network]] = {
    cls.kind: cls for cls in (ConvClassifier, LinearClassifier, DistortionGenerator, Discriminator)
}


# -- optimisation -----------------------------------------------------------


class Optimizer:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        cfg = self.config
        self.t += 1
        out = {}
        for name, value in params.items():
            g = grads[name]
            if cfg.weight_decay:
                g = g + cfg.weight_decay * value
            st = self.state.setdefault(name, {"m": np.zeros_like(value), "v": np.zeros_like(value)})
            if cfg.optimizer == "adam":
                st["m"] = 0.9 * st["m"] + 0.1 * g
                st["v"] = 0.999 * st["v"] + 0.001 * g * g
                mhat = st["m"] / (1 - 0.9 ** self.t)
                vhat = st["v"] / (1 - 0.999 ** self.t)
                update = cfg.lr * mhat / (np.sqrt(vhat) + 1e-8)
            else:
                st["m"] = cfg.momentum * st["m"] + g
                update = cfg.lr * st["m"]
            out[name] = (value - update).astype(value.dtype)
        return out


def accuracy(model: Classifier, images, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(np.asarray(images)) == np.asarray(labels)))


def fit(model: Classifier, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
        eval_set: tuple[np.ndarray, np.ndarray] | None = None) -> list[dict]:
    """Minimise softmax cross-entropy in place; returns the per-epoch curve."""
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("training set is empty")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError("labels out of range for the model's class count")
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(config)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = ad.Tensor(images[idx].astype(model.dtype), _owned=True)
            with ad.Record() as rec:
                loss = ad.softmax_cross_entropy(model.forward(xb, model.param_tensors), labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(epoch)
            grads = rec.backward(loss)
            model.params = opt.step(model.params,
                                    {k: grads[t] for k, t in model.param_tensors.items()})
            total += value * len(idx)
            seen += len(idx)
        row = {"epoch": epoch + 1, "loss": total / seen,
               "train_accuracy": accuracy(model, images, labels)}
        if eval_set is not None:
            row["test_accuracy"] = accuracy(model, *eval_set)
        curve.append(row)
        logger.info("epoch %d: %s", epoch + 1, row)
    return curve


def train_classifier(train, config: TrainConfig | None = None, test=None, *,
                     widths=(8, 16), hidden: int = 64) -> ConvClassifier:
    """Train a desk-scale ConvClassifier on a LabeledImageSet.

    Final train/test accuracy and the training curve end up in
    ``model.metadata``.
    """
    config = config or TrainConfig()
    if len(train) == 0:
        raise ValueError("training set is empty")
    c, h, w = train.images.shape[1:]
    model = ConvClassifier.create(InputSpec(c, h, w), classes=train.n_classes,
                                  widths=widths, hidden=hidden, seed=config.seed)
    eval_set = (test.images, test.labels) if test is not None else None
    curve = fit(model, train.images, train.labels, config, eval_set)
    model.metadata.update({
        "train_config": asdict(config),
        "curve": curve,
        "train_accuracy": curve[-1]["train_accuracy"] if curve else accuracy(model, train.images, train.labels),
    })
    if test is not None:
        model.metadata["test_accuracy"] = accuracy(model, test.images, test.labels)
    return model


def train_binary_detector(clean, adversarial, config: TrainConfig | None = None,
                          holdout: float = 0.3, *, widths=(8, 16), hidden: int = 32) -> ConvClassifier:
    """Clean (label 0) vs adversarial (label 1) classifier.

    Pairs sharing an index go to the same split so a clean image and its
    attacked version never straddle train and held-out data. The held-out
    accuracy is ``metadata["heldout_accuracy"]``; 0.5 means the two sets are
    indistinguishable.
    """
    config = config or TrainConfig(epochs=8)
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if len(clean) == 0 or len(adversarial) == 0:
        raise ValueError("both image sets must be non-empty")
    if clean.shape[1:] != adversarial.shape[1:]:
        raise ValueError(f"shape mismatch: {clean.shape[1:]} vs {adversarial.shape[1:]}")
    rng = np.random.default_rng(config.seed)

    def split(n):
        order = rng.permutation(n)
        k = max(1, int(round(n * holdout)))
        return order[k:], order[:k]

    if len(clean) == len(adversarial):
        tr, te = split(len(clean))
        tr_c, te_c, tr_a, te_a = tr, te, tr, te
    else:
        tr_c, te_c = split(len(clean))
        tr_a, te_a = split(len(adversarial))
    x_tr = np.concatenate([clean[tr_c], adversarial[tr_a]])
    y_tr = np.concatenate([np.zeros(len(tr_c), np.int64), np.ones(len(tr_a), np.int64)])
    x_te = np.concatenate([clean[te_c], adversarial[te_a]])
    y_te = np.concatenate([np.zeros(len(te_c), np.int64), np.ones(len(te_a), np.int64)])
    c, h, w = clean.shape[1:]
    model = ConvClassifier.create(InputSpec(c, h, w), classes=2, widths=widths, hidden=hidden,
                                  seed=config.seed)
    curve = fit(model, x_tr, y_tr, config)
    model.metadata.update({
        "train_config": asdict(config),
        "curve": curve,
        "heldout_accuracy": accuracy(model, x_te, y_te),
        "heldout_size": int(len(y_te)),
    })
    return model


# -- checkpoints ------------------------------------------------------------

MAGIC = b"GFCKPT\x00"
FORMAT_VERSION = 1


def save_checkpoint(model: Network, path) -> None:
    """Write a deterministic, self-describing checkpoint.

    Layout: magic, u16 version, u32 header length, JSON header, raw
    little-endian parameter bytes in header order.
    """
    tensors, blobs, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = arr.tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "arch": model.arch,
        "input_spec": asdict(model.spec),
        "metadata": model.metadata,
        "tensors": tensors,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", FORMAT_VERSION, len(raw)) + raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Network:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    fixed = len(MAGIC) + 6
    if len(data) < fixed or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<HI", data[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if fixed + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[fixed:fixed + hlen])
        body = data[fixed + hlen:]
        params = {}
        for t in header["tensors"]:
            end = t["offset"] + t["nbytes"]
            if end > len(body):
                raise CheckpointError(f"{path}: tensor {t['name']} truncated")
            params[t["name"]] = np.frombuffer(body[t["offset"]:end], dtype=np.dtype(t["dtype"])) \
                .reshape(t["shape"]).copy()
        cls = ARCHITECTURES[header["arch"]["kind"]]
        spec = InputSpec(**header["input_spec"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    return cls(spec, params, header["arch"], header.get("metadata"))


@dataclass
class TrainingManifest:
    """Run-level record written next to a checkpoint (not inside it)."""

    checkpoint: str
    dataset: str
    curve: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
