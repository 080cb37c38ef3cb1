"""Deterministic base learners, the one-cycle LR schedule, and the
width-scaling / FLOP cost model.

Three learner kinds: nearest_centroid (closed form), logistic (softmax
regression), and a one-hidden-layer ReLU mlp. Gradient learners run
plain SGD (momentum 0, weight decay 0) with a one-cycle schedule.
Training is a pure function of (spec, sample multiset): samples are put
into a canonical content order before the seeded shuffling, so input
order never matters.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

_MODEL_MAGIC = b"DPAM"
_MODEL_VERSION = 1
_KIND_TAGS = {"nearest_centroid": 0, "logistic": 1, "mlp": 2}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}

# Squared-distance offset for classes absent from the training partition;
# large enough that a missing class is never nearest.
_MISSING_CLASS_PENALTY = 1e30


class ModelFormatError(ValueError):
    """Malformed model file."""


def one_cycle_lr(step: int, total_steps: int, lr_start: float = 0.05,
                 lr_peak: float = 1.0, lr_final: float = 0.0005,
                 warm_frac: float = 0.3) -> float:
    """Linear ramp to the peak over the warmup fraction, then linear decay."""
    if not 0.0 < warm_frac < 1.0:
        raise ValueError("warm_frac must be in (0, 1)")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm_steps = warm_frac * total_steps
    if step <= warm_steps:
        t = step / warm_steps if warm_steps > 0 else 1.0
        return lr_start + t * (lr_peak - lr_start)
    t = (step - warm_steps) / (total_steps - warm_steps)
    return lr_peak + t * (lr_final - lr_peak)


def scaled_width(base_width: int, k: int) -> int:
    """base_width / sqrt(k), rounded to the nearest even integer (min 2)."""
    if base_width < 2 or base_width % 2 != 0:
        raise ValueError("base_width must be even and >= 2")
    if k < 1:
        raise ValueError("k must be >= 1")
    half = base_width / (2.0 * math.sqrt(k))
    return max(2, 2 * int(math.floor(half + 0.5)))


@dataclass(frozen=True)
class ArchCost:
    """Counts of cost blocks scaling quadratically vs linearly in width."""
    quadratic_units: int
    linear_units: int

    def __post_init__(self):
        if self.quadratic_units < 0 or self.linear_units < 0:
            raise ValueError("unit counts must be nonnegative")


def flop_body(cost: ArchCost, width: int) -> int:
    """Per-prediction cost at a given hidden width."""
    if width < 1:
        raise ValueError("width must be >= 1")
    return cost.quadratic_units * width * width + cost.linear_units * width


def ensemble_flops(cost: ArchCost, base_width: int, k: int) -> int:
    """Total cost of k width-scaled models for one prediction."""
    return k * flop_body(cost, scaled_width(base_width, k))


@dataclass(frozen=True)
class LearnerSpec:
    kind: str = "nearest_centroid"
    hidden_width: int = 32
    epochs: int = 20
    batch_size: int = 32
    lr_start: float = 0.05
    lr_peak: float = 1.0
    lr_final: float = 0.0005
    warm_frac: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_TAGS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.kind in ("logistic", "mlp"):
            if not self.lr_start < self.lr_peak:
                raise ValueError("lr_start must be < lr_peak")
            if not self.lr_final < self.lr_start:
                raise ValueError("lr_final must be < lr_start")

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class BaseModel:
    kind: str
    num_classes: int
    input_shape: tuple[int, int, int]
    params: dict[str, np.ndarray]
    training_fingerprint: str

    @property
    def input_dim(self) -> int:
        h, w, c = self.input_shape
        return h * w * c

    def _as_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape == self.input_shape:
            x = x[None, ...]
        elif x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape} does not match model "
                             f"shape {self.input_shape}")
        return x.reshape(x.shape[0], -1).astype(np.float64) / 255.0

    def scores(self, x: np.ndarray) -> np.ndarray:
        """(N, num_classes) class scores; larger is better."""
        xb = self._as_batch(x)
        if self.kind == "nearest_centroid":
            cents = self.params["centroids"]
            d2 = ((xb[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
            d2 = d2 + self.params["missing_penalty"][None, :]
            return -d2
        if self.kind == "logistic":
            return xb @ self.params["W"] + self.params["b"]
        hidden = np.maximum(0.0, xb @ self.params["W1"] + self.params["b1"])
        return hidden @ self.params["W2"] + self.params["b2"]

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        s = self.scores(x)
        # argmax takes the first (smallest-index) maximum, the tie-break rule
        return s.argmax(axis=1)

    def predict(self, x: np.ndarray) -> int:
        return int(self.predict_batch(np.asarray(x)[None, ...])[0])

    def predict_topn(self, x: np.ndarray, n: int) -> list[int]:
        if not 1 <= n <= self.num_classes:
            raise ValueError(f"n must be in [1, {self.num_classes}]")
        s = self.scores(np.asarray(x)[None, ...])[0]
        order = np.lexsort((np.arange(s.size), -s))
        return [int(i) for i in order[:n]]


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _canonical_order(pixels: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n = pixels.shape[0]
    flat = pixels.reshape(n, -1)
    keys = [(flat[i].tobytes(), int(labels[i])) for i in range(n)]
    return np.asarray(sorted(range(n), key=keys.__getitem__), dtype=np.int64)


def _fingerprint(spec: LearnerSpec, pixels: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(spec.canonical_json().encode())
    order = _canonical_order(pixels, labels)
    flat = pixels.reshape(pixels.shape[0], -1)
    for i in order:
        h.update(flat[i].tobytes())
        h.update(struct.pack("<q", int(labels[i])))
    return h.hexdigest()


def _train_centroid(x: np.ndarray, y: np.ndarray, num_classes: int) -> dict:
    dim = x.shape[1]
    centroids = np.zeros((num_classes, dim))
    penalty = np.zeros(num_classes)
    for c in range(num_classes):
        mask = y == c
        if mask.any():
            centroids[c] = x[mask].mean(axis=0)
        else:
            penalty[c] = _MISSING_CLASS_PENALTY
    return {"centroids": centroids, "missing_penalty": penalty}


def _init_params(spec: LearnerSpec, dim: int, num_classes: int,
                 rng: np.random.Generator) -> dict:
    if spec.kind == "logistic":
        return {"W": rng.standard_normal((dim, num_classes)) * 0.01,
                "b": np.zeros(num_classes)}
    h = spec.hidden_width
    return {"W1": rng.standard_normal((dim, h)) * math.sqrt(2.0 / dim),
            "b1": np.zeros(h),
            "W2": rng.standard_normal((h, num_classes)) * math.sqrt(2.0 / h),
            "b2": np.zeros(num_classes)}


def _grads(kind: str, params: dict, xb: np.ndarray, yb: np.ndarray) -> dict:
    """Mean cross-entropy gradients for one minibatch."""
    b = xb.shape[0]
    if kind == "logistic":
        probs = softmax(xb @ params["W"] + params["b"])
        probs[np.arange(b), yb] -= 1.0
        probs /= b
        return {"W": xb.T @ probs, "b": probs.sum(axis=0)}
    pre = xb @ params["W1"] + params["b1"]
    hidden = np.maximum(0.0, pre)
    probs = softmax(hidden @ params["W2"] + params["b2"])
    probs[np.arange(b), yb] -= 1.0
    probs /= b
    dhidden = probs @ params["W2"].T
    dhidden[pre <= 0] = 0.0
    return {"W1": xb.T @ dhidden, "b1": dhidden.sum(axis=0),
            "W2": hidden.T @ probs, "b2": probs.sum(axis=0)}


def cross_entropy(kind: str, params: dict, xb: np.ndarray, yb: np.ndarray) -> float:
    """Mean cross-entropy loss; used by gradient checks."""
    if kind == "logistic":
        scores = xb @ params["W"] + params["b"]
    else:
        hidden = np.maximum(0.0, xb @ params["W1"] + params["b1"])
        scores = hidden @ params["W2"] + params["b2"]
    shifted = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return float((logz - shifted[np.arange(xb.shape[0]), yb]).mean())


def train(spec: LearnerSpec, pixels: np.ndarray, labels: np.ndarray,
          num_classes: int, input_shape: tuple[int, int, int] | None = None) -> BaseModel:
    """Fit one base model; bit-reproducible for a fixed (spec, multiset)."""
    pixels = np.asarray(pixels)
    labels = np.asarray(labels, dtype=np.int64)
    if pixels.shape[0] == 0:
        raise ValueError("cannot train on an empty sample list")
    if labels.max() >= num_classes:
        raise ValueError("label out of range")
    if input_shape is None:
        input_shape = tuple(pixels.shape[1:])
    order = _canonical_order(pixels, labels)
    pixels, labels = pixels[order], labels[order]
    x = pixels.reshape(pixels.shape[0], -1).astype(np.float64) / 255.0
    fingerprint = _fingerprint(spec, pixels, labels)

    if spec.kind == "nearest_centroid":
        params = _train_centroid(x, labels, num_classes)
        return BaseModel(spec.kind, num_classes, input_shape, params, fingerprint)

    rng = np.random.Generator(np.random.PCG64(spec.seed))
    params = _init_params(spec, x.shape[1], num_classes, rng)
    n = x.shape[0]
    batches_per_epoch = math.ceil(n / spec.batch_size)
    total_steps = spec.epochs * batches_per_epoch
    step = 0
    for _ in range(spec.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            lr = one_cycle_lr(step, total_steps, spec.lr_start, spec.lr_peak,
                              spec.lr_final, spec.warm_frac)
            grads = _grads(spec.kind, params, x[idx], labels[idx])
            for name, g in grads.items():
                params[name] = params[name] - lr * g
            step += 1
    return BaseModel(spec.kind, num_classes, input_shape, params, fingerprint)


def train_dataset(spec: LearnerSpec, dataset, indices: np.ndarray | None = None) -> BaseModel:
    """Train on a Dataset (optionally a subset given by indices)."""
    if indices is None:
        pixels, labels = dataset.pixels, dataset.labels
    else:
        pixels, labels = dataset.pixels[indices], dataset.labels[indices]
    return train(spec, pixels, labels, dataset.num_classes, dataset.shape)


def save_model(model: BaseModel, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_MODEL_MAGIC)
        h, w, c = model.input_shape
        f.write(struct.pack("<IIIII", _MODEL_VERSION, _KIND_TAGS[model.kind],
                            model.num_classes, h, w))
        f.write(struct.pack("<II", c, len(model.params)))
        for name in sorted(model.params):
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        fp = model.training_fingerprint.encode()
        f.write(struct.pack("<H", len(fp)))
        f.write(fp)


def load_model(path: str | Path) -> BaseModel:
    path = Path(path)
    raw = path.read_bytes()
    try:
        if raw[:4] != _MODEL_MAGIC:
            raise ModelFormatError(f"{path}: bad magic")
        version, tag, num_classes, h, w, c, n_params = struct.unpack("<IIIIIII", raw[4:32])
        if version != _MODEL_VERSION:
            raise ModelFormatError(f"{path}: unsupported version {version}")
        if tag not in _TAG_KINDS:
            raise ModelFormatError(f"{path}: unknown kind tag {tag}")
        off = 32
        params = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
            off += 8 * count
            params[name] = arr.reshape(dims).astype(np.float64)
        (fp_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        fingerprint = raw[off:off + fp_len].decode()
        if len(raw[off:off + fp_len]) != fp_len:
            raise ModelFormatError(f"{path}: truncated fingerprint")
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: truncated or corrupt model file") from exc
    return BaseModel(_TAG_KINDS[tag], num_classes, (h, w, c), params, fingerprint)
