"""
Small convolutional classifier written directly in numpy.

Architecture (NHWC, valid convolutions)::

    32x32x3 -> conv3x3x8 -> ReLU -> maxpool2 -> conv3x3x16 -> ReLU -> maxpool2
            -> flatten(6*6*16) -> dense(N) -> softmax

Parameters are float32. The binary model file is::

    b"SGCNN001" | uint32 N | uint32 input_size |
    conv1.w (3,3,3,8) | conv1.b (8) | conv2.w (3,3,8,16) | conv2.b (16) |
    dense.w (576,N) | dense.b (N)

with every array stored as little-endian float32 in C order.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stickerguard.imaging import check_image

logger = logging.getLogger(__name__)

MAGIC = b"SGCNN001"
INPUT_SIZE = 32
PARAM_ORDER = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "dense.w", "dense.b")


def param_shapes(n_classes, input_size=INPUT_SIZE):
    side = ((input_size - 2) // 2 - 2) // 2
    return {
        "conv1.w": (3, 3, 3, 8),
        "conv1.b": (8,),
        "conv2.w": (3, 3, 8, 16),
        "conv2.b": (16,),
        "dense.w": (side * side * 16, n_classes),
        "dense.b": (n_classes,),
    }


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    n_classes: int | None = None


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    n_classes: int
    input_size: int
    params: dict = field(repr=False)
    seed: int = 0

    def __post_init__(self):
        shapes = param_shapes(self.n_classes, self.input_size)
        for name in PARAM_ORDER:
            arr = self.params[name]
            if arr.shape != shapes[name] or arr.dtype != np.float32:
                raise ValueError(f"parameter {name} has shape {arr.shape}/{arr.dtype}, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} has non-finite values")
            arr.setflags(write=False)

    def to_bytes(self):
        head = MAGIC + np.array([self.n_classes, self.input_size], dtype="<u4").tobytes()
        return head + b"".join(np.ascontiguousarray(self.params[n], dtype="<f4").tobytes() for n in PARAM_ORDER)

    @property
    def model_id(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    def logits(self, batch):
        """Logits for a preprocessed ``(B, S, S, 3)`` batch."""
        return _forward(self.params, np.asarray(batch, dtype=np.float32))[0]


def save_model(model, path):
    Path(path).write_bytes(model.to_bytes())


def load_model(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a classifier model file")
    n_classes, input_size = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=2, offset=8))
    offset = 16
    params = {}
    for name, shape in param_shapes(n_classes, input_size).items():
        count = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes in model file")
    return ClassifierModel(n_classes, input_size, params)


# ---------------------------------------------------------------------------
# preprocessing


def nearest_indices(src, dst):
    return (np.arange(dst) * src) // dst


def preprocess(image, input_size=INPUT_SIZE):
    """Nearest-neighbour resample of an image to ``input_size x input_size x 3``."""
    image = np.asarray(image, dtype=np.float64)
    rows = nearest_indices(image.shape[0], input_size)
    cols = nearest_indices(image.shape[1], input_size)
    return image[rows][:, cols]


def preprocess_batch(images, input_size=INPUT_SIZE):
    images = np.asarray(images)
    rows = nearest_indices(images.shape[1], input_size)
    cols = nearest_indices(images.shape[2], input_size)
    return images[:, rows][:, :, cols].astype(np.float32)


# ---------------------------------------------------------------------------
# numerics


def _conv(x, w, b):
    # x: (B, H, W, C); w: (3, 3, C, K)
    cols = sliding_window_view(x, (3, 3), axis=(1, 2))  # (B, Ho, Wo, C, 3, 3)
    out = np.einsum("bhwcij,ijck->bhwk", cols, w, optimize=True)
    return out + b


def _pool(x):
    bsz, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, : h2 * 2, : w2 * 2].reshape(bsz, h2, 2, w2, 2, c)
    return blocks.max(axis=(2, 4)), blocks


def _forward(params, x):
    a1 = np.maximum(_conv(x, params["conv1.w"], params["conv1.b"]), 0)
    p1, blk1 = _pool(a1)
    a2 = np.maximum(_conv(p1, params["conv2.w"], params["conv2.b"]), 0)
    p2, blk2 = _pool(a2)
    flat = p2.reshape(len(x), -1)
    logits = flat @ params["dense.w"] + params["dense.b"]
    return logits, (x, a1, p1, blk1, a2, p2, blk2, flat)


def _pool_backward(grad, pooled, blocks, shape):
    bsz, h2, w2, c = pooled.shape
    winners = blocks == pooled[:, :, None, :, None, :]
    # route the gradient to the first maximum of each window only
    flat = winners.transpose(0, 1, 3, 2, 4, 5).reshape(bsz, h2, w2, 4, c)
    keep = flat & (np.cumsum(flat, axis=3) == 1)
    routed = keep * grad[:, :, :, None, :]
    routed = routed.reshape(bsz, h2, w2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(bsz, h2 * 2, w2 * 2, c)
    out = np.zeros(shape, dtype=grad.dtype)
    out[:, : h2 * 2, : w2 * 2] = routed
    return out


def _conv_backward(grad, x, w):
    cols = sliding_window_view(x, (3, 3), axis=(1, 2))
    dw = np.einsum("bhwcij,bhwk->ijck", cols, grad, optimize=True)
    db = grad.sum(axis=(0, 1, 2))
    dx = np.zeros_like(x)
    ho, wo = grad.shape[1], grad.shape[2]
    for i in range(3):
        for j in range(3):
            dx[:, i:i + ho, j:j + wo] += grad @ w[i, j].T
    return dx, dw, db


def _backward(params, cache, dlogits):
    x, a1, p1, blk1, a2, p2, blk2, flat = cache
    grads = {
        "dense.w": flat.T @ dlogits,
        "dense.b": dlogits.sum(axis=0),
    }
    dp2 = (dlogits @ params["dense.w"].T).reshape(p2.shape)
    da2 = _pool_backward(dp2, p2, blk2, a2.shape) * (a2 > 0)
    dp1, grads["conv2.w"], grads["conv2.b"] = _conv_backward(da2, p1, params["conv2.w"])
    da1 = _pool_backward(dp1, p1, blk1, a1.shape) * (a1 > 0)
    _, grads["conv1.w"], grads["conv1.b"] = _conv_backward(da1, x, params["conv1.w"])
    return grads


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _init_params(n_classes, input_size, rng):
    params = {}
    for name, shape in param_shapes(n_classes, input_size).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return params


def train(dataset, config=TrainConfig(), seed=0, input_size=INPUT_SIZE):
    """
    Fit a classifier with mini-batch SGD on cross-entropy.

    :param dataset: sequence of ``(image, label)`` pairs
    :param config: :class:`TrainConfig`
    :param seed: drives weight init and the per-epoch shuffles; identical
        inputs give bit-identical weights
    :return: :class:`ClassifierModel`
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    labels = np.array([int(lbl) for _, lbl in dataset], dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("training data must contain at least two classes")
    n_classes = config.n_classes or int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    x = preprocess_batch(np.stack([check_image(img) for img, _ in dataset]), input_size)
    rng = np.random.default_rng(seed)
    params = _init_params(n_classes, input_size, rng)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    lr = np.float32(config.learning_rate)
    mom = np.float32(config.momentum)
    decay = np.float32(config.weight_decay)
    onehot = np.eye(n_classes, dtype=np.float32)[labels]
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, cache = _forward(params, x[idx])
            probs = softmax(logits).astype(np.float32)
            total -= float(np.log(np.maximum((probs * onehot[idx]).sum(axis=1), 1e-12)).sum())
            dlogits = (probs - onehot[idx]) / np.float32(len(idx))
            grads = _backward(params, cache, dlogits)
            for name in PARAM_ORDER:
                g = grads[name].astype(np.float32)
                if name.endswith(".w"):
                    g = g + decay * params[name]
                velocity[name] = mom * velocity[name] - lr * g
                params[name] = params[name] + velocity[name]
        logger.info("epoch %d/%d loss %.4f", epoch + 1, config.epochs, total / len(x))
    return ClassifierModel(n_classes, input_size, {k: v.astype(np.float32) for k, v in params.items()}, seed)


# ---------------------------------------------------------------------------
# inference


def classify_batch(model, images, chunk=512):
    """Softmax vectors for a stack of images, shape ``(B, N)``."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    out = []
    for start in range(0, len(images), chunk):
        x = preprocess_batch(images[start:start + chunk], model.input_size)
        out.append(softmax(model.logits(x)))
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def classify(model, image):
    return classify_batch(model, np.asarray(image)[None])[0]


def argmax_lowest(values):
    """Index of the largest value; ``np.argmax`` already returns the first."""
    return int(np.argmax(np.asarray(values)))


def predict(model, image):
    return argmax_lowest(classify(model, image))


def predict_batch(model, images):
    return np.argmax(classify_batch(model, images), axis=1)


def rank_labels(values):
    """Labels by descending value, ties by ascending index."""
    values = np.asarray(values)
    return [int(i) for i in np.lexsort((np.arange(len(values)), -values))]


def top_k(model, image, k):
    probs = classify(model, image)
    if not 1 <= k <= len(probs):
        raise ValueError(f"k must lie in [1, {len(probs)}], got {k}")
    return [(lbl, float(probs[lbl])) for lbl in rank_labels(probs)[:k]]


def accuracy(model, images, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict_batch(model, images) == labels))
