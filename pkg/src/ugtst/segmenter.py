"""Small convolutional segmenter with hand-derived gradients.

Architecture: conv3x3(1->8) -> ReLU -> conv3x3(8->16) -> ReLU -> conv1x1(16->C)
-> softmax over classes. Both 3x3 convolutions zero-pad by one pixel.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_targets

ENC1, ENC2 = 8, 16
DICE_SMOOTH = 1e-5
MODEL_MAGIC = b"UGTM"
MODEL_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


def param_count(num_classes: int) -> int:
    return ENC1 * 9 + ENC1 + ENC2 * ENC1 * 9 + ENC2 + num_classes * ENC2 + num_classes


def _layout(num_classes: int):
    shapes = [
        ("w1", (ENC1, 1, 3, 3)), ("b1", (ENC1,)),
        ("w2", (ENC2, ENC1, 3, 3)), ("b2", (ENC2,)),
        ("w3", (num_classes, ENC2)), ("b3", (num_classes,)),
    ]
    out, off = [], 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        out.append((name, off, shape))
        off += n
    return out


def unpack(params: np.ndarray, num_classes: int) -> dict:
    """Views into the flat parameter vector, keyed w1, b1, w2, b2, w3, b3."""
    if params.size != param_count(num_classes):
        raise ValueError(f"expected {param_count(num_classes)} parameters, got {params.size}")
    return {name: params[off:off + int(np.prod(shape))].reshape(shape)
            for name, off, shape in _layout(num_classes)}


def init_params(num_classes: int, seed: int) -> np.ndarray:
    """He-style uniform init for weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(param_count(num_classes), dtype=np.float64)
    views = unpack(params, num_classes)
    for name, fan_in in (("w1", 9), ("w2", ENC1 * 9), ("w3", ENC2)):
        bound = math.sqrt(6.0 / fan_in)
        views[name][...] = rng.uniform(-bound, bound, size=views[name].shape)
    return params


def _conv3(x, w, b):
    # x: (N, Cin, H, W); cross-correlation with zero padding 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, Cin, H, W, 3, 3)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, Cout)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None], cols


def _conv3_backward(dz, cols, w, need_dx=True):
    dw = np.tensordot(dz, cols, axes=([0, 2, 3], [0, 2, 3]))  # (Cout, Cin, 3, 3)
    db = dz.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw, db
    n, _, h, wd = dz.shape
    dxp = np.zeros((n, w.shape[1], h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + wd] += np.einsum("oc,nohw->nchw", w[:, :, i, j], dz)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def forward(params: np.ndarray, images: np.ndarray, num_classes: int, cache: bool = False):
    """Forward pass in float64.

    Returns ``(prob, encoder_map)`` with shapes (N, C, H, W) and (N, 16, H, W),
    plus the activation cache when ``cache`` is true.
    """
    if not np.all(np.isfinite(params)):
        raise ValueError("model weights contain NaN or infinity")
    p = unpack(np.asarray(params, dtype=np.float64), num_classes)
    x = np.asarray(images, dtype=np.float64)[:, None]
    z1, cols1 = _conv3(x, p["w1"], p["b1"])
    a1 = np.maximum(z1, 0.0)
    z2, cols2 = _conv3(a1, p["w2"], p["b2"])
    a2 = np.maximum(z2, 0.0)
    logits = np.einsum("ck,nkhw->nchw", p["w3"], a2) + p["b3"][None, :, None, None]
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    prob = e / e.sum(axis=1, keepdims=True)
    if not cache:
        return prob, a2
    logp = logits - np.log(e.sum(axis=1, keepdims=True))
    return prob, a2, dict(p=p, cols1=cols1, z1=z1, a1=a1, cols2=cols2, z2=z2, a2=a2, logp=logp)


def _dice_terms(prob, onehot):
    # per-sample, per-foreground-class dice loss and its gradient wrt prob
    pf, yf = prob[:, 1:], onehot[:, 1:]
    inter = (pf * yf).sum(axis=(2, 3))
    denom = pf.sum(axis=(2, 3)) + yf.sum(axis=(2, 3)) + DICE_SMOOTH
    numer = 2.0 * inter + DICE_SMOOTH
    loss = 1.0 - numer / denom  # (N, C-1)
    grad_f = -(2.0 * yf * denom[:, :, None, None] - numer[:, :, None, None]) \
        / (denom ** 2)[:, :, None, None]
    grad = np.zeros_like(prob)
    grad[:, 1:] = grad_f / (prob.shape[1] - 1)
    return loss.mean(axis=1), grad


def _onehot(targets, num_classes):
    t = np.asarray(targets)
    if t.max() >= num_classes:
        raise ValueError(f"target class {t.max()} >= num_classes {num_classes}")
    return (t[:, None] == np.arange(num_classes)[None, :, None, None]).astype(np.float64)


def loss(prob: np.ndarray, target: np.ndarray, weight: float = 1.0) -> float:
    """Weighted mean of soft Dice (foreground classes) and cross-entropy for one slice."""
    prob = np.asarray(prob, dtype=np.float64)[None]
    onehot = _onehot(np.asarray(target)[None], prob.shape[1])
    with np.errstate(divide="ignore"):
        ce = -np.mean(np.log(np.sum(prob * onehot, axis=1)))
    dice, _ = _dice_terms(prob, onehot)
    return float(weight * 0.5 * (dice[0] + ce))


def loss_and_grad(params, images, targets, weights, num_classes):
    """Mean per-slice loss over a batch and its exact gradient wrt ``params``."""
    prob, _, c = forward(params, images, num_classes, cache=True)
    n, _, h, w = prob.shape
    onehot = _onehot(targets, num_classes)
    weights = np.asarray(weights, dtype=np.float64).reshape(n)

    ce = -(c["logp"] * onehot).sum(axis=1).mean(axis=(1, 2))
    dice, gdice = _dice_terms(prob, onehot)
    per_slice = weights * 0.5 * (dice + ce)

    scale = (weights * 0.5 / n)[:, None, None, None]
    d_ce = (prob - onehot) / (h * w)
    d_dice = prob * (gdice - (prob * gdice).sum(axis=1, keepdims=True))
    dlogits = scale * (d_ce + d_dice)

    p = c["p"]
    grads = {}
    grads["w3"] = np.einsum("nchw,nkhw->ck", dlogits, c["a2"])
    grads["b3"] = dlogits.sum(axis=(0, 2, 3))
    dz2 = np.einsum("ck,nchw->nkhw", p["w3"], dlogits) * (c["z2"] > 0)
    da1, grads["w2"], grads["b2"] = _conv3_backward(dz2, c["cols2"], p["w2"])
    dz1 = da1 * (c["z1"] > 0)
    _, grads["w1"], grads["b1"] = _conv3_backward(dz1, c["cols1"], p["w1"], need_dx=False)

    flat = np.empty(param_count(num_classes))
    for name, off, shape in _layout(num_classes):
        flat[off:off + int(np.prod(shape))] = grads[name].ravel()
    return float(per_slice.mean()), flat


def lr_schedule(lr0: float, step: int, total_steps: int) -> float:
    """Polynomial decay with power 0.9."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** 0.9


def global_average_pool(encoder_map: np.ndarray) -> np.ndarray:
    """Channel-wise spatial mean of a (..., K, H, W) activation map."""
    return np.asarray(encoder_map, dtype=np.float64).mean(axis=(-2, -1))


class Segmenter(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Per-pixel classifier trained with SGD + momentum under polynomial decay.

    ``fit`` takes images (N, H, W) in [0, 1] and integer label maps (N, H, W).
    ``transform`` returns the pooled encoder features (N, 16).
    With ``warm_start=True`` a fitted model continues from its current weights.
    """

    def __init__(self, num_classes=2, lr0=0.01, epochs=10, batch_size=8,
                 momentum=0.9, seed=0, warm_start=False):
        self.num_classes = num_classes
        self.lr0 = lr0
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.seed = seed
        self.warm_start = warm_start

    def _check_hyperparams(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def fit(self, X, y, sample_weight=None):
        self._check_hyperparams()
        X = check_images(X)
        y = check_targets(y, X.shape, self.num_classes)
        n = X.shape[0]
        weights = np.ones(n) if sample_weight is None else np.asarray(sample_weight, float)
        if weights.shape != (n,):
            raise ValueError("sample_weight must have one entry per image")

        if self.warm_start and hasattr(self, "params_"):
            theta = self.params_.astype(np.float64)
        else:
            theta = init_params(self.num_classes, self.seed)
        velocity = np.zeros_like(theta)
        rng = np.random.default_rng(self.seed)
        steps_per_epoch = math.ceil(n / self.batch_size)
        total = self.epochs * steps_per_epoch
        trace = []
        step = 0
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                lr = lr_schedule(self.lr0, step, total)
                value, grad = loss_and_grad(theta, X[idx], y[idx], weights[idx],
                                            self.num_classes)
                if not math.isfinite(value) or not np.all(np.isfinite(grad)):
                    raise TrainingDivergedError(step)
                velocity = self.momentum * velocity + grad
                theta = theta - lr * velocity
                trace.append({"step": step, "epoch": epoch, "lr": lr, "loss": value})
                step += 1
        self.params_ = theta.astype(np.float32)
        self.loss_trace_ = trace
        self.classes_ = np.arange(self.num_classes)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        prob, _ = forward(self.params_, check_images(X), self.num_classes)
        return prob.astype(np.float32)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1).astype(np.uint8)

    def encode(self, X):
        check_is_fitted(self, "params_")
        _, enc = forward(self.params_, check_images(X), self.num_classes)
        return enc

    def transform(self, X):
        return global_average_pool(self.encode(X))

    def loss_on(self, X, y, sample_weight=None):
        """Mean training objective on a dataset with the current weights."""
        check_is_fitted(self, "params_")
        X = check_images(X)
        y = check_targets(y, X.shape, self.num_classes)
        w = np.ones(len(X)) if sample_weight is None else sample_weight
        value, _ = loss_and_grad(self.params_.astype(np.float64), X, y, w, self.num_classes)
        return value

    @classmethod
    def from_params(cls, params, num_classes, **kwargs):
        model = cls(num_classes=num_classes, **kwargs)
        params = np.asarray(params, dtype=np.float32).copy()
        if params.size != param_count(num_classes):
            raise ValueError(f"expected {param_count(num_classes)} parameters, got {params.size}")
        model.params_ = params
        model.classes_ = np.arange(num_classes)
        return model


class ModelFormatError(ValueError):
    pass


def save_model(path, model: Segmenter) -> None:
    check_is_fitted(model, "params_")
    w = np.ascontiguousarray(model.params_, dtype="<f4")
    header = MODEL_MAGIC + bytes([MODEL_VERSION]) + struct.pack("<II", model.num_classes, w.size)
    Path(path).write_bytes(header + w.tobytes())


def load_model(path, num_classes=None, **kwargs) -> Segmenter:
    buf = Path(path).read_bytes()
    if buf[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad model magic {buf[:4]!r}")
    if len(buf) < 13 or buf[4] != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported or truncated model header")
    c, count = struct.unpack("<II", buf[5:13])
    if count != param_count(c):
        raise ModelFormatError(f"{path}: parameter count {count} inconsistent with C={c}")
    if num_classes is not None and c != num_classes:
        raise ModelFormatError(f"{path}: model has {c} classes, expected {num_classes}")
    payload = buf[13:]
    if len(payload) != 4 * count:
        raise ModelFormatError(f"{path}: weight payload is {len(payload)} bytes, "
                               f"expected {4 * count}")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if not np.all(np.isfinite(params)):
        raise ModelFormatError(f"{path}: non-finite weights")
    return Segmenter.from_params(params, c, **kwargs)
