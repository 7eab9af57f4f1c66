"""A small GAP classifier: fixed filter bank -> ReLU -> global average pool -> logistic head.

Only the head is trainable, so the training objective is convex and its
gradient is available in closed form. The pooled vector can optionally be
standardised with frozen per-filter statistics (``feature_shift`` and
``feature_scale``); with the defaults (0 and 1) the head sees the raw pooled
means.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
import scipy.fft

from .raster import AugmentSpec, augment, luminance

DEFAULT_BANK_ID = "dog2-edge4-lap-cs/v1"
PROB_CLIP = 1e-12


# ---------------------------------------------------------------------------
# filter bank
# ---------------------------------------------------------------------------


def _gaussian(sigma: float, radius: int) -> np.ndarray:
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    g = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _balance(kernel: np.ndarray) -> np.ndarray:
    # zero mean so flat regions give no response; positive lobe sums to 1
    k = kernel - kernel.mean()
    return k / k[k > 0].sum()


def default_filter_bank() -> tuple[np.ndarray, ...]:
    """Eight fixed odd-sided kernels.

    Two difference-of-Gaussians (fine and coarse), four oriented
    first-derivative-of-Gaussian edge detectors, a 3x3 Laplacian and a
    box center-surround detector.
    """
    kernels = []
    for s in (1.5, 3.0):
        r = int(np.ceil(3 * 2 * s))
        kernels.append(_balance(_gaussian(s, r) - _gaussian(2 * s, r)))
    r = 5
    ax = np.arange(-r, r + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    g = _gaussian(1.5, r)
    for angle in (0, 45, 90, 135):
        t = np.deg2rad(angle)
        kernels.append(_balance(g * (np.cos(t) * xx + np.sin(t) * yy)))
    kernels.append(_balance(np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)))
    cs = np.full((9, 9), -1.0 / 72)
    cs[3:6, 3:6] = 1.0 / 9
    kernels.append(_balance(cs))
    return tuple(k.astype(np.float64) for k in kernels)


class _BankFFT:
    """Kernel spectra cached per padded image shape."""

    def __init__(self, filters: Sequence[np.ndarray]):
        size = max(max(k.shape) for k in filters)
        self.size = size
        self.pad = size // 2
        stack = np.zeros((len(filters), size, size))
        for i, k in enumerate(filters):
            kh, kw = k.shape
            oy, ox = (size - kh) // 2, (size - kw) // 2
            stack[i, oy:oy + kh, ox:ox + kw] = k
        self.stack = stack
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def spectra(self, shape):
        if shape not in self._cache:
            self._cache[shape] = scipy.fft.rfft2(self.stack, s=shape, axes=(-2, -1))
        return self._cache[shape]

    def convolve(self, lum: np.ndarray) -> np.ndarray:
        """Same-size convolution of ``lum`` with every kernel, symmetric padding."""
        h, w = lum.shape
        p = self.pad
        padded = np.pad(lum.astype(np.float64), p, mode="symmetric")
        # any FFT size >= the padded size keeps wrap-around out of [2p, 2p + h)
        shape = tuple(scipy.fft.next_fast_len(n, real=True) for n in padded.shape)
        spec = scipy.fft.rfft2(padded, s=shape) * self.spectra(shape)
        full = scipy.fft.irfft2(spec, s=shape, axes=(-2, -1))
        out = full[:, 2 * p:2 * p + h, 2 * p:2 * p + w]
        return np.moveaxis(out, 0, -1)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class MiniModel:
    filters: tuple = field(default_factory=default_filter_bank, repr=False)
    head_weights: np.ndarray = None
    head_bias: float = 0.0
    feature_shift: np.ndarray = None
    feature_scale: np.ndarray = None
    filter_bank_id: str = DEFAULT_BANK_ID
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.filters = tuple(np.asarray(k, dtype=np.float64) for k in self.filters)
        for k in self.filters:
            if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
                raise ValueError(f"kernels must be odd-sided 2-D arrays, got shape {k.shape}")
            k.setflags(write=False)
        n = len(self.filters)
        if self.head_weights is None:
            self.head_weights = np.zeros(n)
        self.head_weights = np.asarray(self.head_weights, dtype=np.float64).copy()
        if self.head_weights.shape != (n,):
            raise ValueError(f"head_weights must have length {n}, got {self.head_weights.shape}")
        self.feature_shift = np.zeros(n) if self.feature_shift is None else np.asarray(self.feature_shift, float)
        self.feature_scale = np.ones(n) if self.feature_scale is None else np.asarray(self.feature_scale, float)
        self.head_bias = float(self.head_bias)
        self._bank = _BankFFT(self.filters)

    @property
    def n_filters(self) -> int:
        return len(self.filters)

    @property
    def kernel_size(self) -> int:
        return self._bank.size

    @property
    def standardized(self) -> bool:
        return bool(np.any(self.feature_shift != 0) or np.any(self.feature_scale != 1))

    def cam_weights(self) -> np.ndarray:
        """Per-channel weights of the logit with respect to the raw pooled features."""
        return self.head_weights / self.feature_scale

    def effective_bias(self) -> float:
        return float(self.head_bias - np.dot(self.head_weights, self.feature_shift / self.feature_scale))

    def normalize(self, pooled_raw: np.ndarray) -> np.ndarray:
        return (pooled_raw - self.feature_shift) / self.feature_scale

    def with_params(self, weights, bias) -> "MiniModel":
        return replace(self, head_weights=np.array(weights, dtype=np.float64), head_bias=float(bias),
                       training_meta=dict(self.training_meta))

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "filter_bank_id": self.filter_bank_id,
            "head_weights": [float(v) for v in self.head_weights],
            "head_bias": self.head_bias,
            "feature_shift": [float(v) for v in self.feature_shift],
            "feature_scale": [float(v) for v in self.feature_scale],
            "training_meta": self.training_meta,
        }
        if self.filter_bank_id != DEFAULT_BANK_ID:
            d["filters"] = [k.tolist() for k in self.filters]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MiniModel":
        bank_id = d.get("filter_bank_id", DEFAULT_BANK_ID)
        if "filters" in d:
            filters = tuple(np.asarray(k) for k in d["filters"])
        elif bank_id == DEFAULT_BANK_ID:
            filters = default_filter_bank()
        else:
            raise ValueError(f"unknown filter bank {bank_id!r} and no kernels stored")
        return cls(filters=filters, head_weights=d["head_weights"], head_bias=d["head_bias"],
                   feature_shift=d.get("feature_shift"), feature_scale=d.get("feature_scale"),
                   filter_bank_id=bank_id, training_meta=d.get("training_meta", {}))

    def save(self, path) -> None:
        with open(os.fspath(path), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "MiniModel":
        with open(os.fspath(path)) as fh:
            return cls.from_dict(json.load(fh))


class ForwardResult(NamedTuple):
    features: np.ndarray
    pooled: np.ndarray
    prob: float


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def feature_maps(model: MiniModel, img: np.ndarray) -> np.ndarray:
    """ReLU filter responses of the luminance channel, shape ``(h, w, F)``."""
    lum = luminance(np.asarray(img, dtype=np.float32))
    if min(lum.shape) < model.kernel_size:
        raise ValueError(
            f"image {lum.shape[0]}x{lum.shape[1]} is smaller than the largest kernel "
            f"({model.kernel_size}x{model.kernel_size})"
        )
    return np.maximum(model._bank.convolve(lum), 0.0)


def pooled_raw(model: MiniModel, img: np.ndarray) -> np.ndarray:
    return feature_maps(model, img).mean(axis=(0, 1))


def pooled_matrix(model: MiniModel, images) -> np.ndarray:
    """Raw pooled features for a sequence of images, shape ``(n, F)``."""
    return np.array([pooled_raw(model, im) for im in images]).reshape(-1, model.n_filters)


def logit_from_features(model: MiniModel, feats: np.ndarray) -> float:
    """Head output (pre-sigmoid) for a ``(h, w, F)`` feature stack."""
    pooled = model.normalize(np.asarray(feats, dtype=np.float64).mean(axis=(0, 1)))
    return float(pooled @ model.head_weights + model.head_bias)


def forward(model: MiniModel, img: np.ndarray) -> ForwardResult:
    feats = feature_maps(model, img)
    pooled = model.normalize(feats.mean(axis=(0, 1)))
    prob = float(sigmoid(pooled @ model.head_weights + model.head_bias))
    return ForwardResult(feats, pooled, prob)


def predict_proba(model: MiniModel, images) -> np.ndarray:
    x = model.normalize(pooled_matrix(model, images))
    return sigmoid(x @ model.head_weights + model.head_bias)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def head_loss_and_grad(weights, bias, pooled, labels, weight_decay=0.0005):
    """Mean binary cross-entropy plus L2 on the weights, with analytic gradients.

    ``pooled`` is the (already normalised) ``(n, F)`` design matrix.
    Returns ``(loss, grad_w, grad_b)``.
    """
    x = np.asarray(pooled, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    p = np.clip(sigmoid(x @ w + bias), PROB_CLIP, 1 - PROB_CLIP)
    ce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    loss = float(ce.mean() + weight_decay * np.dot(w, w))
    resid = p - y
    grad_w = (resid[:, None] * x).mean(axis=0) + 2 * weight_decay * w
    grad_b = float(resid.mean())
    return loss, grad_w, grad_b


def loss_and_grad(model: MiniModel, batch, weight_decay: float = 0.0005):
    """Loss and head gradients for a batch of ``(image, label)`` pairs."""
    batch = list(batch)
    if not batch:
        raise ValueError("batch must not be empty")
    x = model.normalize(pooled_matrix(model, [im for im, _ in batch]))
    y = np.array([lab for _, lab in batch], dtype=np.float64)
    return head_loss_and_grad(model.head_weights, model.head_bias, x, y, weight_decay)


# ---------------------------------------------------------------------------
# AdaDelta
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdaDeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 0.1
    weight_decay: float = 0.0005
    acc_grad_sq: np.ndarray = None
    acc_update_sq: np.ndarray = None

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")

    @classmethod
    def fresh(cls, n_params: int, **kw) -> "AdaDeltaState":
        return cls(acc_grad_sq=np.zeros(n_params), acc_update_sq=np.zeros(n_params), **kw)


def adadelta_step(state: AdaDeltaState, params, grads):
    """One AdaDelta update; returns ``(new_params, new_state)``.

    ``lr`` scales the applied step only; the update accumulator tracks the
    unscaled step.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    acc_g = np.zeros_like(params) if state.acc_grad_sq is None else state.acc_grad_sq
    acc_u = np.zeros_like(params) if state.acc_update_sq is None else state.acc_update_sq
    if not (params.shape == grads.shape == acc_g.shape == acc_u.shape):
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"accumulators {acc_g.shape}/{acc_u.shape}"
        )
    rho, eps = state.rho, state.eps
    acc_g = rho * acc_g + (1 - rho) * grads ** 2
    delta = -np.sqrt(acc_u + eps) / np.sqrt(acc_g + eps) * grads
    acc_u = rho * acc_u + (1 - rho) * delta ** 2
    new_state = replace(state, acc_grad_sq=acc_g, acc_update_sq=acc_u)
    return params + state.lr * delta, new_state


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    augment: bool = False
    patience: int = 40
    lr: float = 0.1
    rho: float = 0.95
    eps: float = 1e-6
    weight_decay: float = 0.0005
    standardize: bool = True

    def __post_init__(self):
        if not 1 <= self.batch_size <= 128:
            raise ValueError(f"batch_size must be in [1, 128], got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = 0

    FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.FIELDS)
        for row in self.rows:
            writer.writerow([row["epoch"]] + [
                "" if row[k] is None else f"{row[k]:.10g}" for k in self.FIELDS[1:]
            ])
        return buf.getvalue()

    def save(self, path) -> None:
        with open(os.fspath(path), "w") as fh:
            fh.write(self.to_csv())


def calibrate(model: MiniModel, pooled: np.ndarray) -> MiniModel:
    """Freeze per-filter standardisation statistics from raw pooled features."""
    shift = pooled.mean(axis=0)
    scale = pooled.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return replace(model, feature_shift=shift, feature_scale=scale, training_meta=dict(model.training_meta))


def _evaluate_head(w, b, x, y, wd):
    if x is None or len(x) == 0:
        return None, None
    loss, _, _ = head_loss_and_grad(w, b, x, y, wd)
    acc = float(np.mean((sigmoid(x @ w + b) >= 0.5) == (y >= 0.5)))
    return loss, acc


def fit_head(model: MiniModel, pooled, labels, config: TrainConfig,
             val_pooled=None, val_labels=None, pooled_fn=None, val_fn=None):
    """Minibatch AdaDelta on the logistic head.

    ``pooled`` holds *raw* pooled features ``(n, F)``. When ``pooled_fn`` is
    given it is called as ``pooled_fn(epoch, rng)`` to produce fresh
    (augmented) raw features each epoch. ``val_fn(model) -> (loss, acc)``
    replaces the instance-level validation score, e.g. to select on bag-level
    loss. Returns ``(best_model, TrainLog)`` where the best model minimises
    validation loss (training loss when no validation is supplied).
    """
    x_raw = np.asarray(pooled, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x_raw.ndim != 2 or len(x_raw) == 0:
        raise ValueError("training set must not be empty")
    if config.standardize and not model.standardized:
        model = calibrate(model, x_raw)
    xv = None if val_pooled is None or len(val_pooled) == 0 else model.normalize(np.asarray(val_pooled, float))
    yv = None if val_labels is None else np.asarray(val_labels, dtype=np.float64)

    rng = np.random.default_rng(config.seed)
    params = np.append(model.head_weights, model.head_bias)
    state = AdaDeltaState.fresh(params.size, rho=config.rho, eps=config.eps, lr=config.lr,
                                weight_decay=config.weight_decay)
    wd = config.weight_decay
    n = len(y)
    log = TrainLog()
    best = (np.inf, params.copy(), 0)
    stale = 0
    for epoch in range(1, config.epochs + 1):
        if pooled_fn is not None:
            x_raw = np.asarray(pooled_fn(epoch, rng), dtype=np.float64)
        x = model.normalize(x_raw)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, gw, gb = head_loss_and_grad(params[:-1], params[-1], x[idx], y[idx], wd)
            params, state = adadelta_step(state, params, np.append(gw, gb))
        tr_loss, tr_acc = _evaluate_head(params[:-1], params[-1], x, y, wd)
        if val_fn is not None:
            va_loss, va_acc = val_fn(model.with_params(params[:-1], params[-1]))
        else:
            va_loss, va_acc = _evaluate_head(params[:-1], params[-1], xv, yv, wd)
        log.rows.append({"epoch": epoch, "train_loss": tr_loss, "train_acc": tr_acc,
                         "val_loss": va_loss, "val_acc": va_acc})
        score = va_loss if va_loss is not None else tr_loss
        if score < best[0]:
            best = (score, params.copy(), epoch)
            stale = 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break
    log.best_epoch = best[2]
    trained = model.with_params(best[1][:-1], best[1][-1])
    trained.training_meta.update({"epochs_run": len(log.rows), "best_epoch": best[2], "n_train": int(n)})
    return trained, log


def train(model: MiniModel, images, labels, config: TrainConfig, val_images=None, val_labels=None,
          val_fn=None):
    """Train the head on images; the incoming head is the starting point.

    Passing a model trained on whole images and then patch instances gives
    the bag-to-instance fine-tuning scheme.
    """
    images = list(images)
    if not images:
        raise ValueError("training set must not be empty")
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary (0/1)")
    base = pooled_matrix(model, images)
    val = pooled_matrix(model, list(val_images)) if val_images is not None and len(val_images) else None

    pooled_fn = None
    if config.augment:
        def pooled_fn(epoch, rng):
            out = np.empty_like(base)
            for i, im in enumerate(images):
                spec = AugmentSpec.random(rng)
                out[i] = pooled_raw(model, augment(im, spec, fill=float(np.mean(im))))
            return out
    return fit_head(model, base, labels, config, val, val_labels, pooled_fn=pooled_fn, val_fn=val_fn)
