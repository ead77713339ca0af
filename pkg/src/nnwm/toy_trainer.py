"""Minimal numpy forward/backward engine and SGD loop for fixture CNNs.

Just enough to fine-tune the toy models after pruning and to run the
fine-tuning attack: conv2d via im2col, batchnorm with batch statistics in
train mode, relu, maxpool, global average pooling and a linear head, plus
softmax cross-entropy and plain SGD with weight decay.

Batchnorm normalizes with the biased (1/N) batch variance in train mode
and updates running statistics with momentum 0.1 (running variance uses
the unbiased estimate).  Train-mode forward updates the running buffers of
the graph it is given; finetune therefore always works on a private copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeConsistencyError, StaleCacheError
from .model_store import (
    BatchNormLayer,
    ConvLayer,
    GlobalAvgPoolLayer,
    LinearLayer,
    MaxPoolLayer,
    ModelGraph,
    ReluLayer,
    channel_counts,
    clone_graph,
)

BN_MOMENTUM = 0.1

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class Batch:
    """A stack of images with integer class labels."""

    inputs: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.inputs.shape[0] < 1:
            raise ValueError("inputs must be a non-empty (N, C, H, W) array")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must be one integer per sample")

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr: float = 0.001
    weight_decay: float = 1e-4
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.precision not in _DTYPES:
            raise ValueError("precision must be 'f32' or 'f64'")


@dataclass
class ForwardCache:
    """Per-layer values saved by forward(train) for the backward pass."""

    model: ModelGraph
    mode: str
    input_shape: tuple
    entries: list = field(default_factory=list)
    logits: np.ndarray | None = None


def to_precision(model: ModelGraph, precision: str) -> ModelGraph:
    """Copy of the model with all arrays cast to the requested dtype."""
    dtype = _DTYPES[precision]
    out = clone_graph(model)
    for ly in out.layers:
        for attr in ("weights", "bias", "gamma", "beta", "running_mean", "running_var"):
            arr = getattr(ly, attr, None)
            if isinstance(arr, np.ndarray):
                setattr(ly, attr, arr.astype(dtype))
    return out


def _model_dtype(model: ModelGraph) -> np.dtype:
    for ly in model.layers:
        if isinstance(ly, (ConvLayer, LinearLayer)):
            return ly.weights.dtype
        if isinstance(ly, BatchNormLayer):
            return ly.gamma.dtype
    raise ShapeConsistencyError("model has no parameterized layer")


def _im2col(x: np.ndarray, kh: int, kw: int, sy: int, sx: int) -> tuple[np.ndarray, int, int]:
    """(N*Ho*Wo, C*kh*kw) patch matrix from a padded input."""
    n, c = x.shape[0], x.shape[1]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sy, ::sx]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv_forward(ly: ConvLayer, x: np.ndarray):
    (sy, sx), (py, px) = ly.stride, ly.padding
    co, ci, kh, kw = ly.weights.shape
    xp = np.pad(x, ((0, 0), (0, 0), (py, py), (px, px))) if (py or px) else x
    cols, ho, wo = _im2col(xp, kh, kw, sy, sx)
    wmat = ly.weights.reshape(co, ci * kh * kw)
    out = cols @ wmat.T
    if ly.bias is not None:
        out = out + ly.bias
    n = x.shape[0]
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return out, (cols, xp.shape, x.shape)


def _conv_backward(ly: ConvLayer, ctx, dout: np.ndarray):
    cols, padded_shape, in_shape = ctx
    (sy, sx), (py, px) = ly.stride, ly.padding
    co, ci, kh, kw = ly.weights.shape
    n, _, ho, wo = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    dw = (dmat.T @ cols).reshape(co, ci, kh, kw)
    db = dmat.sum(axis=0) if ly.bias is not None else None
    dcols = dmat @ ly.weights.reshape(co, ci * kh * kw)
    dwin = dcols.reshape(n, ho, wo, ci, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sy * ho:sy, j:j + sx * wo:sx] += dwin[:, :, i, j]
    dx = dxp[:, :, py:py + in_shape[2], px:px + in_shape[3]] if (py or px) else dxp
    return dx, dw, db


def _bn_forward(ly: BatchNormLayer, x: np.ndarray, mode: str):
    g = ly.gamma.reshape(1, -1, 1, 1)
    b = ly.beta.reshape(1, -1, 1, 1)
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(ly.running_var + ly.eps)
        out = (x - ly.running_mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1) * g + b
        return out, None
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))  # biased, used for normalization
    inv_std = 1.0 / np.sqrt(var + ly.eps)
    xhat = (x - mu.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = xhat * g + b
    var_running = var * n / (n - 1) if n > 1 else var
    ly.running_mean[...] = (1 - BN_MOMENTUM) * ly.running_mean + BN_MOMENTUM * mu
    ly.running_var[...] = (1 - BN_MOMENTUM) * ly.running_var + BN_MOMENTUM * var_running
    return out, (xhat, inv_std, n)


def _bn_backward(ly: BatchNormLayer, ctx, dout: np.ndarray):
    xhat, inv_std, n = ctx
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * ly.gamma.reshape(1, -1, 1, 1)
    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = (inv_std.reshape(1, -1, 1, 1) / n) * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def _maxpool_forward(ly: MaxPoolLayer, x: np.ndarray):
    k, s = ly.kernel, ly.stride
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def _maxpool_backward(ly: MaxPoolLayer, ctx, dout: np.ndarray):
    in_shape, arg = ctx
    k, s = ly.kernel, ly.stride
    n, c, ho, wo = dout.shape
    dx = np.zeros(in_shape, dtype=dout.dtype)
    ni, ci, ii, ji = np.indices((n, c, ho, wo))
    hi = ii * s + arg // k
    wi = ji * s + arg % k
    np.add.at(dx, (ni, ci, hi, wi), dout)
    return dx


def forward(model: ModelGraph, inputs: np.ndarray, mode: str = "eval"):
    """Run the network; returns (logits, cache).

    Train mode uses batch statistics in batchnorm layers and updates their
    running buffers in place; eval mode is a pure function.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    dtype = _model_dtype(model)
    x = np.ascontiguousarray(inputs, dtype=dtype)
    if x.ndim != 4 or x.shape[1:] != tuple(model.input_shape):
        raise ShapeConsistencyError(
            f"input shape {x.shape} does not match model input {model.input_shape}")
    cache = ForwardCache(model=model, mode=mode, input_shape=x.shape)
    for ly in model.layers:
        if isinstance(ly, ConvLayer):
            x, ctx = _conv_forward(ly, x)
        elif isinstance(ly, BatchNormLayer):
            x, ctx = _bn_forward(ly, x, mode)
        elif isinstance(ly, ReluLayer):
            ctx = x > 0
            x = np.maximum(x, 0)
        elif isinstance(ly, MaxPoolLayer):
            x, ctx = _maxpool_forward(ly, x)
        elif isinstance(ly, GlobalAvgPoolLayer):
            ctx = x.shape
            x = x.mean(axis=(2, 3))
        elif isinstance(ly, LinearLayer):
            flat_from = None
            if x.ndim == 4:
                flat_from = x.shape
                x = x.reshape(x.shape[0], -1)
            ctx = (x, flat_from)
            x = x @ ly.weights.T
            if ly.bias is not None:
                x = x + ly.bias
        else:
            raise ShapeConsistencyError(f"cannot run layer {type(ly).__name__}")
        cache.entries.append(ctx)
    cache.logits = x
    return x, cache


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_softmax_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy, stabilized by max subtraction."""
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(n), labels]))


def backward(model: ModelGraph, cache: ForwardCache, labels: np.ndarray) -> dict:
    """Gradients of the mean cross-entropy w.r.t. every trainable tensor.

    Requires the cache of a train-mode forward pass on the same model.
    """
    if cache.model is not model:
        raise StaleCacheError("cache was produced by a different model")
    if cache.mode != "train":
        raise StaleCacheError("backward needs a cache from forward(mode='train')")
    if len(cache.entries) != len(model.layers) or cache.logits is None:
        raise StaleCacheError("cache is incomplete")
    n = cache.logits.shape[0]
    if labels.shape != (n,):
        raise StaleCacheError("labels do not match the cached batch")
    probs = _softmax(cache.logits)
    dx = probs
    dx[np.arange(n), labels] -= 1.0
    dx /= n
    grads: dict[tuple[int, str], np.ndarray] = {}
    for pos in range(len(model.layers) - 1, -1, -1):
        ly = model.layers[pos]
        ctx = cache.entries[pos]
        if isinstance(ly, ConvLayer):
            dx, dw, db = _conv_backward(ly, ctx, dx)
            grads[(pos, "weights")] = dw
            if db is not None:
                grads[(pos, "bias")] = db
        elif isinstance(ly, BatchNormLayer):
            dx, dgamma, dbeta = _bn_backward(ly, ctx, dx)
            grads[(pos, "gamma")] = dgamma
            grads[(pos, "beta")] = dbeta
        elif isinstance(ly, ReluLayer):
            dx = dx * ctx
        elif isinstance(ly, MaxPoolLayer):
            dx = _maxpool_backward(ly, ctx, dx)
        elif isinstance(ly, GlobalAvgPoolLayer):
            nb, c, h, w = ctx
            dx = np.broadcast_to((dx / (h * w))[:, :, None, None], (nb, c, h, w)).copy()
        elif isinstance(ly, LinearLayer):
            xin, flat_from = ctx
            grads[(pos, "weights")] = dx.T @ xin
            if ly.bias is not None:
                grads[(pos, "bias")] = dx.sum(axis=0)
            dx = dx @ ly.weights
            if flat_from is not None:
                dx = dx.reshape(flat_from)
    return grads


def sgd_step(model: ModelGraph, grads: dict, config: TrainConfig) -> ModelGraph:
    """One update w <- w - lr * (g + wd * w); returns a new graph."""
    out = clone_graph(model)
    for (pos, name), g in grads.items():
        arr = getattr(out.layers[pos], name)
        if arr is None or arr.shape != g.shape:
            raise ShapeConsistencyError(
                f"gradient shape {getattr(g, 'shape', None)} does not match "
                f"parameter {name} at layer {pos}")
        arr -= config.lr * (g + config.weight_decay * arr)
    return out


def evaluate(model: ModelGraph, batch: Batch, chunk: int = 256) -> float:
    """Top-1 accuracy in eval mode."""
    hits = 0
    for i in range(0, batch.size, chunk):
        logits, _ = forward(model, batch.inputs[i:i + chunk], mode="eval")
        hits += int((logits.argmax(axis=1) == batch.labels[i:i + chunk]).sum())
    return hits / batch.size


def finetune(model: ModelGraph, dataset: tuple[Batch, Batch],
             config: TrainConfig) -> tuple[ModelGraph, list[tuple[int, float, float]]]:
    """Shuffled mini-batch SGD; returns (model, history).

    History rows are (epoch, train_loss, test_accuracy).  The architecture
    is never altered; epochs=0 returns an unchanged copy.
    """
    train, test = dataset
    work = to_precision(model, config.precision)
    rng = np.random.default_rng(config.seed)
    history: list[tuple[int, float, float]] = []
    counts_before = channel_counts(work)
    for epoch in range(config.epochs):
        perm = rng.permutation(train.size)
        losses = []
        for start in range(0, train.size, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb, yb = train.inputs[idx], train.labels[idx]
            logits, cache = forward(work, xb, mode="train")
            losses.append(loss_softmax_ce(logits, yb))
            grads = backward(work, cache, yb)
            work = sgd_step(work, grads, config)
        history.append((epoch, float(np.mean(losses)), evaluate(work, test)))
    if channel_counts(work) != counts_before:
        raise ShapeConsistencyError("fine-tuning must not alter the architecture")
    return work, history


def synth_dataset(seed: int, n_train: int, n_test: int) -> tuple[Batch, Batch]:
    """Deterministic 2-class 1x16x16 stripe dataset.

    Class 0 is a horizontal stripe pattern, class 1 vertical, both with
    Gaussian noise (sigma 0.3).  Labels alternate so classes stay balanced;
    train and test use disjoint seeded streams.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("dataset sizes must be >= 1")
    rows = np.where(np.arange(16) % 2 == 0, 1.0, -1.0)
    horizontal = np.tile(rows[:, None], (1, 16))
    vertical = np.tile(rows[None, :], (16, 1))

    def make(n: int, stream: int) -> Batch:
        rng = np.random.default_rng([seed, stream])
        labels = np.arange(n) % 2
        base = np.where(labels[:, None, None] == 0, horizontal, vertical)
        x = base + rng.normal(0.0, 0.3, size=(n, 16, 16))
        return Batch(x[:, None, :, :].astype(np.float32), labels.astype(np.int64))

    return make(n_train, 0), make(n_test, 1)
