"""Sequential CNN container with a bit-exact on-disk format.

A model is an ordered list of layers (conv2d, batchnorm, relu, maxpool,
global_avg_pool, linear) plus an input shape.  On disk it is a pair of
files:

* architecture manifest -- JSON with top level
  ``{"format": "nnwm-v1", "input": [C, H, W], "layers": [...]}``;
* weight blob -- an 8-byte header (magic ``NNWM``, version u32
  little-endian) followed by the raw float32 tensors, little-endian,
  row-major, concatenated in graph order.  Conv weights are stored as
  (c_out, c_in, kh, kw) then the optional bias; batchnorm stores gamma,
  beta, running_mean, running_var; linear stores weights then bias.

Tensor offsets are always derived from the manifest shapes, never stored,
so the manifest is the single source of truth.  load/save round-trip at
byte level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    BlobFormatError,
    BlobSizeError,
    ManifestError,
    ShapeConsistencyError,
)

MAGIC = b"NNWM"
VERSION = 1
MANIFEST_FORMAT = "nnwm-v1"
DEFAULT_BN_EPS = 1e-5


@dataclass
class ConvLayer:
    """2-D convolution; weights shaped (c_out, c_in, kh, kw)."""

    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    @property
    def c_out(self) -> int:
        return int(self.weights.shape[0])

    @property
    def c_in(self) -> int:
        return int(self.weights.shape[1])


@dataclass
class BatchNormLayer:
    """Per-channel affine normalization over a (N, C, H, W) map."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_BN_EPS

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])


@dataclass
class ReluLayer:
    pass


@dataclass
class MaxPoolLayer:
    kernel: int
    stride: int


@dataclass
class GlobalAvgPoolLayer:
    pass


@dataclass
class LinearLayer:
    """Fully connected layer; weights shaped (out_features, in_features)."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    @property
    def out_features(self) -> int:
        return int(self.weights.shape[0])

    @property
    def in_features(self) -> int:
        return int(self.weights.shape[1])


Layer = ConvLayer | BatchNormLayer | ReluLayer | MaxPoolLayer | GlobalAvgPoolLayer | LinearLayer


@dataclass
class ModelGraph:
    """Straight-line layer list; the host signal for watermarking."""

    layers: list[Layer]
    input_shape: tuple[int, int, int]
    name: str = "model"


def conv_layer_indices(model: ModelGraph) -> list[int]:
    """Graph positions of all conv layers, in order."""
    return [i for i, ly in enumerate(model.layers) if isinstance(ly, ConvLayer)]


def channel_counts(model: ModelGraph) -> list[int]:
    """Output-channel count of each conv layer, in graph order."""
    return [ly.c_out for ly in model.layers if isinstance(ly, ConvLayer)]


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeConsistencyError(msg)


def _check_vector(name: str, v: np.ndarray, length: int | None = None) -> None:
    _check(isinstance(v, np.ndarray) and v.ndim == 1, f"{name} must be a 1-D array")
    _check(v.size >= 1, f"{name} must be non-empty")
    if length is not None:
        _check(v.shape[0] == length, f"{name} has length {v.shape[0]}, expected {length}")
    _check(bool(np.isfinite(v).all()), f"{name} contains non-finite values")


def layer_input_shapes(model: ModelGraph) -> list[tuple]:
    """Activation shape entering each layer.

    Entries are ("map", C, H, W) for spatial activations and ("vec", F)
    after global pooling or a linear layer.  Raises ShapeConsistencyError
    on any adjacent-shape mismatch.
    """
    c, h, w = (int(x) for x in model.input_shape)
    _check(c >= 1 and h >= 1 and w >= 1, f"input shape {model.input_shape} not positive")
    shape: tuple = ("map", c, h, w)
    shapes = []
    for pos, ly in enumerate(model.layers):
        shapes.append(shape)
        where = f"layer {pos} ({type(ly).__name__})"
        if isinstance(ly, ConvLayer):
            _check(shape[0] == "map", f"{where}: conv applied to non-spatial input")
            _, c, h, w = shape
            _check(ly.c_in == c, f"{where}: c_in {ly.c_in} != incoming channels {c}")
            kh, kw = int(ly.weights.shape[2]), int(ly.weights.shape[3])
            (sy, sx), (py, px) = ly.stride, ly.padding
            ho = (h + 2 * py - kh) // sy + 1
            wo = (w + 2 * px - kw) // sx + 1
            _check(h + 2 * py >= kh and w + 2 * px >= kw and ho >= 1 and wo >= 1,
                   f"{where}: kernel {kh}x{kw} too large for {h}x{w} input")
            shape = ("map", ly.c_out, ho, wo)
        elif isinstance(ly, BatchNormLayer):
            _check(shape[0] == "map", f"{where}: batchnorm applied to non-spatial input")
            _check(ly.channels == shape[1],
                   f"{where}: batchnorm length {ly.channels} != incoming channels {shape[1]}")
        elif isinstance(ly, ReluLayer):
            pass
        elif isinstance(ly, MaxPoolLayer):
            _check(shape[0] == "map", f"{where}: maxpool applied to non-spatial input")
            _, c, h, w = shape
            _check(h >= ly.kernel and w >= ly.kernel,
                   f"{where}: pool kernel {ly.kernel} too large for {h}x{w} input")
            shape = ("map", c, (h - ly.kernel) // ly.stride + 1, (w - ly.kernel) // ly.stride + 1)
        elif isinstance(ly, GlobalAvgPoolLayer):
            _check(shape[0] == "map", f"{where}: global pool applied to non-spatial input")
            shape = ("vec", shape[1])
        elif isinstance(ly, LinearLayer):
            feats = shape[1] * shape[2] * shape[3] if shape[0] == "map" else shape[1]
            _check(ly.in_features == feats,
                   f"{where}: in_features {ly.in_features} != incoming features {feats}")
            shape = ("vec", ly.out_features)
        else:
            raise ShapeConsistencyError(f"{where}: unknown layer type")
    return shapes


def validate(model: ModelGraph) -> None:
    """Check every structural invariant; raise ShapeConsistencyError if violated."""
    _check(len(model.layers) >= 1, "model has no layers")
    for pos, ly in enumerate(model.layers):
        where = f"layer {pos} ({type(ly).__name__})"
        if isinstance(ly, ConvLayer):
            _check(isinstance(ly.weights, np.ndarray) and ly.weights.ndim == 4,
                   f"{where}: conv weights must be 4-D")
            _check(all(d >= 1 for d in ly.weights.shape), f"{where}: non-positive weight dim")
            _check(bool(np.isfinite(ly.weights).all()), f"{where}: non-finite conv weights")
            if ly.bias is not None:
                _check_vector(f"{where} bias", ly.bias, ly.c_out)
            _check(ly.stride[0] >= 1 and ly.stride[1] >= 1, f"{where}: stride must be >= 1")
            _check(ly.padding[0] >= 0 and ly.padding[1] >= 0, f"{where}: negative padding")
        elif isinstance(ly, BatchNormLayer):
            n = ly.gamma.shape[0] if isinstance(ly.gamma, np.ndarray) and ly.gamma.ndim == 1 else -1
            _check(n >= 1, f"{where}: gamma must be a non-empty 1-D array")
            _check_vector(f"{where} gamma", ly.gamma)
            _check_vector(f"{where} beta", ly.beta, n)
            _check_vector(f"{where} running_mean", ly.running_mean, n)
            _check_vector(f"{where} running_var", ly.running_var, n)
            _check(bool((ly.running_var >= 0).all()), f"{where}: negative running_var")
            _check(float(ly.eps) > 0 and np.isfinite(ly.eps), f"{where}: eps must be positive")
        elif isinstance(ly, MaxPoolLayer):
            _check(ly.kernel >= 1 and ly.stride >= 1, f"{where}: kernel and stride must be >= 1")
        elif isinstance(ly, LinearLayer):
            _check(isinstance(ly.weights, np.ndarray) and ly.weights.ndim == 2,
                   f"{where}: linear weights must be 2-D")
            _check(bool(np.isfinite(ly.weights).all()), f"{where}: non-finite linear weights")
            if ly.bias is not None:
                _check_vector(f"{where} bias", ly.bias, ly.out_features)
    _check(len(conv_layer_indices(model)) >= 1, "model has no conv layer")
    layer_input_shapes(model)


def clone_graph(model: ModelGraph) -> ModelGraph:
    """Deep copy; all weight arrays are owned by the copy."""
    layers: list[Layer] = []
    for ly in model.layers:
        if isinstance(ly, ConvLayer):
            layers.append(ConvLayer(ly.weights.copy(),
                                    None if ly.bias is None else ly.bias.copy(),
                                    tuple(ly.stride), tuple(ly.padding)))
        elif isinstance(ly, BatchNormLayer):
            layers.append(BatchNormLayer(ly.gamma.copy(), ly.beta.copy(),
                                         ly.running_mean.copy(), ly.running_var.copy(),
                                         float(ly.eps)))
        elif isinstance(ly, ReluLayer):
            layers.append(ReluLayer())
        elif isinstance(ly, MaxPoolLayer):
            layers.append(MaxPoolLayer(ly.kernel, ly.stride))
        elif isinstance(ly, GlobalAvgPoolLayer):
            layers.append(GlobalAvgPoolLayer())
        elif isinstance(ly, LinearLayer):
            layers.append(LinearLayer(ly.weights.copy(),
                                      None if ly.bias is None else ly.bias.copy()))
        else:
            raise ShapeConsistencyError(f"unknown layer type {type(ly).__name__}")
    return ModelGraph(layers, tuple(model.input_shape), model.name)


def iter_named_params(model: ModelGraph) -> Iterator[tuple[int, str, np.ndarray]]:
    """Yield (layer position, attribute name, array) for every trainable tensor."""
    for pos, ly in enumerate(model.layers):
        if isinstance(ly, ConvLayer):
            yield pos, "weights", ly.weights
            if ly.bias is not None:
                yield pos, "bias", ly.bias
        elif isinstance(ly, BatchNormLayer):
            yield pos, "gamma", ly.gamma
            yield pos, "beta", ly.beta
        elif isinstance(ly, LinearLayer):
            yield pos, "weights", ly.weights
            if ly.bias is not None:
                yield pos, "bias", ly.bias


# --- serialization ---------------------------------------------------------

def _weight_arrays(ly: Layer) -> list[np.ndarray]:
    """Arrays of one layer in pinned blob order."""
    if isinstance(ly, ConvLayer):
        return [ly.weights] + ([ly.bias] if ly.bias is not None else [])
    if isinstance(ly, BatchNormLayer):
        return [ly.gamma, ly.beta, ly.running_mean, ly.running_var]
    if isinstance(ly, LinearLayer):
        return [ly.weights] + ([ly.bias] if ly.bias is not None else [])
    return []


def _layer_to_record(ly: Layer) -> dict:
    if isinstance(ly, ConvLayer):
        kh, kw = int(ly.weights.shape[2]), int(ly.weights.shape[3])
        return {"type": "conv2d", "out_channels": ly.c_out, "in_channels": ly.c_in,
                "kernel": [kh, kw], "stride": [int(ly.stride[0]), int(ly.stride[1])],
                "padding": [int(ly.padding[0]), int(ly.padding[1])],
                "bias": ly.bias is not None}
    if isinstance(ly, BatchNormLayer):
        return {"type": "batchnorm", "channels": ly.channels, "eps": float(ly.eps)}
    if isinstance(ly, ReluLayer):
        return {"type": "relu"}
    if isinstance(ly, MaxPoolLayer):
        return {"type": "maxpool", "kernel": int(ly.kernel), "stride": int(ly.stride)}
    if isinstance(ly, GlobalAvgPoolLayer):
        return {"type": "global_avg_pool"}
    if isinstance(ly, LinearLayer):
        return {"type": "linear", "out": ly.out_features, "in": ly.in_features,
                "bias": ly.bias is not None}
    raise ShapeConsistencyError(f"unknown layer type {type(ly).__name__}")


def _require(rec: dict, key: str, idx: int):
    if key not in rec:
        raise ManifestError(f"layer {idx}: missing field '{key}'")
    return rec[key]


def _int_pair(rec: dict, key: str, idx: int) -> tuple[int, int]:
    v = _require(rec, key, idx)
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, int) for x in v)):
        raise ManifestError(f"layer {idx}: '{key}' must be a pair of integers")
    return int(v[0]), int(v[1])


def _record_to_layer(rec: dict, idx: int) -> tuple[Layer, list[tuple[str, tuple[int, ...]]]]:
    """Build a zero-weight layer plus the ordered (attr, shape) blob slots."""
    if not isinstance(rec, dict) or "type" not in rec:
        raise ManifestError(f"layer {idx}: record must be an object with a 'type' field")
    t = rec["type"]
    if t == "conv2d":
        co = int(_require(rec, "out_channels", idx))
        ci = int(_require(rec, "in_channels", idx))
        kh, kw = _int_pair(rec, "kernel", idx)
        stride = _int_pair(rec, "stride", idx)
        padding = _int_pair(rec, "padding", idx)
        has_bias = bool(_require(rec, "bias", idx))
        if min(co, ci, kh, kw) < 1:
            raise ManifestError(f"layer {idx}: conv2d dims must be positive")
        ly = ConvLayer(np.zeros((co, ci, kh, kw), dtype=np.float32),
                       np.zeros(co, dtype=np.float32) if has_bias else None,
                       stride, padding)
        slots = [("weights", (co, ci, kh, kw))] + ([("bias", (co,))] if has_bias else [])
        return ly, slots
    if t == "batchnorm":
        n = int(_require(rec, "channels", idx))
        if n < 1:
            raise ManifestError(f"layer {idx}: batchnorm channels must be positive")
        eps = float(rec.get("eps", DEFAULT_BN_EPS))
        z = lambda: np.zeros(n, dtype=np.float32)
        ly = BatchNormLayer(z(), z(), z(), z(), eps)
        return ly, [("gamma", (n,)), ("beta", (n,)), ("running_mean", (n,)), ("running_var", (n,))]
    if t == "relu":
        return ReluLayer(), []
    if t == "maxpool":
        return MaxPoolLayer(int(_require(rec, "kernel", idx)), int(_require(rec, "stride", idx))), []
    if t == "global_avg_pool":
        return GlobalAvgPoolLayer(), []
    if t == "linear":
        out = int(_require(rec, "out", idx))
        inp = int(_require(rec, "in", idx))
        has_bias = bool(_require(rec, "bias", idx))
        if min(out, inp) < 1:
            raise ManifestError(f"layer {idx}: linear dims must be positive")
        ly = LinearLayer(np.zeros((out, inp), dtype=np.float32),
                         np.zeros(out, dtype=np.float32) if has_bias else None)
        slots = [("weights", (out, inp))] + ([("bias", (out,))] if has_bias else [])
        return ly, slots
    raise ManifestError(f"layer {idx}: unknown layer type '{t}'")


def _parse_manifest(arch_path: str | Path) -> tuple[ModelGraph, list[list[tuple[str, tuple[int, ...]]]]]:
    """Parse a manifest into a zero-weight graph plus per-layer blob slots."""
    try:
        text = Path(arch_path).read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot read manifest {arch_path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {arch_path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ManifestError("manifest top level must be an object")
    if doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"manifest format must be '{MANIFEST_FORMAT}', got {doc.get('format')!r}")
    inp = doc.get("input")
    if not (isinstance(inp, list) and len(inp) == 3 and all(isinstance(x, int) and x >= 1 for x in inp)):
        raise ManifestError("manifest 'input' must be [C, H, W] positive integers")
    recs = doc.get("layers")
    if not isinstance(recs, list) or not recs:
        raise ManifestError("manifest 'layers' must be a non-empty list")
    built = [_record_to_layer(rec, i) for i, rec in enumerate(recs)]
    name = doc.get("name", "model")
    model = ModelGraph([ly for ly, _ in built], (inp[0], inp[1], inp[2]), str(name))
    return model, [slots for _, slots in built]


def load_arch(arch_path: str | Path) -> ModelGraph:
    """Load the manifest alone; weights are zero-filled.

    Enough for structural operations (channel counts, extraction) that
    never touch weight values.
    """
    model, _ = _parse_manifest(arch_path)
    validate(model)
    return model


def load_model(arch_path: str | Path, weights_path: str | Path) -> ModelGraph:
    """Load a manifest + weight blob pair; bit-exact float payload."""
    model, slots = _parse_manifest(arch_path)
    blob = Path(weights_path).read_bytes()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise BlobFormatError(f"weight blob {weights_path} has bad magic (expected {MAGIC!r})")
    version = int.from_bytes(blob[4:8], "little")
    if version != VERSION:
        raise BlobFormatError(f"unsupported blob version {version} (expected {VERSION})")
    expected = 8 + 4 * sum(int(np.prod(shape)) for layer_slots in slots for _, shape in layer_slots)
    if len(blob) != expected:
        raise BlobSizeError(f"weight blob is {len(blob)} bytes, manifest declares {expected}")
    off = 8
    for ly, layer_slots in zip(model.layers, slots):
        for attr, shape in layer_slots:
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).copy()
            off += 4 * count
            setattr(ly, attr, arr)
    validate(model)
    return model


def save_model(model: ModelGraph, arch_path: str | Path, weights_path: str | Path) -> None:
    """Write the manifest/blob pair; deterministic bytes for identical input."""
    validate(model)
    manifest = {
        "format": MANIFEST_FORMAT,
        "name": model.name,
        "input": [int(x) for x in model.input_shape],
        "layers": [_layer_to_record(ly) for ly in model.layers],
    }
    Path(arch_path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    parts = [MAGIC, VERSION.to_bytes(4, "little")]
    for ly in model.layers:
        for arr in _weight_arrays(ly):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(weights_path).write_bytes(b"".join(parts))
