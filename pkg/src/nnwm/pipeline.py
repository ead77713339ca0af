"""End-to-end embed / extract / verify plus the attack harness.

Embedding prunes one key-selected conv layer per payload segment, at the
rate encoding that segment.  Extraction compares channel counts between
the original (model or receipt) and a suspect model, decodes the rate at
each selected layer and reassembles the bits.  Attacks either perturb
parameters (which provably cannot change the extracted bits) or re-prune
the structure (which degrades them measurably).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import wm_codec
from .errors import (
    ArchitectureMismatchError,
    CapacityError,
    CodecError,
    NnwmError,
)
from .importance import criterion_applicable, normalize_criterion
from .model_store import (
    ConvLayer,
    LinearLayer,
    ModelGraph,
    channel_counts,
    clone_graph,
    conv_layer_indices,
    iter_named_params,
)
from .pruner import PlanEntry, PruningPlan, Receipt, ReceiptLayer, apply_prune, plan_layer
from .toy_trainer import Batch, TrainConfig, finetune
from .wm_codec import EmbedParams, KeyStream, WatermarkPayload


@dataclass
class SegmentDecode:
    """Decode detail for one carrier layer (index = conv ordinal)."""

    layer_index: int
    c: int
    c_suspect: int
    rate: float
    value: int
    clamped: bool


@dataclass
class ExtractionResult:
    bits: str
    segments: list[SegmentDecode]
    warnings: list[str] = field(default_factory=list)


@dataclass
class VerifyReport:
    """Outcome of comparing expected vs extracted bits."""

    expected: str
    extracted: str
    ber: float
    theta: float
    matched: bool
    segments: list[SegmentDecode] | None = None


def eligible_layers(model: ModelGraph, params: EmbedParams, criterion: str) -> list[int]:
    """Conv ordinals wide enough to decode losslessly and scorable by the criterion."""
    crit = normalize_criterion(criterion)
    positions = conv_layer_indices(model)
    counts = channel_counts(model)
    c_min = wm_codec.min_channels(params)
    return [i for i, (pos, c) in enumerate(zip(positions, counts))
            if c >= c_min and criterion_applicable(model, pos, crit)]


def embed(model: ModelGraph, payload: WatermarkPayload, params: EmbedParams,
          criterion: str = "l1_norm", decoy: bool = False) -> tuple[ModelGraph, Receipt]:
    """Prune the payload into the model; returns (marked model, receipt).

    With decoy=True, every non-selected conv layer is additionally pruned
    at a key-stream rate from [p_min, p_max), so carriers do not stand out.
    """
    crit = normalize_criterion(criterion)
    if payload.segment_length != params.segment_length:
        raise CodecError(
            f"payload segment length {payload.segment_length} != params "
            f"segment length {params.segment_length}")
    values = wm_codec.segment(payload)
    m = len(values)
    positions = conv_layer_indices(model)
    counts = channel_counts(model)
    c_min = wm_codec.min_channels(params)
    too_narrow = sum(1 for c in counts if c < c_min)
    eligible = eligible_layers(model, params, crit)
    if len(eligible) < m:
        raise CapacityError(
            required=m, available=len(eligible),
            detail=f"{len(counts)} conv layers total, {too_narrow} narrower than "
                   f"{c_min} channels, criterion '{crit}' inapplicable to "
                   f"{len(counts) - too_narrow - len(eligible)} of the rest")
    stream = KeyStream(params.key)
    selected = sorted(wm_codec.keyed_shuffle(eligible, stream)[:m])
    entries = []
    carriers = []  # (ordinal, target rate, pruned count) per segment, ascending
    for value, ordinal in zip(values, selected):
        rate = wm_codec.encode_rate(value, params)
        k = wm_codec.rate_to_channel_count(rate, counts[ordinal])
        retained = plan_layer(model, positions[ordinal], k, crit)
        entries.append(PlanEntry(positions[ordinal], rate, k, tuple(retained)))
        carriers.append((ordinal, rate, k))
    if decoy:
        chosen = set(selected)
        for ordinal in range(len(positions)):
            if ordinal in chosen:
                continue
            rate = params.p_min + stream.uniform() * (params.p_max - params.p_min)
            k = wm_codec.rate_to_channel_count(rate, counts[ordinal])
            if k == 0 or not criterion_applicable(model, positions[ordinal], crit):
                continue
            retained = plan_layer(model, positions[ordinal], k, crit)
            entries.append(PlanEntry(positions[ordinal], rate, k, tuple(retained)))
    marked = apply_prune(model, PruningPlan(tuple(entries), crit))
    receipt = Receipt(
        segment_length=params.segment_length,
        p_min=params.p_min,
        p_max=params.p_max,
        criterion=crit,
        layers=tuple(
            ReceiptLayer(index=ordinal, c=counts[ordinal],
                         c_pruned=counts[ordinal] - k, target_rate=rate,
                         realized_rate=k / counts[ordinal])
            for ordinal, rate, k in carriers),
        payload_bits=payload.n,
        key_fingerprint=wm_codec.key_fingerprint(params.key),
    )
    check = extract(model, marked, key=params.key, params=params, n=payload.n, criterion=crit)
    if check.bits != payload.bits:
        raise NnwmError("internal error: freshly embedded payload failed to extract")
    return marked, receipt


def _decode_layers(pairs: list[tuple[int, int, int]], params_l: int, p_min: float,
                   p_max: float, n: int) -> ExtractionResult:
    """Decode (ordinal, c_original, c_suspect) triples into payload bits."""
    params = EmbedParams(segment_length=params_l, key=b"", p_min=p_min, p_max=p_max)
    segments = []
    warnings = []
    values = []
    for ordinal, c, c_susp in pairs:
        p_hat = (c - c_susp) / c
        value, clamped = wm_codec.decode_rate_clamped(p_hat, params)
        if clamped:
            warnings.append(
                f"conv layer {ordinal}: observed rate {p_hat:.6f} outside "
                f"[{p_min}, {p_max}); decoded by clamping")
        segments.append(SegmentDecode(ordinal, c, c_susp, p_hat, value, clamped))
        values.append(value)
    bits = wm_codec.assemble_bits(values, params_l, n)
    return ExtractionResult(bits=bits, segments=segments, warnings=warnings)


def extract(original: ModelGraph | Receipt, suspect: ModelGraph,
            key: bytes | None = None, params: EmbedParams | None = None,
            n: int | None = None, criterion: str = "l1_norm") -> ExtractionResult:
    """Recover payload bits by comparing channel counts.

    `original` may be the unmarked model (selection is then recomputed from
    the key) or a receipt (selection is pinned by the receipt itself).
    Out-of-range rates decode by clamping and are reported as warnings.
    """
    counts_susp = channel_counts(suspect)
    if isinstance(original, Receipt):
        rec = original
        result_warnings = []
        if key is not None and wm_codec.key_fingerprint(key) != rec.key_fingerprint:
            result_warnings.append("key does not match the receipt fingerprint")
        pairs = []
        for entry in rec.layers:
            if entry.index >= len(counts_susp):
                raise ArchitectureMismatchError(
                    f"receipt refers to conv layer {entry.index}, suspect has "
                    f"only {len(counts_susp)}")
            pairs.append((entry.index, entry.c, counts_susp[entry.index]))
        result = _decode_layers(pairs, rec.segment_length, rec.p_min, rec.p_max,
                                rec.payload_bits)
        result.warnings = result_warnings + result.warnings
        return result
    if params is None or n is None:
        raise CodecError("extraction from a model needs params and the payload length")
    if n < 1:
        raise CodecError("payload length must be >= 1")
    counts_orig = channel_counts(original)
    if len(counts_orig) != len(counts_susp):
        raise ArchitectureMismatchError(
            f"original has {len(counts_orig)} conv layers, suspect has {len(counts_susp)}")
    eff_key = params.key if key is None else key
    m = -(-n // params.segment_length)
    eligible = eligible_layers(original, params, criterion)
    selected = wm_codec.select_layers(eligible, m, eff_key)
    pairs = [(i, counts_orig[i], counts_susp[i]) for i in selected]
    return _decode_layers(pairs, params.segment_length, params.p_min, params.p_max, n)


def verify(expected: str, extracted: str | ExtractionResult,
           theta: float = 0.0) -> VerifyReport:
    """Bit error rate between expected and extracted; match iff BER <= theta."""
    segments = None
    if isinstance(extracted, ExtractionResult):
        segments = extracted.segments
        extracted = extracted.bits
    if len(expected) != len(extracted):
        raise CodecError(
            f"expected {len(expected)} bits but extracted {len(extracted)}")
    if not expected or set(expected) - {"0", "1"} or set(extracted) - {"0", "1"}:
        raise CodecError("verify needs non-empty '0'/'1' strings")
    errors = sum(a != b for a, b in zip(expected, extracted))
    ber = errors / len(expected)
    return VerifyReport(expected=expected, extracted=extracted, ber=ber,
                        theta=theta, matched=ber <= theta, segments=segments)


# --- attacks ----------------------------------------------------------------

def attack_noise(model: ModelGraph, sigma_rel: float, seed: int = 0) -> ModelGraph:
    """Add zero-mean Gaussian noise, std = sigma_rel * per-tensor weight std."""
    if sigma_rel < 0:
        raise ValueError("sigma_rel must be >= 0")
    out = clone_graph(model)
    rng = np.random.default_rng(seed)
    for _, _, arr in iter_named_params(out):
        scale = sigma_rel * float(arr.std())
        if scale > 0:
            arr += rng.normal(0.0, scale, size=arr.shape).astype(arr.dtype)
    return out


def attack_zero_weights(model: ModelGraph, fraction: float) -> ModelGraph:
    """Zero the given fraction of smallest-magnitude conv/linear weights, globally."""
    if not (0.0 <= fraction <= 1.0):
        raise ValueError("fraction must lie in [0, 1]")
    out = clone_graph(model)
    tensors = [ly.weights for ly in out.layers if isinstance(ly, (ConvLayer, LinearLayer))]
    total = sum(t.size for t in tensors)
    k = min(wm_codec.round_half_up(fraction * total), total)
    if k == 0:
        return out
    magnitudes = np.concatenate([np.abs(t).ravel() for t in tensors])
    order = np.argsort(magnitudes, kind="stable")
    kill = np.zeros(total, dtype=bool)
    kill[order[:k]] = True
    off = 0
    for t in tensors:
        mask = kill[off:off + t.size].reshape(t.shape)
        t[mask] = 0.0
        off += t.size
    return out


def attack_finetune(model: ModelGraph, dataset: tuple[Batch, Batch],
                    epochs: int, lr: float = 0.001, seed: int = 0) -> ModelGraph:
    """Fine-tune the suspect model; parameters move, architecture cannot."""
    config = TrainConfig(epochs=epochs, lr=lr, seed=seed)
    tuned, _ = finetune(model, dataset, config)
    return tuned


def attack_structural(model: ModelGraph, extra_rate: float, seed: int = 0) -> ModelGraph:
    """Prune extra channels uniformly at random from every conv layer.

    The only attack here that changes the architecture; used to measure how
    fast the watermark degrades, not to make any robustness claim.
    """
    if not (0.0 <= extra_rate < 1.0):
        raise ValueError("extra_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    positions = conv_layer_indices(model)
    counts = channel_counts(model)
    entries = []
    for pos, c in zip(positions, counts):
        k = min(wm_codec.round_half_up(extra_rate * c), c - 1)
        if k == 0:
            continue
        dropped = rng.choice(c, size=k, replace=False)
        retained = tuple(i for i in range(c) if i not in set(int(d) for d in dropped))
        entries.append(PlanEntry(pos, extra_rate, k, retained))
    if not entries:
        return clone_graph(model)
    return apply_prune(model, PruningPlan(tuple(entries), "random"))
