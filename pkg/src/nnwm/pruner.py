"""Structural channel pruning: remove output channels and rewire consumers.

Pruning a conv layer slices its weight rows, the trailing batchnorm
vectors, the next conv layer's input channels, and (through pooling) the
matching columns of a linear head.  Channel identity passes unchanged
through relu, maxpool and global average pooling.  The result is a new
graph; inputs are never mutated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import importance
from .errors import (
    ArchitectureMismatchError,
    InconsistencyError,
    PlanError,
)
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
    layer_input_shapes,
    validate,
)

RECEIPT_FORMAT = "nnwm-receipt-v1"


@dataclass(frozen=True)
class PlanEntry:
    """One conv layer to prune: graph position, target rate, survivors."""

    conv_index: int
    target_rate: float
    k: int
    retained: tuple[int, ...]


@dataclass(frozen=True)
class PruningPlan:
    entries: tuple[PlanEntry, ...]
    criterion: str


def plan_layer(model: ModelGraph, conv_index: int, k: int, criterion: str) -> list[int]:
    """Channels to retain after dropping the k least important ones.

    Ties are broken by dropping the higher channel index, so the retained
    list is deterministic; original channel order is preserved.
    """
    iv = importance.score(model, conv_index, criterion)
    c = iv.scores.shape[0]
    if not (0 <= k <= c - 1):
        raise PlanError(f"k={k} out of range for a {c}-channel layer (need 0 <= k <= {c - 1})")
    drop_order = sorted(range(c), key=lambda i: (iv.scores[i], -i))
    dropped = set(drop_order[:k])
    return [i for i in range(c) if i not in dropped]


def _check_entry(model: ModelGraph, entry: PlanEntry) -> None:
    if not (0 <= entry.conv_index < len(model.layers)):
        raise PlanError(f"plan entry at position {entry.conv_index}: no such layer")
    ly = model.layers[entry.conv_index]
    if not isinstance(ly, ConvLayer):
        raise PlanError(f"plan entry at position {entry.conv_index}: not a conv layer")
    c = ly.c_out
    r = entry.retained
    if len(r) != c - entry.k or len(r) < 1:
        raise PlanError(
            f"plan entry at position {entry.conv_index}: retained size {len(r)} "
            f"inconsistent with c={c}, k={entry.k}")
    if list(r) != sorted(set(r)) or r[0] < 0 or r[-1] >= c:
        raise PlanError(
            f"plan entry at position {entry.conv_index}: retained list must be "
            f"strictly increasing within [0, {c})")


def _rewire_consumers(layers: list, pos: int, retained: list[int], old_c: int,
                      input_shapes: list[tuple]) -> None:
    """Slice everything downstream of a pruned conv that shares its channels."""
    j = pos + 1
    while j < len(layers):
        ly = layers[j]
        if isinstance(ly, BatchNormLayer):
            if ly.channels != old_c:
                raise PlanError(
                    f"layer {j}: batchnorm length {ly.channels} does not match "
                    f"pruned conv width {old_c}")
            ly.gamma = ly.gamma[retained]
            ly.beta = ly.beta[retained]
            ly.running_mean = ly.running_mean[retained]
            ly.running_var = ly.running_var[retained]
        elif isinstance(ly, (ReluLayer, MaxPoolLayer, GlobalAvgPoolLayer)):
            pass
        elif isinstance(ly, ConvLayer):
            if ly.c_in != old_c:
                raise PlanError(
                    f"layer {j}: conv c_in {ly.c_in} does not match pruned width {old_c}")
            ly.weights = ly.weights[:, retained]
            return
        elif isinstance(ly, LinearLayer):
            shape = input_shapes[j]
            if shape[0] == "map":
                _, ch, h, w = shape
                per_channel = h * w
            else:
                ch, per_channel = shape[1], 1
            if ch != old_c:
                raise PlanError(
                    f"layer {j}: linear consumes {ch} channels, pruned conv had {old_c}")
            cols = np.concatenate(
                [np.arange(i * per_channel, (i + 1) * per_channel) for i in retained])
            ly.weights = ly.weights[:, cols]
            return
        else:
            raise PlanError(f"layer {j}: cannot rewire past {type(ly).__name__}")
        j += 1
    # pruned conv feeds the network output directly; nothing left to rewire


def apply_prune(model: ModelGraph, plan: PruningPlan) -> ModelGraph:
    """Apply the plan, returning a new graph that satisfies all invariants."""
    positions = [e.conv_index for e in plan.entries]
    if len(set(positions)) != len(positions):
        raise PlanError("plan contains duplicate conv positions")
    for entry in plan.entries:
        _check_entry(model, entry)
    input_shapes = layer_input_shapes(model)
    out = clone_graph(model)
    for entry in plan.entries:
        conv = out.layers[entry.conv_index]
        old_c = conv.c_out
        retained = list(entry.retained)
        conv.weights = conv.weights[retained]
        if conv.bias is not None:
            conv.bias = conv.bias[retained]
        _rewire_consumers(out.layers, entry.conv_index, retained, old_c, input_shapes)
    validate(out)
    return out


def observed_rates(original: ModelGraph, suspect: ModelGraph) -> list[float]:
    """Per-conv-layer pruning rate (c - c') / c of suspect vs original."""
    c_orig = channel_counts(original)
    c_susp = channel_counts(suspect)
    if len(c_orig) != len(c_susp):
        raise ArchitectureMismatchError(
            f"original has {len(c_orig)} conv layers, suspect has {len(c_susp)}")
    for i, (c, cp) in enumerate(zip(c_orig, c_susp)):
        if cp > c:
            raise InconsistencyError(
                f"conv layer {i}: suspect has {cp} channels, original only {c}")
    return [(c - cp) / c for c, cp in zip(c_orig, c_susp)]


# --- receipts ---------------------------------------------------------------

@dataclass(frozen=True)
class ReceiptLayer:
    """One marked layer: index is the position in the conv-layer sequence."""

    index: int
    c: int
    c_pruned: int
    target_rate: float
    realized_rate: float


@dataclass(frozen=True)
class Receipt:
    """Portable record of the original channel counts and scheme parameters.

    Carries a key fingerprint (SHA-256), never the key itself, so it can be
    published without weakening the watermark.
    """

    segment_length: int
    p_min: float
    p_max: float
    criterion: str
    layers: tuple[ReceiptLayer, ...]
    payload_bits: int
    key_fingerprint: str

    def to_json(self) -> str:
        doc = {
            "format": RECEIPT_FORMAT,
            "params": {
                "l": self.segment_length,
                "p_min": self.p_min,
                "p_max": self.p_max,
                "criterion": self.criterion,
            },
            "layers": [
                {"index": e.index, "c": e.c, "c_pruned": e.c_pruned,
                 "target_rate": e.target_rate, "realized_rate": e.realized_rate}
                for e in self.layers
            ],
            "payload_bits": self.payload_bits,
            "key_fingerprint": self.key_fingerprint,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Receipt":
        doc = json.loads(text)
        if doc.get("format") != RECEIPT_FORMAT:
            raise PlanError(f"receipt format must be '{RECEIPT_FORMAT}'")
        params = doc["params"]
        layers = []
        for rec in doc["layers"]:
            e = ReceiptLayer(int(rec["index"]), int(rec["c"]), int(rec["c_pruned"]),
                             float(rec["target_rate"]), float(rec["realized_rate"]))
            if e.c_pruned > e.c or e.c < 1:
                raise PlanError(f"receipt layer {e.index}: c_pruned {e.c_pruned} > c {e.c}")
            if not math.isclose(e.realized_rate, (e.c - e.c_pruned) / e.c, abs_tol=1e-9):
                raise PlanError(f"receipt layer {e.index}: realized_rate inconsistent with counts")
            layers.append(e)
        return cls(int(params["l"]), float(params["p_min"]), float(params["p_max"]),
                   str(params["criterion"]), tuple(layers),
                   int(doc["payload_bits"]), str(doc["key_fingerprint"]))


def save_receipt(receipt: Receipt, path: str | Path) -> None:
    Path(path).write_text(receipt.to_json(), encoding="utf-8")


def load_receipt(path: str | Path) -> Receipt:
    return Receipt.from_json(Path(path).read_text(encoding="utf-8"))
