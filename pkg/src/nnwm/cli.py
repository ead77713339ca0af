"""Command-line surface: embed, extract, verify, capacity, inspect, attack, train-demo.

Exit codes: 0 success (verify: match), 1 verify mismatch, 2 usage or
format errors.  Every command accepts --json for machine-readable output.
Scheme parameters (--l, --pmin, --pmax, --criterion) are inputs at both
ends and are never stored inside a model, so a marked model stays
indistinguishable from an ordinarily pruned one.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline, pruner, wm_codec
from .errors import NnwmError
from .fixtures import vgg_tiny
from .importance import normalize_criterion, score
from .model_store import (
    channel_counts,
    conv_layer_indices,
    load_arch,
    load_model,
    save_model,
)
from .toy_trainer import TrainConfig, evaluate, finetune, synth_dataset
from .wm_codec import EmbedParams, WatermarkPayload


def _default_seed() -> int:
    try:
        return int(os.environ.get("NNWM_SEED", "0"))
    except ValueError:
        return 0


def _parse_key(text: str) -> bytes:
    if text.startswith("hex:"):
        try:
            return bytes.fromhex(text[4:])
        except ValueError:
            raise NnwmError(f"--key: invalid hex string {text[4:]!r}") from None
    return text.encode("utf-8")


def _parse_payload(text: str) -> str:
    if text.startswith("@"):
        text = Path(text[1:]).read_text(encoding="utf-8").strip()
    if text.startswith("hex:"):
        try:
            raw = bytes.fromhex(text[4:])
        except ValueError:
            raise NnwmError(f"--payload: invalid hex string {text[4:]!r}") from None
        return "".join(format(b, "08b") for b in raw)
    if not text or set(text) - {"0", "1"}:
        raise NnwmError("--payload must be a '0'/'1' string, hex:<digits>, or @file")
    return text


def _emit(args, doc: dict, human: str) -> None:
    if args.json:
        print(json.dumps(doc, indent=2))
    else:
        print(human)


def _params_from(args) -> EmbedParams:
    return EmbedParams(segment_length=args.l, key=_parse_key(args.key),
                       p_min=args.pmin, p_max=args.pmax,
                       r_cov=getattr(args, "rcov", None))


def cmd_embed(args) -> int:
    model = load_model(args.arch, args.weights)
    params = _params_from(args)
    payload = WatermarkPayload(_parse_payload(args.payload), args.l)
    marked, receipt = pipeline.embed(model, payload, params,
                                     criterion=args.criterion, decoy=args.decoy)
    if args.finetune_epochs > 0:
        if tuple(model.input_shape) != (1, 16, 16):
            raise NnwmError(
                "--finetune-epochs uses the built-in 1x16x16 synthetic dataset; "
                f"model input is {model.input_shape}")
        ds = synth_dataset(args.seed, 512, 256)
        marked, _ = finetune(marked, ds, TrainConfig(epochs=args.finetune_epochs,
                                                     lr=0.001, seed=args.seed))
    out_arch = f"{args.out_prefix}.json"
    out_weights = f"{args.out_prefix}.bin"
    save_model(marked, out_arch, out_weights)
    pruner.save_receipt(receipt, args.receipt)
    eligible = pipeline.eligible_layers(model, params, args.criterion)
    n_max = wm_codec.capacity(len(eligible), args.l, 1.0)
    lines = [
        f"payload: n={payload.n} bits, m={payload.num_segments} segments (l={args.l})",
        f"selected layers: {payload.num_segments} of {len(eligible)} eligible "
        f"({len(channel_counts(model))} conv layers total)",
        f"capacity: N={n_max} bits at full coverage of the eligible set",
        f"{'index':>5} {'c':>5} {'c_pruned':>8} {'target':>9} {'realized':>9}",
    ]
    for e in receipt.layers:
        lines.append(f"{e.index:>5} {e.c:>5} {e.c_pruned:>8} "
                     f"{e.target_rate:>9.5f} {e.realized_rate:>9.6f}")
    lines.append(f"wrote {out_arch}, {out_weights}, receipt {args.receipt}")
    _emit(args, {
        "command": "embed", "n": payload.n, "m": payload.num_segments,
        "selected": [e.index for e in receipt.layers],
        "eligible": len(eligible), "capacity_bits": n_max,
        "layers": [{"index": e.index, "c": e.c, "c_pruned": e.c_pruned,
                    "target_rate": e.target_rate, "realized_rate": e.realized_rate}
                   for e in receipt.layers],
        "out_arch": out_arch, "out_weights": out_weights, "receipt": args.receipt,
    }, "\n".join(lines))
    return 0


def _run_extract(args) -> pipeline.ExtractionResult:
    suspect = load_arch(args.suspect)
    key = _parse_key(args.key) if args.key else None
    if args.receipt:
        receipt = pruner.load_receipt(args.receipt)
        return pipeline.extract(receipt, suspect, key=key)
    if not args.original:
        raise NnwmError("need --original (manifest) or --receipt")
    if key is None:
        raise NnwmError("extraction from an original model needs --key")
    if args.n is None:
        raise NnwmError("extraction from an original model needs --n")
    original = load_arch(args.original)
    params = _params_from(args)
    return pipeline.extract(original, suspect, key=key, params=params,
                            n=args.n, criterion=args.criterion)


def cmd_extract(args) -> int:
    result = _run_extract(args)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _emit(args, {
        "command": "extract", "bits": result.bits,
        "segments": [vars(s) for s in result.segments],
        "warnings": result.warnings,
    }, result.bits)
    return 0


def cmd_verify(args) -> int:
    expected = _parse_payload(args.expect)
    result = _run_extract(args)
    if args.n is not None and args.n != len(expected):
        raise NnwmError(f"--n {args.n} does not match --expect length {len(expected)}")
    report = pipeline.verify(expected, result, theta=args.theta)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    verdict = "match" if report.matched else "mismatch"
    _emit(args, {
        "command": "verify", "ber": report.ber, "theta": report.theta,
        "matched": report.matched, "extracted": report.extracted,
    }, f"BER {report.ber:.6f}  verdict: {verdict}")
    return 0 if report.matched else 1


def cmd_capacity(args) -> int:
    if args.arch:
        t = len(channel_counts(load_arch(args.arch)))
    elif args.t is not None:
        t = args.t
    else:
        raise NnwmError("capacity needs --t or --arch")
    n = wm_codec.capacity(t, args.l, args.rcov)
    _emit(args, {"command": "capacity", "t": t, "l": args.l, "r_cov": args.rcov,
                 "capacity_bits": n}, str(n))
    return 0


def cmd_inspect(args) -> int:
    if args.scores:
        if not (args.arch and args.weights):
            raise NnwmError("inspect --scores needs --arch and --weights")
        model = load_model(args.arch, args.weights)
        positions = conv_layer_indices(model)
        crit = normalize_criterion(args.criterion)
        rows = []
        for ordinal, pos in enumerate(positions):
            iv = score(model, pos, crit)
            rows.append({"index": ordinal, "position": pos,
                         "scores": [float(s) for s in iv.scores]})
        human = "\n".join(
            f"conv {r['index']} (layer {r['position']}): " +
            " ".join(f"{s:.4g}" for s in r["scores"]) for r in rows)
        _emit(args, {"command": "inspect", "criterion": crit, "layers": rows}, human)
        return 0
    if not (args.original and args.suspect):
        raise NnwmError("inspect needs --original and --suspect (or --scores)")
    original = load_arch(args.original)
    suspect = load_arch(args.suspect)
    c_orig = channel_counts(original)
    c_susp = channel_counts(suspect)
    if len(c_orig) != len(c_susp):
        raise NnwmError(
            f"original has {len(c_orig)} conv layers, suspect has {len(c_susp)}")
    params = EmbedParams(segment_length=args.l, key=b"", p_min=args.pmin, p_max=args.pmax)
    rows = []
    for i, (c, cp) in enumerate(zip(c_orig, c_susp)):
        p_hat = (c - cp) / c
        value, clamped = wm_codec.decode_rate_clamped(p_hat, params)
        rows.append({"index": i, "c": c, "c_suspect": cp, "rate": p_hat,
                     "value": value, "in_range": not clamped})
    lines = [f"{'index':>5} {'c':>5} {'c_susp':>6} {'rate':>9} {'d':>4} {'note':>6}"]
    for r in rows:
        note = "" if r["in_range"] else "clamp"
        lines.append(f"{r['index']:>5} {r['c']:>5} {r['c_suspect']:>6} "
                     f"{r['rate']:>9.6f} {r['value']:>4} {note:>6}")
    _emit(args, {"command": "inspect", "layers": rows}, "\n".join(lines))
    return 0


def cmd_attack(args) -> int:
    model = load_model(args.arch, args.weights)
    if args.type == "noise":
        attacked = pipeline.attack_noise(model, args.sigma, seed=args.seed)
    elif args.type == "zero":
        attacked = pipeline.attack_zero_weights(model, args.fraction)
    elif args.type == "finetune":
        if tuple(model.input_shape) != (1, 16, 16):
            raise NnwmError("finetune attack uses the built-in 1x16x16 synthetic dataset")
        ds = synth_dataset(args.seed, 512, 256)
        attacked = pipeline.attack_finetune(model, ds, epochs=args.epochs,
                                            lr=args.lr, seed=args.seed)
    elif args.type == "structural":
        attacked = pipeline.attack_structural(model, args.extra_rate, seed=args.seed)
    else:
        raise NnwmError(f"unknown attack type '{args.type}'")
    out_arch = f"{args.out_prefix}.json"
    out_weights = f"{args.out_prefix}.bin"
    save_model(attacked, out_arch, out_weights)
    doc = {"command": "attack", "type": args.type,
           "out_arch": out_arch, "out_weights": out_weights,
           "channel_counts": channel_counts(attacked)}
    human = f"applied {args.type}; wrote {out_arch}, {out_weights}"
    if args.expect:
        chain = argparse.Namespace(
            suspect=out_arch, receipt=args.receipt, original=args.original,
            key=args.key, n=args.n, l=args.l, pmin=args.pmin, pmax=args.pmax,
            rcov=None, criterion=args.criterion, expect=args.expect,
            theta=args.theta, json=args.json)
        _emit(args, doc, human)
        return cmd_verify(chain)
    _emit(args, doc, human)
    return 0


def cmd_train_demo(args) -> int:
    ds = synth_dataset(args.seed, 512, 256)
    model = vgg_tiny(args.seed)
    base, base_hist = finetune(model, ds, TrainConfig(
        epochs=args.epochs, lr=0.01, seed=args.seed))
    acc_base = evaluate(base, ds[1])
    rng = np.random.default_rng(args.seed)
    t = len(channel_counts(base))
    bits = "".join(rng.choice(["0", "1"], size=args.l * t))
    payload = WatermarkPayload(bits, args.l)
    params = EmbedParams(segment_length=args.l, key=_parse_key(args.key),
                         p_min=args.pmin, p_max=args.pmax)
    marked, receipt = pipeline.embed(base, payload, params, criterion=args.criterion)
    tuned, tuned_hist = finetune(marked, ds, TrainConfig(
        epochs=args.finetune_epochs, lr=0.001, seed=args.seed + 1))
    acc_marked = evaluate(tuned, ds[1])
    report = pipeline.verify(bits, pipeline.extract(receipt, tuned))
    if args.metrics_csv:
        with open(args.metrics_csv, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,test_accuracy\n")
            for e, loss, acc in base_hist + tuned_hist:
                fh.write(f"{e},{loss:.6f},{acc:.6f}\n")
    doc = {
        "command": "train-demo", "seed": args.seed, "criterion": args.criterion,
        "payload_bits": len(bits), "baseline_accuracy": acc_base,
        "marked_accuracy": acc_marked, "accuracy_delta": acc_base - acc_marked,
        "ber": report.ber, "matched": report.matched,
        "channel_counts_before": channel_counts(base),
        "channel_counts_after": channel_counts(tuned),
    }
    human = (f"baseline accuracy:   {acc_base:.4f}\n"
             f"marked accuracy:     {acc_marked:.4f} "
             f"(delta {acc_base - acc_marked:+.4f})\n"
             f"watermark: {len(bits)} bits, BER {report.ber:.4f}, "
             f"{'match' if report.matched else 'MISMATCH'}")
    _emit(args, doc, human)
    return 0


def _add_scheme_flags(p: argparse.ArgumentParser, with_rcov: bool = False) -> None:
    p.add_argument("--l", type=int, default=3, help="segment length in bits")
    p.add_argument("--pmin", type=float, default=wm_codec.DEFAULT_P_MIN)
    p.add_argument("--pmax", type=float, default=wm_codec.DEFAULT_P_MAX)
    p.add_argument("--criterion", default="l1", choices=["l1", "bn"],
                   help="importance criterion (default l1)")
    if with_rcov:
        p.add_argument("--rcov", type=float, default=None)


def _add_extract_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--original", help="manifest of the unmarked model")
    p.add_argument("--receipt", help="embedding receipt (alternative to --original)")
    p.add_argument("--suspect", required=True, help="manifest of the suspect model")
    p.add_argument("--key")
    p.add_argument("--n", type=int, help="payload length in bits")
    _add_scheme_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nnwm",
        description="Embed and verify ownership watermarks in CNN architectures "
                    "by channel pruning.")
    sub = parser.add_subparsers(dest="command", required=True)
    seed = _default_seed()

    p = sub.add_parser("embed", help="prune a payload into a model")
    p.add_argument("--arch", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--payload", required=True, help="bits, hex:<digits>, or @file")
    p.add_argument("--key", required=True)
    _add_scheme_flags(p, with_rcov=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--receipt", required=True)
    p.add_argument("--finetune-epochs", type=int, default=0)
    p.add_argument("--decoy", action="store_true",
                   help="also prune non-carrier layers at key-stream rates")
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="read the payload back from a suspect model")
    _add_extract_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("verify", help="extract and compare against expected bits")
    _add_extract_flags(p)
    p.add_argument("--expect", required=True)
    p.add_argument("--theta", type=float, default=0.0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("capacity", help="embeddable bits for a layer count")
    p.add_argument("--t", type=int)
    p.add_argument("--arch")
    p.add_argument("--l", type=int, required=True)
    p.add_argument("--rcov", type=float, required=True)
    p.set_defaults(func=cmd_capacity)

    p = sub.add_parser("inspect", help="per-layer rates or importance scores")
    p.add_argument("--original")
    p.add_argument("--suspect")
    p.add_argument("--arch")
    p.add_argument("--weights")
    p.add_argument("--scores", action="store_true")
    _add_scheme_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("attack", help="apply a removal attack, optionally verify after")
    p.add_argument("--type", required=True,
                   choices=["noise", "zero", "finetune", "structural"])
    p.add_argument("--arch", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--extra-rate", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--expect", help="chain a verify run against these bits")
    p.add_argument("--original")
    p.add_argument("--receipt")
    p.add_argument("--key")
    p.add_argument("--n", type=int)
    _add_scheme_flags(p)
    p.add_argument("--theta", type=float, default=0.0)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train-demo",
                       help="train fixture, embed, fine-tune, report accuracy delta")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--finetune-epochs", type=int, default=5)
    p.add_argument("--key", default="demo-key")
    _add_scheme_flags(p)
    p.add_argument("--metrics-csv")
    p.set_defaults(func=cmd_train_demo)

    for sp in sub.choices.values():
        sp.add_argument("--json", action="store_true",
                        help="machine-readable output")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NnwmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
