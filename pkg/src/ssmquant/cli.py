"""Command-line pipeline: init-model, gen-calib, calibrate, transform, quantize, eval,
cost-model, appendix-golden.

Exit codes: 0 success, 1 computational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fileio
from .calibration import CALIB_TAPS, CalibStats, collect_stats
from .fixtures import (APPENDIX_R, COST_INPUTS, PUBLISHED_COST, PUBLISHED_RH_DIAG,
                       exact_rh_variances, exact_trace_r)
from .model import ModelConfig, init_model
from .quant import QuantConfig
from .reporting import (SCHEME_ALIASES, build_report, cost_model, emit_report,
                        pscan_amplification, scheme_comparison, tap_profiles)
from .rotation import covariance, hadamard, klt_enhanced, rotated_channel_variances
from .tensor import spread
from .transform import SCHEMES, apply_plan, build_plan, equivalence_check, fold_norm_scales, quantize_model

PROG = "ssmquant"


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _write_json(path, doc) -> None:
    fileio.atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


# ---------------------------------------------------------------- subcommands


def cmd_init_model(a) -> int:
    cfg = ModelConfig(a.d_model, a.d_inner, a.d_state, a.d_conv, a.dt_rank, a.blocks, a.seed)
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    if not 0.0 <= a.outlier_frac < 1.0:
        raise UsageError("--outlier-frac must lie in [0, 1)")
    m = init_model(cfg, a.outlier_frac, a.outlier_gain)
    fileio.save_model(a.output, m)
    print(f"wrote {a.output} ({cfg.n_blocks} blocks, d_model={cfg.d_model})")
    return 0


def gen_calib(d_model: int, batch: int, tokens: int, seed: int, dist: str) -> np.ndarray:
    """Synthetic calibration inputs; heavytail uses Student-t(3) with per-channel
    scales spread log-uniformly over three decades."""
    rng = np.random.Generator(np.random.PCG64(seed))
    if dist == "gauss":
        return rng.standard_normal((batch, tokens, d_model))
    if dist == "heavytail":
        scales = np.exp(rng.uniform(0.0, math.log(1e3), size=d_model))
        return rng.standard_t(3.0, size=(batch, tokens, d_model)) * scales
    raise UsageError(f"unknown distribution {dist!r}")


def cmd_gen_calib(a) -> int:
    m = fileio.load_model(a.ckpt)
    data = gen_calib(m.config.d_model, a.batch, a.tokens, a.seed, a.dist)
    fileio.write_calib(a.output, data.astype(np.float32))
    print(f"wrote {a.output} ({a.batch}x{a.tokens}x{m.config.d_model}, {a.dist})")
    return 0


def cmd_calibrate(a) -> int:
    m = fileio.load_model(a.ckpt)
    data = fileio.read_calib(a.calib)
    if data.shape[2] != m.config.d_model:
        raise UsageError(f"calibration d_model {data.shape[2]} does not match model {m.config.d_model}")
    stats = collect_stats(fold_norm_scales(m), data, a.taps)
    fileio.write_checkpoint(a.output, stats.to_tensors())
    print(f"wrote {a.output} ({len(stats.keys())} tap accumulators)")
    return 0


def _extras(tensors) -> dict:
    return {k: v for k, v in tensors.items() if k.startswith("rot/")}


def cmd_transform(a) -> int:
    tensors = fileio.read_checkpoint(a.ckpt)
    m = fileio.model_from_tensors(tensors)
    stats = None
    if a.stats is not None:
        stats = CalibStats.from_tensors(fileio.read_checkpoint(a.stats))
    elif a.scheme in ("klt", "full"):
        raise UsageError(f"--scheme {a.scheme} needs --stats")
    plan = build_plan(fold_norm_scales(m), stats, a.scheme)
    out = apply_plan(m, plan)
    fileio.save_model(a.output, out, plan.rotation_tensors())
    if a.plan is not None:
        fileio.atomic_write_text(a.plan, plan.to_json() + "\n")
    print(f"wrote {a.output} (scheme {a.scheme}; {len(out.log) - len(m.log)} rewrites)")
    return 0


def cmd_quantize(a) -> int:
    tensors = fileio.read_checkpoint(a.ckpt)
    m = fileio.model_from_tensors(tensors)
    gran = {"tensor": "per-tensor", "channel": "per-channel"}[a.w_gran]
    agran = {"tensor": "per-tensor", "token": "per-token"}[a.a_gran]
    try:
        qcfg = QuantConfig(a.bits_w, a.bits_a, gran, a.a_mode, agran)
    except ValueError as e:
        raise UsageError(str(e)) from e
    calib = None
    if a.a_mode == "static":
        if a.calib is None:
            raise UsageError("--a-mode static needs --calib to fix activation ranges")
        calib = fileio.read_calib(a.calib)
    q = quantize_model(m, qcfg, calib)
    fileio.save_model(a.output, q, _extras(tensors))
    print(f"wrote {a.output} (W{a.bits_w}A{a.bits_a}, weights {gran}, activations {a.a_mode})")
    return 0


def cmd_eval(a) -> int:
    ma = fileio.load_model(a.ckpt_a)
    mb = fileio.load_model(a.ckpt_b)
    if ma.config.d_model != mb.config.d_model:
        raise UsageError("checkpoints have different d_model")
    probe = fileio.read_calib(a.probe).astype(np.float64)
    eq = equivalence_check(ma, mb, probe)
    schemes = {}
    if a.schemes:
        calib = fileio.read_calib(a.calib).astype(np.float64) if a.calib else probe
        gran = {"tensor": "per-tensor", "channel": "per-channel"}[a.w_gran]
        qcfg = QuantConfig(a.bits_w, a.bits_a, gran, "dynamic", "per-tensor")
        schemes = scheme_comparison(ma, calib, probe, qcfg, a.schemes)
    taps = tap_profiles(ma, probe, ("resid_stream", "outproj_in", "matmul_h"), transformed=mb)
    meta = {
        "ckpt_a": str(a.ckpt_a),
        "ckpt_b": str(a.ckpt_b),
        "probe": str(a.probe),
        "config": dict(zip(("d_model", "d_inner", "d_state", "d_conv", "dt_rank", "n_blocks", "seed"),
                           (int(v) for v in ma.config.as_vector()))),
        "log_b": list(mb.log),
    }
    report = build_report(meta, taps=taps, schemes=schemes, pscan=pscan_amplification(ma, probe))
    report["equivalence"] = eq
    emit_report(report, a.output, a.csv_dir)
    print(f"max_abs={eq['max_abs']:.3e} max_rel={eq['max_rel']:.3e} cosine={eq['cosine']:.9f}")
    for name, s in schemes.items():
        print(f"{name}: cosine={s['cosine']:.6f} max_rel={s['max_rel']:.3e} "
              f"gate_l1={s['weight_l1']['W_gate']:.4g}")
    if a.max_rel is not None and not eq["max_rel"] <= a.max_rel:
        print(f"{PROG} eval: max_rel {eq['max_rel']:.3e} exceeds {a.max_rel:g}", file=sys.stderr)
        return 1
    return 0


def cmd_cost_model(a) -> int:
    try:
        r = cost_model(a.d_inner, a.d_state, a.blocks, a.tokens, a.base_params, a.base_flops)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if a.json:
        print(json.dumps(r, sort_keys=True))
    else:
        print(f"param overhead: {r['param_overhead_pct']:.2f}%")
        print(f"flop overhead:  {r['flop_overhead_pct']:.2f}%")
    return 0


def appendix_golden() -> list[tuple[str, bool, str]]:
    """Run the 4x4 and cost-model fixtures; returns (name, ok, detail) rows."""
    rows = []
    h = hadamard(4).matrix
    got = rotated_channel_variances(APPENDIX_R, h)
    exact = exact_rh_variances()
    err = max(abs(g - float(e)) for g, e in zip(got, exact))
    rows.append(("rh_variances_exact", err <= 1e-12,
                 f"got {np.round(got, 4).tolist()}, exact {[str(e) for e in exact]}"))
    trace = float(exact_trace_r())
    rows.append(("rh_trace_preserved", abs(got.sum() - trace) <= 1e-12 * trace,
                 f"sum {got.sum():.12g} vs trace {trace:.12g}"))
    agree = [abs(g - p) <= 0.01 for g, p in zip(got, PUBLISHED_RH_DIAG)]
    note = ("matches published values" if all(agree) else
            "published entries " + ", ".join(f"#{i} ({p})" for i, (p, ok) in
                                             enumerate(zip(PUBLISHED_RH_DIAG, agree)) if not ok)
            + f" disagree; their sum {sum(PUBLISHED_RH_DIAG):.2f} != trace {trace:.2f}")
    rows.append(("rh_published_comparison (informational)", True, note))
    rows.append(("rh_spread_uneven", spread(got) >= 10.0, f"spread {spread(got):.3f}"))
    rot = klt_enhanced(covariance(APPENDIX_R))
    v = rotated_channel_variances(APPENDIX_R, rot.H_K)
    rows.append(("klt_equal_variances", abs(v / (trace / 4) - 1).max() <= 1e-9,
                 f"variances {np.round(v, 12).tolist()}"))
    r = cost_model(**COST_INPUTS)
    for key, want in PUBLISHED_COST.items():
        got_s = f"{r[key]:.2f}"
        rows.append((key, got_s == want, f"{got_s}% (expected {want}%)"))
    return rows


def cmd_appendix_golden(a) -> int:
    rows = appendix_golden()
    for name, ok, detail in rows:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return 0 if all(ok for _, ok, _ in rows) else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=PROG, description="Post-training quantization toolkit for a toy Mamba model.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-model", help="create a deterministic random model checkpoint")
    s.add_argument("--d-model", type=_positive_int, default=64)
    s.add_argument("--d-inner", type=_positive_int, default=128)
    s.add_argument("--d-state", type=_positive_int, default=16)
    s.add_argument("--d-conv", type=_positive_int, default=4)
    s.add_argument("--dt-rank", type=_positive_int, default=4)
    s.add_argument("--blocks", type=_nonneg_int, default=2)
    s.add_argument("--seed", type=_nonneg_int, default=0)
    s.add_argument("--outlier-frac", type=float, default=0.0)
    s.add_argument("--outlier-gain", type=float, default=1.0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_init_model)

    s = sub.add_parser("gen-calib", help="generate synthetic calibration/probe inputs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--batch", type=_positive_int, default=64)
    s.add_argument("--tokens", type=_positive_int, default=32)
    s.add_argument("--seed", type=_nonneg_int, default=0)
    s.add_argument("--dist", choices=("gauss", "heavytail"), default="gauss")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_gen_calib)

    s = sub.add_parser("calibrate", help="collect per-tap calibration statistics")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--taps", nargs="+", choices=CALIB_TAPS,
                   default=["resid_stream", "lora_mid", "outproj_in", "matmul_h"])
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("transform", help="build and apply a transform plan")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--stats")
    s.add_argument("--scheme", choices=SCHEMES, required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--plan")
    s.set_defaults(func=cmd_transform)

    s = sub.add_parser("quantize", help="fake-quantize weights and attach activation quantizers")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--bits-w", type=int, default=8)
    s.add_argument("--bits-a", type=int, default=8)
    s.add_argument("--w-gran", choices=("tensor", "channel"), default="channel")
    s.add_argument("--a-mode", choices=("static", "dynamic"), default="dynamic")
    s.add_argument("--a-gran", choices=("tensor", "token"), default="tensor")
    s.add_argument("--calib", help="calibration file (required for --a-mode static)")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("eval", help="compare two checkpoints and write a report")
    s.add_argument("--ckpt-a", required=True)
    s.add_argument("--ckpt-b", required=True)
    s.add_argument("--probe", required=True)
    s.add_argument("--calib", help="calibration file for the scheme comparison (default: probe)")
    s.add_argument("--schemes", nargs="*", choices=tuple(SCHEME_ALIASES), default=[])
    s.add_argument("--bits-w", type=int, default=8)
    s.add_argument("--bits-a", type=int, default=8)
    s.add_argument("--w-gran", choices=("tensor", "channel"), default="channel")
    s.add_argument("--max-rel", type=float, help="fail (exit 1) if max_rel exceeds this")
    s.add_argument("--csv-dir")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cost-model", help="online-transform overhead percentages")
    s.add_argument("--d-inner", type=int, default=COST_INPUTS["d_inner"])
    s.add_argument("--d-state", type=int, default=COST_INPUTS["d_state"])
    s.add_argument("--blocks", type=int, default=COST_INPUTS["n_blocks"])
    s.add_argument("--tokens", type=int, default=COST_INPUTS["n_tokens"])
    s.add_argument("--base-params", type=float, default=COST_INPUTS["base_params"])
    s.add_argument("--base-flops", type=float, default=COST_INPUTS["base_flops"])
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_cost_model)

    s = sub.add_parser("appendix-golden", help="check the built-in numeric fixtures")
    s.set_defaults(func=cmd_appendix_golden)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except UsageError as e:
        print(f"{PROG} {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, ArithmeticError, RuntimeError) as e:
        print(f"{PROG} {args.command}: error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
