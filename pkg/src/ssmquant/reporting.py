"""Analysis reports: channel profiles, scheme comparison, scan amplification, cost model.

Reports are plain nested dicts with a fixed JSON schema (``mq_report_v1``).
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import jsonschema
import numpy as np

from .calibration import CalibStats, collect_stats, tap_rows
from .fileio import atomic_write_text
from .model import QUANT_POINTS, MambaModel, TapRecorder, model_forward
from .quant import ActQuant, QuantConfig, quant_error_report, quantize_weight
from .tensor import QUANTILES, channel_stats, spread
from .transform import (apply_plan, build_plan, compare_outputs, fold_norm_scales,
                        quantize_model)

REPORT_VERSION = "mq_report_v1"

# report-facing scheme names -> transform plan schemes
SCHEME_ALIASES = {
    "rtn": "rtn",
    "hadamard_only": "hadamard",
    "klt_enhanced": "klt",
    "klt_plus_smooth_fused": "full",
}

CAVEATS = (
    "Dataset accuracies are not reproducible on the toy model; output cosine and "
    "max_rel against the full-precision model stand in for them.",
    "Scheme orderings are fixed-seed regression measurements, not universal claims.",
)

_NUM = {"type": "number"}
_NUM_OR_NULL = {"type": ["number", "null"]}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "meta", "taps", "schemes", "cost_model", "pscan"],
    "properties": {
        "version": {"const": REPORT_VERSION},
        "meta": {
            "type": "object",
            "required": ["caveats"],
            "properties": {"caveats": {"type": "array", "items": {"type": "string"}}},
        },
        "taps": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["pre"],
                "properties": {
                    "pre": {"$ref": "#/$defs/profile"},
                    "post": {"$ref": "#/$defs/profile"},
                },
            },
        },
        "schemes": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["cosine", "max_rel", "weight_l1", "act_l1"],
                "properties": {
                    "cosine": _NUM,
                    "max_rel": _NUM,
                    "weight_l1": {"type": "object", "additionalProperties": _NUM},
                    "act_l1": {"type": "object", "additionalProperties": _NUM},
                },
            },
        },
        "cost_model": {
            "type": "object",
            "properties": {"param_overhead_pct": _NUM, "flop_overhead_pct": _NUM},
        },
        "pscan": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["spread_in", "spread_out", "ratio", "amplified"],
                "properties": {
                    "spread_in": _NUM_OR_NULL,
                    "spread_out": _NUM_OR_NULL,
                    "ratio": _NUM_OR_NULL,
                    "amplified": {"type": "boolean"},
                },
            },
        },
    },
    "$defs": {
        "profile": {
            "type": "object",
            "required": ["channels", "variance_spread", "absmax_spread", "variance", "absmax"],
            "properties": {
                "channels": {"type": "integer"},
                "variance_spread": _NUM_OR_NULL,
                "absmax_spread": _NUM_OR_NULL,
                "variance": {"type": "array", "items": _NUM},
                "absmax": {"type": "array", "items": _NUM},
            },
        }
    },
}


class ReportError(ValueError):
    pass


def _finite_or_none(v: float) -> Optional[float]:
    v = float(v)
    return v if math.isfinite(v) else None


def channel_profile(rows, top_k: int = 5) -> dict:
    """Per-channel statistics of a (rows, channels) matrix plus a top-k table."""
    st = channel_stats(rows)
    order = np.argsort(-st.absmax, kind="stable")[:top_k]
    return {
        "channels": int(st.mean.shape[0]),
        "variance_spread": _finite_or_none(spread(st.variance)),
        "absmax_spread": _finite_or_none(spread(st.absmax)),
        "mean": st.mean.tolist(),
        "variance": st.variance.tolist(),
        "absmax": st.absmax.tolist(),
        "quantiles": {f"{q:g}": st.quantiles[q].tolist() for q in QUANTILES},
        "top_k": [
            {"channel": int(j), "absmax": float(st.absmax[j]), "variance": float(st.variance[j])}
            for j in order
        ],
    }


def tap_profiles(model: MambaModel, data, taps: Iterable[str],
                 transformed: Optional[MambaModel] = None, top_k: int = 5) -> dict:
    """Channel profiles per tap key, before and (optionally) after a transform."""
    taps = list(taps)
    pre = collect_stats(model, data, taps)
    post = collect_stats(transformed, data, taps) if transformed is not None else None
    out = {}
    for key in pre.keys():
        entry = {"pre": channel_profile(pre[key].samples(), top_k)}
        if post is not None and key in post:
            entry["post"] = channel_profile(post[key].samples(), top_k)
        out[key] = entry
    return out


def gate_weight_analysis(model: MambaModel, bits: int, granularity: str = "per-tensor",
                         n_bins: int = 32) -> dict:
    """Quantile points and quantization-loss histogram of every block's W_gate."""
    out = {}
    for i, p in enumerate(model.blocks):
        w = p.W_gate
        rep = quant_error_report(w, quantize_weight(w, bits, granularity), n_bins)
        out[str(i)] = {
            "quantiles": {f"{q:g}": float(v) for q, v in zip(QUANTILES, np.quantile(w, QUANTILES))},
            "absmax": float(np.abs(w).max()),
            "l1_total": rep.l1_total,
            "histogram": rep.to_dict()["histogram"],
            "bin_edges": rep.to_dict()["bin_edges"],
        }
    return out


class _L1Meter:
    """Wraps an activation quantizer and totals |x - q(x)| per quantization point."""

    def __init__(self, inner):
        self.inner = inner
        self.l1: dict[str, float] = {}

    def __call__(self, point: str, block: int, x: np.ndarray) -> np.ndarray:
        xq = self.inner(point, block, x)
        self.l1[point] = self.l1.get(point, 0.0) + float(np.abs(x - xq).sum())
        return xq


def _weight_l1(transformed: MambaModel, qcfg: QuantConfig) -> dict[str, float]:
    out = {}
    for name in transformed.blocks[0].LINEAR if transformed.blocks else ():
        total = 0.0
        for p in transformed.blocks:
            w = getattr(p, name)
            total += float(np.abs(w - quantize_weight(w, qcfg.bits_w, qcfg.w_granularity,
                                                     qcfg.clip_quantile)).sum())
        out[name] = total
    return out


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def scheme_comparison(model: MambaModel, calib, probe, qcfg: QuantConfig,
                      schemes: Sequence[str] = tuple(SCHEME_ALIASES)) -> dict:
    """Transform, fake-quantize and probe each scheme against the FP model.

    ``weight_l1`` totals are over all blocks, keyed by weight name (W_gate is
    the gate-weight tap); ``act_l1`` totals are per quantization point.
    """
    bad = [s for s in schemes if s not in SCHEME_ALIASES]
    if bad:
        raise ReportError(f"unknown scheme(s) {bad}; choose from {list(SCHEME_ALIASES)}")
    calib = _as_batch(calib)
    probe = _as_batch(probe)
    y_fp = np.stack([model_forward(model, s) for s in probe])
    folded = fold_norm_scales(model)
    need_stats = any(SCHEME_ALIASES[s] in ("klt", "full") for s in schemes)
    stats = (collect_stats(folded, calib, ("resid_stream", "lora_mid", "outproj_in", "matmul_h"))
             if need_stats else None)
    out = {}
    for name in schemes:
        plan = build_plan(folded, stats, SCHEME_ALIASES[name])
        transformed = apply_plan(model, plan)
        quantized = quantize_model(transformed, qcfg, calib if qcfg.a_mode == "static" else None)
        meter = _L1Meter(quantized.act_quant)
        quantized.act_quant = meter
        y_q = np.stack([model_forward(quantized, s) for s in probe])
        cmp = compare_outputs(y_fp, y_q)
        out[name] = {
            "plan_scheme": plan.scheme,
            "cosine": cmp["cosine"],
            "max_rel": cmp["max_rel"],
            "weight_l1": _weight_l1(transformed, qcfg),
            "act_l1": {p: meter.l1.get(p, 0.0) for p in QUANT_POINTS},
            "gate_weight": gate_weight_analysis(transformed, qcfg.bits_w, qcfg.w_granularity),
        }
    return out


def cost_model(d_inner: int, d_state: int, n_blocks: int, n_tokens: int,
               base_params: float, base_flops: float) -> dict:
    """Parameter and FLOP overhead (in percent) of the online Hadamard transforms."""
    if base_params <= 0 or base_flops <= 0:
        raise ReportError("base_params and base_flops must be positive (zero denominator)")
    for name, v in (("d_inner", d_inner), ("d_state", d_state), ("n_tokens", n_tokens)):
        if v <= 0:
            raise ReportError(f"{name} must be positive, got {v}")
    if n_blocks < 0:
        raise ReportError(f"n_blocks must be >= 0, got {n_blocks}")
    params = (d_inner + d_state) * n_blocks
    flops = (n_tokens * d_inner * d_state * math.log2(d_state)
             + n_tokens * d_inner * math.log2(d_inner)) * n_blocks
    return {
        "param_overhead_pct": 100.0 * params / base_params,
        "flop_overhead_pct": 100.0 * flops / base_flops,
    }


def pscan_amplification(model: MambaModel, probe) -> dict:
    """Per-block ratio of channel-variance spread after vs before the scan."""
    rec = TapRecorder(["pscan_in", "pscan_out"])
    for seq in _as_batch(probe):
        model_forward(model, seq, rec)
    out = {}
    for i in range(len(model.blocks)):
        x_in = np.concatenate([tap_rows("pscan_in", v) for v in rec.get("pscan_in", i)])
        x_out = np.concatenate([tap_rows("pscan_out", v) for v in rec.get("pscan_out", i)])
        s_in = spread(x_in.var(axis=0, ddof=1))
        s_out = spread(x_out.var(axis=0, ddof=1))
        ratio = s_out / s_in if math.isfinite(s_in) and math.isfinite(s_out) else float("nan")
        out[str(i)] = {
            "spread_in": _finite_or_none(s_in),
            "spread_out": _finite_or_none(s_out),
            "ratio": _finite_or_none(ratio),
            "amplified": bool(math.isfinite(ratio) and ratio > 1.0),
        }
    return out


def build_report(meta: Mapping, taps: Mapping | None = None, schemes: Mapping | None = None,
                 cost: Mapping | None = None, pscan: Mapping | None = None) -> dict:
    m = dict(meta)
    m.setdefault("caveats", list(CAVEATS))
    return {
        "version": REPORT_VERSION,
        "meta": m,
        "taps": dict(taps or {}),
        "schemes": dict(schemes or {}),
        "cost_model": dict(cost or {}),
        "pscan": dict(pscan or {}),
    }


def _check_finite(obj, path="report"):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ReportError(f"non-finite number at {path}")
    elif isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")


def validate_report(report: Mapping) -> None:
    _check_finite(report)
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ReportError(f"report does not match {REPORT_VERSION}: {e.message}") from e


def dumps_report(report: Mapping) -> str:
    # float repr is the shortest string that parses back to the same double
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _scheme_rows(report: Mapping) -> list[dict]:
    rows = []
    for name, s in sorted(report.get("schemes", {}).items()):
        row = {"scheme": name, "cosine": s["cosine"], "max_rel": s["max_rel"]}
        row.update({f"w_l1:{k}": v for k, v in sorted(s["weight_l1"].items())})
        row.update({f"a_l1:{k}": v for k, v in sorted(s["act_l1"].items())})
        rows.append(row)
    return rows


def _tap_rows(report: Mapping) -> list[dict]:
    rows = []
    for key, entry in sorted(report.get("taps", {}).items()):
        for stage in ("pre", "post"):
            prof = entry.get(stage)
            if prof is None:
                continue
            for j, (v, a) in enumerate(zip(prof["variance"], prof["absmax"])):
                rows.append({"tap": key, "stage": stage, "channel": j, "variance": v, "absmax": a})
    return rows


def _pscan_rows(report: Mapping) -> list[dict]:
    return [{"block": b, **v} for b, v in sorted(report.get("pscan", {}).items(), key=lambda t: int(t[0]))]


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    fields = list(rows[0])
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def emit_report(report: Mapping, path, csv_dir=None) -> Path:
    """Validate and write the report as JSON; optionally one CSV per section."""
    validate_report(report)
    path = Path(path)
    try:
        atomic_write_text(path, dumps_report(report))
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e}") from e
    if csv_dir is not None:
        csv_dir = Path(csv_dir)
        if not csv_dir.is_dir():
            raise FileNotFoundError(f"{csv_dir}: CSV directory does not exist")
        stem = path.stem
        _write_csv(csv_dir / f"{stem}_schemes.csv", _scheme_rows(report))
        _write_csv(csv_dir / f"{stem}_taps.csv", _tap_rows(report))
        _write_csv(csv_dir / f"{stem}_pscan.csv", _pscan_rows(report))
    return path


def read_report(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read report {path}: {e}") from e
    report = json.loads(text)
    validate_report(report)
    return report
