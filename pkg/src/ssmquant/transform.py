"""Output-preserving model rewrites and the pipeline that composes them.

Every rewrite returns a new model; the input model is never mutated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .calibration import CalibStats, SmoothingVector, collect_stats, observe_act_ranges, smoothing_factors
from .model import MambaModel, model_forward
from .quant import ActQuant, QuantConfig, quantize_weight
from .rotation import KltRotation, hadamard, hadamard_rotation, is_supported_order, klt_enhanced

PLAN_VERSION = "mq_plan_v1"
APPLY_ORDER = ("fold_norm", "offline_rotation", "smoothing", "online_hadamard")
SCHEMES = ("rtn", "hadamard", "klt", "full")
ONLINE_TAPS = ("outproj_in", "matmul_h")


class TransformError(ValueError):
    pass


def fold_norm_scales(m: MambaModel) -> MambaModel:
    """Fold every RMSNorm scale into the following projections."""
    out = m.copy()
    changed = False
    for p in out.blocks:
        if not np.all(p.norm_gamma == 1.0):
            p.W_gate = p.norm_gamma[:, None] * p.W_gate
            p.W_state = p.norm_gamma[:, None] * p.W_state
            p.norm_gamma = np.ones_like(p.norm_gamma)
            changed = True
    if not np.all(out.final_gamma == 1.0):
        g = np.diag(out.final_gamma)
        out.out_adapter = g if out.out_adapter is None else g @ out.out_adapter
        out.final_gamma = np.ones_like(out.final_gamma)
        changed = True
    if changed:
        out.log.append("fold_norm")
    return out


def _norms_folded(m: MambaModel) -> bool:
    return all(np.all(p.norm_gamma == 1.0) for p in m.blocks) and np.all(m.final_gamma == 1.0)


def _lora_blocks(m: MambaModel, tap: str) -> list[int]:
    if tap == "lora_mid":
        return list(range(len(m.blocks)))
    block = int(tap.split("/")[1])
    if not 0 <= block < len(m.blocks):
        raise TransformError(f"tap {tap!r} names a block outside the model")
    return [block]


def apply_offline_rotation(m: MambaModel, rot: KltRotation | np.ndarray, tap: str) -> MambaModel:
    """Fuse an orthogonal rotation into the weights around ``tap``.

    resid_stream: the whole residual stream is rotated; input/output adapters
    keep the end-to-end function. lora_mid[/i]: the rank-r interface between
    W_dt_down and W_dt_up of one block (or all blocks).
    """
    r = np.asarray(rot.H_K if isinstance(rot, KltRotation) else rot, dtype=np.float64)
    out = m.copy()
    if tap == "resid_stream":
        if not _norms_folded(m):
            raise TransformError("fold norm scales before rotating the residual stream")
        if r.shape != (m.config.d_model, m.config.d_model):
            raise TransformError(f"rotation order {r.shape[0]} does not match d_model={m.config.d_model}")
        out.in_adapter = r.copy() if out.in_adapter is None else out.in_adapter @ r
        out.out_adapter = r.T.copy() if out.out_adapter is None else r.T @ out.out_adapter
        for p in out.blocks:
            p.W_gate = r.T @ p.W_gate
            p.W_state = r.T @ p.W_state
            p.W_out = p.W_out @ r
    elif tap.split("/")[0] == "lora_mid":
        if r.shape != (m.config.dt_rank, m.config.dt_rank):
            raise TransformError(f"rotation order {r.shape[0]} does not match dt_rank={m.config.dt_rank}")
        for i in _lora_blocks(m, tap):
            p = out.blocks[i]
            p.W_dt_down = p.W_dt_down @ r
            p.W_dt_up = r.T @ p.W_dt_up
    else:
        raise TransformError(f"no offline rotation defined for tap {tap!r}")
    out.log.append(f"offline_rotation:{tap}")
    return out


def _check_smoothing(s, n: int) -> np.ndarray:
    s = np.asarray(s.s if isinstance(s, SmoothingVector) else s, dtype=np.float64)
    if s.shape != (n,):
        raise TransformError(f"smoothing vector must have length {n}, got {s.shape}")
    if not np.all(s > 0) or not np.all(np.isfinite(s)):
        raise TransformError("smoothing vector must be finite and strictly positive")
    return s


def _blocks_for(m: MambaModel, block: Optional[int]) -> list[int]:
    return list(range(len(m.blocks))) if block is None else [block]


def apply_smooth_outproj(m: MambaModel, s, block: Optional[int] = None) -> MambaModel:
    """W_gate columns / s, W_out rows * s, gate activation becomes S-SiLU(., s)."""
    s = _check_smoothing(s, m.config.d_inner)
    out = m.copy()
    for i in _blocks_for(m, block):
        p = out.blocks[i]
        if p.had_out:
            raise TransformError("smoothing must be fused before the online Hadamard")
        p.W_gate = p.W_gate / s
        p.W_out = s[:, None] * p.W_out
        p.s_out = s.copy() if p.s_out is None else p.s_out * s
        out.log.append(f"smooth:outproj_in/{i}")
    return out


def apply_smooth_matmul(m: MambaModel, s, block: Optional[int] = None) -> MambaModel:
    """Divide the hidden state by s: W_B / s, W_C * s, and -ln(s) on the t=1 exponent."""
    s = _check_smoothing(s, m.config.d_state)
    out = m.copy()
    for i in _blocks_for(m, block):
        p = out.blocks[i]
        if p.had_h:
            raise TransformError("smoothing must be fused before the online Hadamard")
        p.W_B = p.W_B / s
        p.W_C = p.W_C * s
        shift = -np.log(s)
        p.dt1_shift = shift if p.dt1_shift is None else p.dt1_shift + shift
        out.log.append(f"smooth:matmul_h/{i}")
    return out


def attach_online_hadamard(m: MambaModel, taps: Iterable[str]) -> MambaModel:
    taps = list(taps)
    out = m.copy()
    for tap in taps:
        if tap == "outproj_in":
            h = hadamard(m.config.d_inner).matrix
            for p in out.blocks:
                if p.had_out:
                    raise TransformError("online Hadamard already attached at outproj_in")
                p.had_out = True
                p.W_out = h.T @ p.W_out
        elif tap == "matmul_h":
            h = hadamard(m.config.d_state).matrix
            for p in out.blocks:
                if p.had_h:
                    raise TransformError("online Hadamard already attached at matmul_h")
                p.had_h = True
                p.W_C = p.W_C @ h
        else:
            raise TransformError(f"no online Hadamard defined for tap {tap!r}")
        out.log.append(f"online_hadamard:{tap}")
    return out


@dataclass
class TransformPlan:
    scheme: str
    fold_norm: bool = True
    offline_rotations: dict[str, KltRotation] = field(default_factory=dict)
    smoothings: dict[str, SmoothingVector] = field(default_factory=dict)
    online_hadamard: tuple[str, ...] = ()

    def to_json(self) -> str:
        doc = {
            "version": PLAN_VERSION,
            "scheme": self.scheme,
            "order": list(APPLY_ORDER),
            "fold_norm": self.fold_norm,
            "offline_rotations": {
                tap: {
                    "order": int(rot.order),
                    "kind": rot.meta.get("kind", "klt_enhanced"),
                    "K": f"rot/{tap}/K",
                    "H_K": f"rot/{tap}/H_K",
                    "eigenvalues": [float(v) for v in rot.eigenvalues],
                }
                for tap, rot in sorted(self.offline_rotations.items())
            },
            "smoothings": {tap: [float(v) for v in sv.s] for tap, sv in sorted(self.smoothings.items())},
            "online_hadamard": list(self.online_hadamard),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def rotation_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for tap, rot in self.offline_rotations.items():
            out[f"rot/{tap}/K"] = rot.K
            out[f"rot/{tap}/H_K"] = rot.H_K
        return out

    @classmethod
    def from_json(cls, text: str, tensors: dict[str, np.ndarray]) -> "TransformPlan":
        doc = json.loads(text)
        if doc.get("version") != PLAN_VERSION:
            raise TransformError(f"unsupported plan version {doc.get('version')!r}")
        rots = {}
        for tap, entry in doc["offline_rotations"].items():
            K = np.asarray(tensors[entry["K"]], dtype=np.float64)
            HK = np.asarray(tensors[entry["H_K"]], dtype=np.float64)
            rots[tap] = KltRotation(K=K, H=np.array(hadamard(entry["order"]).matrix), H_K=HK,
                                    eigenvalues=np.asarray(entry["eigenvalues"]), tap=tap,
                                    meta={"kind": entry.get("kind", "klt_enhanced")})
        smooth = {tap: SmoothingVector(tap, np.asarray(v, dtype=np.float64))
                  for tap, v in doc["smoothings"].items()}
        return cls(scheme=doc["scheme"], fold_norm=doc["fold_norm"], offline_rotations=rots,
                   smoothings=smooth, online_hadamard=tuple(doc["online_hadamard"]))


def build_plan(model: MambaModel, stats: Optional[CalibStats], scheme: str) -> TransformPlan:
    """Plan for one of the schemes rtn | hadamard | klt | full.

    ``stats`` must come from the norm-folded model (only needed for klt/full).
    """
    if scheme not in SCHEMES:
        raise TransformError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    cfg = model.config
    if scheme == "rtn":
        return TransformPlan(scheme=scheme, fold_norm=False)
    if not is_supported_order(cfg.dt_rank):
        raise TransformError(f"dt_rank={cfg.dt_rank} has no Hadamard matrix; lora_mid rotation unavailable")
    plan = TransformPlan(scheme=scheme, online_hadamard=ONLINE_TAPS)
    if scheme == "hadamard":
        plan.offline_rotations["resid_stream"] = hadamard_rotation(cfg.d_model, "resid_stream")
        for i in range(cfg.n_blocks):
            plan.offline_rotations[f"lora_mid/{i}"] = hadamard_rotation(cfg.dt_rank, f"lora_mid/{i}")
        return plan
    if stats is None:
        raise TransformError(f"scheme {scheme!r} needs calibration statistics")
    plan.offline_rotations["resid_stream"] = klt_enhanced(stats["resid_stream"].covariance(), "resid_stream")
    for i in range(cfg.n_blocks):
        key = f"lora_mid/{i}"
        plan.offline_rotations[key] = klt_enhanced(stats[key].covariance(), key)
    if scheme == "full":
        for i in range(cfg.n_blocks):
            for tap in ("outproj_in", "matmul_h"):
                key = f"{tap}/{i}"
                plan.smoothings[key] = smoothing_factors(stats, key)
    return plan


def apply_plan(model: MambaModel, plan: TransformPlan) -> MambaModel:
    """Apply in the fixed order fold-norm, offline rotations, smoothing, online Hadamard."""
    m = model
    if plan.fold_norm:
        m = fold_norm_scales(m)
    for tap, rot in sorted(plan.offline_rotations.items()):
        m = apply_offline_rotation(m, rot, tap)
    for tap, sv in sorted(plan.smoothings.items()):
        base, block = tap.split("/")
        if base == "outproj_in":
            m = apply_smooth_outproj(m, sv, int(block))
        elif base == "matmul_h":
            m = apply_smooth_matmul(m, sv, int(block))
        else:
            raise TransformError(f"no smoothing defined for tap {tap!r}")
    if plan.online_hadamard:
        m = attach_online_hadamard(m, plan.online_hadamard)
    m.log.append(f"plan:{plan.scheme}")
    return m


def transform_model(model: MambaModel, calib_data, scheme: str) -> tuple[MambaModel, TransformPlan]:
    folded = fold_norm_scales(model)
    stats = None
    if scheme in ("klt", "full"):
        stats = collect_stats(folded, calib_data, ("resid_stream", "lora_mid", "outproj_in", "matmul_h"))
    plan = build_plan(folded, stats, scheme)
    return apply_plan(model, plan), plan


def quantize_model(m: MambaModel, qcfg: QuantConfig, calib_data=None) -> MambaModel:
    """Fake-quantize all projection weights and attach activation quantization.

    Static activation mode needs ``calib_data`` to fix per-point ranges.
    """
    out = m.copy()
    for p in out.blocks:
        for name in p.LINEAR:
            setattr(p, name, quantize_weight(getattr(p, name), qcfg.bits_w, qcfg.w_granularity,
                                             qcfg.clip_quantile))
    ranges = None
    if qcfg.a_mode == "static":
        if calib_data is None:
            raise TransformError("static activation quantization needs calibration data")
        ranges = observe_act_ranges(out, calib_data)
    out.act_quant = ActQuant(bits=qcfg.bits_a, mode=qcfg.a_mode, granularity=qcfg.a_granularity,
                             ranges=ranges)
    out.log.append(f"quantize:W{qcfg.bits_w}A{qcfg.bits_a}:{qcfg.w_granularity}:{qcfg.a_mode}")
    return out


def equivalence_check(a: MambaModel, b: MambaModel, probe, **kw) -> dict:
    """Run both models on ``probe``; max_rel is max|a-b| / max|a|."""
    if a.config.d_model != b.config.d_model:
        raise ValueError("models have different interface widths")
    probe = np.asarray(probe, dtype=np.float64)
    seqs = probe[None] if probe.ndim == 2 else probe
    ya = np.stack([model_forward(a, s, **kw) for s in seqs])
    yb = np.stack([model_forward(b, s, **kw) for s in seqs])
    return compare_outputs(ya, yb)


def compare_outputs(ya, yb) -> dict:
    ya = np.asarray(ya, dtype=np.float64)
    yb = np.asarray(yb, dtype=np.float64)
    if ya.shape != yb.shape:
        raise ValueError(f"output shapes differ: {ya.shape} vs {yb.shape}")
    diff = np.abs(ya - yb)
    ref = float(np.abs(ya).max()) if ya.size else 0.0
    max_abs = float(diff.max()) if diff.size else 0.0
    na, nb = np.linalg.norm(ya), np.linalg.norm(yb)
    cos = float(np.dot(ya.ravel(), yb.ravel()) / (na * nb)) if na > 0 and nb > 0 else float(na == nb)
    return {"max_abs": max_abs, "max_rel": max_abs / ref if ref > 0 else max_abs, "cosine": cos}
