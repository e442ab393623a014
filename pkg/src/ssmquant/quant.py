"""Uniform affine (min/max) fake quantization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

Granularity = Literal["per-tensor", "per-channel", "per-token"]
GRANULARITIES = ("per-tensor", "per-channel", "per-token")


@dataclass(frozen=True)
class QuantConfig:
    bits_w: int = 8
    bits_a: int = 8
    w_granularity: Granularity = "per-channel"
    a_mode: Literal["static", "dynamic"] = "dynamic"
    a_granularity: Granularity = "per-tensor"
    clip_quantile: float = 1.0

    def __post_init__(self):
        for name in ("bits_w", "bits_a"):
            b = getattr(self, name)
            if not 2 <= b <= 16:
                raise ValueError(f"{name} must be in [2, 16], got {b}")
        if self.w_granularity not in ("per-tensor", "per-channel"):
            raise ValueError(f"bad weight granularity {self.w_granularity!r}")
        if self.a_granularity not in ("per-tensor", "per-token"):
            raise ValueError(f"bad activation granularity {self.a_granularity!r}")
        if self.a_mode not in ("static", "dynamic"):
            raise ValueError(f"bad activation mode {self.a_mode!r}")
        if self.a_mode == "static" and self.a_granularity != "per-tensor":
            raise ValueError("static activation quantization is per-tensor only")
        if not 0.5 < self.clip_quantile <= 1.0:
            raise ValueError("clip_quantile must lie in (0.5, 1]")


@dataclass(frozen=True)
class QuantParams:
    """Scale and (unrounded) zero point, shaped to broadcast against the tensor."""

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    granularity: str

    @property
    def qmax(self) -> int:
        return 2 ** self.bits - 1


def _reduce_axes(x: np.ndarray, granularity: str) -> Optional[tuple[int, ...]]:
    if granularity == "per-tensor":
        return None
    if granularity == "per-channel":
        # one group per entry of the last axis
        return tuple(range(x.ndim - 1))
    if granularity == "per-token":
        return (x.ndim - 1,)
    raise ValueError(f"unknown granularity {granularity!r}")


def qparams_from_range(lo, hi, bits: int, granularity: str = "per-tensor") -> QuantParams:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi < lo):
        raise ValueError("max below min in quantization range")
    qmax = 2 ** bits - 1
    degenerate = hi == lo
    scale = np.where(degenerate, 1.0, (hi - lo) / qmax)
    zero = np.where(degenerate, -lo, -lo / scale)
    return QuantParams(scale=scale, zero_point=zero, bits=bits, granularity=granularity)


def calc_qparams(x, bits: int, granularity: str = "per-tensor",
                 clip_quantile: float = 1.0) -> QuantParams:
    """s = (max - min)/(2^b - 1), z = -min/s per group."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    axes = _reduce_axes(x, granularity)
    if clip_quantile < 1.0:
        lo = np.quantile(x, 1.0 - clip_quantile, axis=axes, keepdims=True)
        hi = np.quantile(x, clip_quantile, axis=axes, keepdims=True)
    else:
        lo = x.min(axis=axes, keepdims=True)
        hi = x.max(axis=axes, keepdims=True)
    return qparams_from_range(lo, hi, bits, granularity)


def fake_quant(x, qp: QuantParams) -> np.ndarray:
    """(clamp(round(x/s) + z, 0, 2^b - 1) - z) * s, rounding half to even."""
    x = np.asarray(x, dtype=np.float64)
    q = np.clip(np.rint(x / qp.scale) + qp.zero_point, 0, qp.qmax)
    return (q - qp.zero_point) * qp.scale


def dynamic_fake_quant(x, bits: int, granularity: str = "per-tensor") -> np.ndarray:
    return fake_quant(x, calc_qparams(x, bits, granularity))


def quantize_weight(w, bits: int, granularity: str = "per-channel",
                    clip_quantile: float = 1.0) -> np.ndarray:
    return fake_quant(w, calc_qparams(w, bits, granularity, clip_quantile))


@dataclass(frozen=True)
class QuantErrorReport:
    l1_total: float
    l1_mean: float
    max_err: float
    histogram: np.ndarray
    bin_edges: np.ndarray

    def to_dict(self) -> dict:
        return {
            "l1_total": self.l1_total,
            "l1_mean": self.l1_mean,
            "max_err": self.max_err,
            "histogram": [int(c) for c in self.histogram],
            "bin_edges": [float(e) for e in self.bin_edges],
        }


def quant_error_report(x, x_hat, n_bins: int = 32) -> QuantErrorReport:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    err = np.abs(x - x_hat).ravel()
    max_err = float(err.max()) if err.size else 0.0
    edges = np.linspace(0.0, max_err, n_bins + 1) if max_err > 0 else np.zeros(n_bins + 1)
    if max_err > 0:
        hist, _ = np.histogram(err, bins=edges)
    else:
        hist = np.zeros(n_bins, dtype=np.int64)
        hist[0] = err.size
    return QuantErrorReport(
        l1_total=float(err.sum()),
        l1_mean=float(err.mean()) if err.size else 0.0,
        max_err=max_err,
        histogram=hist,
        bin_edges=edges,
    )


@dataclass(frozen=True)
class ActQuant:
    """Runtime activation fake-quantizer, called at each quantization point.

    Static mode reads calibrated (min, max) ranges keyed ``"<point>/<block>"``;
    dynamic mode derives them from the live tensor.
    """

    bits: int
    mode: str = "dynamic"
    granularity: str = "per-tensor"
    ranges: dict = None

    def __call__(self, point: str, block: int, x: np.ndarray) -> np.ndarray:
        if self.mode == "dynamic":
            if self.granularity == "per-token":
                flat = x.reshape(x.shape[0], -1)
                return dynamic_fake_quant(flat, self.bits, "per-token").reshape(x.shape)
            return dynamic_fake_quant(x, self.bits, "per-tensor")
        key = f"{point}/{block}"
        if not self.ranges or key not in self.ranges:
            raise KeyError(f"no static activation range for {key}")
        lo, hi = self.ranges[key]
        return fake_quant(x, qparams_from_range(lo, hi, self.bits))
