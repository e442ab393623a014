"""Calibration statistics, smoothing vectors and the holdout generalisation check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .model import MambaModel, TapRecorder, model_forward
from .rotation import KltRotation, hadamard
from .tensor import QUANTILES, spread

CALIB_TAPS = ("resid_stream", "lora_mid", "outproj_in", "matmul_h", "gate_out",
              "pscan_in", "pscan_out")
SMOOTH_EPS = 1e-10
SMOOTH_CLAMP = (1e-5, 1e5)
DEFAULT_SAMPLE_CAP = 1 << 16


def tap_rows(name: str, value: np.ndarray) -> np.ndarray:
    """Flatten a recorded activation to (rows, channels) for the given tap.

    matmul_h pools tokens and inner channels into rows (channels = state);
    pscan_in/out pool tokens and state into rows (channels = inner).
    """
    base = name.split("/")[0]
    value = np.asarray(value, dtype=np.float64)
    if value.ndim == 2:
        return value
    if base == "matmul_h":
        return value.reshape(-1, value.shape[-1])
    if base in ("pscan_in", "pscan_out"):
        return np.swapaxes(value, 1, 2).reshape(-1, value.shape[1])
    return value.reshape(-1, value.shape[-1])


class MomentAccumulator:
    """Running count/mean/centred-scatter with a mergeable representation."""

    def __init__(self, channels: int, sample_cap: int = DEFAULT_SAMPLE_CAP):
        self.count = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros((channels, channels))
        self.min = np.full(channels, np.inf)
        self.max = np.full(channels, -np.inf)
        self.sample_cap = sample_cap
        self._samples: list[np.ndarray] = []
        self._n_samples = 0

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def update(self, rows) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.channels:
            raise ValueError(f"expected (n, {self.channels}) rows, got {rows.shape}")
        n = rows.shape[0]
        if n == 0:
            return
        mean_b = rows.mean(axis=0)
        centred = rows - mean_b
        other = MomentAccumulator(self.channels, 0)
        other.count, other.mean, other.m2 = n, mean_b, centred.T @ centred
        other.min, other.max = rows.min(axis=0), rows.max(axis=0)
        self.merge(other)
        room = self.sample_cap - self._n_samples
        if room > 0:
            self._samples.append(rows[:room].copy())
            self._n_samples += min(room, n)

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.count * other.count / n)
        self.mean = self.mean + delta * (other.count / n)
        self.count = n
        self.min = np.minimum(self.min, other.min)
        self.max = np.maximum(self.max, other.max)
        room = self.sample_cap - self._n_samples
        for s in other._samples:
            if room <= 0:
                break
            self._samples.append(s[:room])
            self._n_samples += min(room, s.shape[0])
            room = self.sample_cap - self._n_samples
        return self

    def covariance(self) -> np.ndarray:
        if self.count < 2:
            raise ValueError("need at least 2 samples to finalise a covariance")
        c = self.m2 / (self.count - 1)
        return 0.5 * (c + c.T)

    def variance(self) -> np.ndarray:
        return np.diag(self.covariance()).copy()

    @property
    def absmax(self) -> np.ndarray:
        return np.maximum(np.abs(self.min), np.abs(self.max))

    def samples(self) -> np.ndarray:
        if not self._samples:
            return np.zeros((0, self.channels))
        return np.concatenate(self._samples, axis=0)

    def quantiles(self) -> dict[float, np.ndarray]:
        s = self.samples()
        qs = np.quantile(s, QUANTILES, axis=0, method="linear")
        return {q: qs[i] for i, q in enumerate(QUANTILES)}

    def summary(self) -> dict:
        return {
            "count": int(self.count),
            "mean": self.mean.tolist(),
            "variance": self.variance().tolist(),
            "absmax": self.absmax.tolist(),
            "quantiles": {str(q): v.tolist() for q, v in self.quantiles().items()},
        }


@dataclass
class CalibStats:
    taps: dict[str, MomentAccumulator] = field(default_factory=dict)

    def __getitem__(self, key: str) -> MomentAccumulator:
        if key not in self.taps:
            raise KeyError(f"no calibration statistics for tap {key!r}")
        return self.taps[key]

    def __contains__(self, key: str) -> bool:
        return key in self.taps

    def keys(self):
        return sorted(self.taps)

    def add(self, key: str, rows: np.ndarray) -> None:
        if key not in self.taps:
            self.taps[key] = MomentAccumulator(rows.shape[1])
        self.taps[key].update(rows)

    def merge(self, other: "CalibStats") -> "CalibStats":
        for k, acc in other.taps.items():
            if k in self.taps:
                self.taps[k].merge(acc)
            else:
                self.taps[k] = acc
        return self

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k, acc in self.taps.items():
            out[f"calib/{k}/count"] = np.array([float(acc.count)])
            out[f"calib/{k}/mean"] = acc.mean
            out[f"calib/{k}/m2"] = acc.m2
            out[f"calib/{k}/min"] = acc.min
            out[f"calib/{k}/max"] = acc.max
            out[f"calib/{k}/samples"] = acc.samples()
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "CalibStats":
        stats = cls()
        keys = {name[len("calib/"):name.rindex("/")] for name in tensors if name.startswith("calib/")}
        for k in sorted(keys):
            mean = np.asarray(tensors[f"calib/{k}/mean"], dtype=np.float64)
            acc = MomentAccumulator(mean.shape[0])
            acc.count = int(np.asarray(tensors[f"calib/{k}/count"]).ravel()[0])
            acc.mean = mean
            acc.m2 = np.asarray(tensors[f"calib/{k}/m2"], dtype=np.float64)
            acc.min = np.asarray(tensors[f"calib/{k}/min"], dtype=np.float64)
            acc.max = np.asarray(tensors[f"calib/{k}/max"], dtype=np.float64)
            samples = np.asarray(tensors.get(f"calib/{k}/samples", np.zeros((0, acc.channels))),
                                 dtype=np.float64)
            if samples.size:
                acc._samples = [samples]
                acc._n_samples = samples.shape[0]
            stats.taps[k] = acc
        return stats


def _tap_key(name: str, block: int) -> str:
    # one shared accumulator for the residual stream; per-block elsewhere
    return name if name == "resid_stream" else f"{name}/{block}"


def collect_stats(model: MambaModel, calib_data, taps: Iterable[str] = CALIB_TAPS) -> CalibStats:
    taps = list(taps)
    unknown = [t for t in taps if t not in CALIB_TAPS]
    if unknown:
        raise ValueError(f"unknown tap(s) {unknown}; choose from {list(CALIB_TAPS)}")
    data = np.asarray(calib_data, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    if not np.all(np.isfinite(data)):
        raise ValueError("calibration data contains non-finite values")
    stats = CalibStats()
    for seq in data:
        rec = TapRecorder(taps)
        model_forward(model, seq, rec)
        for name in taps:
            for block, value in rec.records.get(name, []):
                stats.add(_tap_key(name, block), tap_rows(name, value))
    return stats


@dataclass(frozen=True)
class SmoothingVector:
    tap: str
    s: np.ndarray
    clamp: tuple[float, float] = SMOOTH_CLAMP


def smoothing_factors(stats: CalibStats, tap: str, eps: float = SMOOTH_EPS) -> SmoothingVector:
    """s_j = sqrt(var_j + eps) / geometric-mean, so that x_j / s_j has equal std.

    The eps floor leaves a relative std mismatch of about eps / (2 var_j) on
    channel j, which dominates for channels with variance near eps.
    """
    acc = stats[tap]
    if acc.count < 2:
        raise ValueError(f"tap {tap!r} has fewer than 2 samples")
    std = np.sqrt(acc.variance() + eps)
    s = std / np.exp(np.mean(np.log(std)))
    s = np.clip(s, *SMOOTH_CLAMP)
    return SmoothingVector(tap=tap, s=s)


class RangeObserver:
    """Activation hook that records per-point (min, max) and passes data through."""

    def __init__(self):
        self.ranges: dict[str, tuple[float, float]] = {}

    def __call__(self, point: str, block: int, x: np.ndarray) -> np.ndarray:
        key = f"{point}/{block}"
        lo, hi = float(np.min(x)), float(np.max(x))
        if key in self.ranges:
            plo, phi = self.ranges[key]
            lo, hi = min(lo, plo), max(hi, phi)
        self.ranges[key] = (lo, hi)
        return x


def observe_act_ranges(model: MambaModel, calib_data) -> dict[str, tuple[float, float]]:
    obs = RangeObserver()
    probe = model.copy()
    probe.act_quant = obs
    data = np.asarray(calib_data, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    for seq in data:
        model_forward(probe, seq)
    return obs.ranges


def _spreads(rows: np.ndarray) -> dict:
    var = rows.var(axis=0, ddof=1)
    amax = np.abs(rows).max(axis=0)
    return {"variance_spread": spread(var), "absmax_spread": spread(amax)}


def holdout_generalization_report(model: MambaModel, rotations: Mapping[str, KltRotation],
                                  holdout) -> dict:
    """Variance and absmax spreads on held-out data: raw, Hadamard, KLT-enhanced."""
    base_taps = sorted({k.split("/")[0] for k in rotations})
    stats = collect_stats(model, holdout, [t for t in base_taps if t in CALIB_TAPS])
    report = {}
    for key, rot in sorted(rotations.items()):
        rows = stats[key].samples()
        h = hadamard(rot.order).matrix
        report[key] = {
            "rows": int(rows.shape[0]),
            "none": _spreads(rows),
            "hadamard": _spreads(rows @ h),
            "klt_enhanced": _spreads(rows @ rot.H_K),
        }
    return report
