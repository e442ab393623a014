"""Toy-scale selective state-space (Mamba) stack.

Row-vector convention throughout: activations are (tokens, channels) and a
projection is ``x @ W`` with ``W`` shaped (in, out).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .rotation import fwht_apply, is_supported_order

RMS_EPS = 1e-6

BLOCK_TAPS = (
    "resid_stream", "lora_mid", "gate_out", "ssm_out", "outproj_in",
    "matmul_h", "matmul_C", "pscan_in", "pscan_out",
)

# activation quantization points (inputs of the matmuls)
QUANT_POINTS = ("proj_in", "x_proj_in", "lora_mid", "outproj_in", "matmul_h", "matmul_C")


def silu(x):
    return x * sigmoid(x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def s_silu(x, s):
    """x * sigmoid(s * x)."""
    return x * sigmoid(s * x)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.array(x, copy=True)
    small = x <= 30.0
    out[small] = np.log1p(np.exp(x[small]))
    return out


def rms_normalize(x):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)


def rmsnorm(x, gamma):
    return rms_normalize(x) * gamma


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_inner: int = 128
    d_state: int = 16
    d_conv: int = 4
    dt_rank: int = 4
    n_blocks: int = 2
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("d_model", "d_inner", "d_state", "d_conv", "dt_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        for name in ("d_model", "d_inner"):
            if not is_supported_order(getattr(self, name)):
                raise ValueError(f"{name}={getattr(self, name)} must factor as 2^k*b, b in {{1,12,20}}")
        if self.d_state & (self.d_state - 1):
            raise ValueError(f"d_state={self.d_state} must be a power of two")
        return self

    def as_vector(self) -> np.ndarray:
        return np.array([self.d_model, self.d_inner, self.d_state, self.d_conv,
                         self.dt_rank, self.n_blocks, self.seed], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "ModelConfig":
        return cls(*(int(round(float(t))) for t in v))


@dataclass
class MambaBlockParams:
    norm_gamma: np.ndarray  # (d_model,)
    W_gate: np.ndarray  # (d_model, d_inner)
    W_state: np.ndarray  # (d_model, d_inner)
    conv_weight: np.ndarray  # (d_inner, d_conv)
    conv_bias: np.ndarray  # (d_inner,)
    W_dt_down: np.ndarray  # (d_inner, dt_rank)
    W_dt_up: np.ndarray  # (dt_rank, d_inner)
    dt_bias: np.ndarray  # (d_inner,)
    W_B: np.ndarray  # (d_inner, d_state)
    W_C: np.ndarray  # (d_inner, d_state)
    A: np.ndarray  # (d_inner, d_state), negative
    D: np.ndarray  # (d_inner,)
    W_out: np.ndarray  # (d_inner, d_model)
    # runtime hooks installed by transforms
    s_out: Optional[np.ndarray] = None  # S-SiLU smoothing vector
    dt1_shift: Optional[np.ndarray] = None  # -ln(s_mm), added to the t=1 exponent
    had_out: bool = False  # online Hadamard before W_out
    had_h: bool = False  # online Hadamard on h before the C contraction

    WEIGHTS = ("norm_gamma", "W_gate", "W_state", "conv_weight", "conv_bias", "W_dt_down",
               "W_dt_up", "dt_bias", "W_B", "W_C", "A", "D", "W_out")
    LINEAR = ("W_gate", "W_state", "W_dt_down", "W_dt_up", "W_B", "W_C", "W_out")

    def copy(self) -> "MambaBlockParams":
        kw = {k: np.array(getattr(self, k), copy=True) for k in self.WEIGHTS}
        for k in ("s_out", "dt1_shift"):
            v = getattr(self, k)
            kw[k] = None if v is None else np.array(v, copy=True)
        return replace(self, **kw)


@dataclass
class MambaModel:
    config: ModelConfig
    blocks: list[MambaBlockParams]
    final_gamma: np.ndarray
    in_adapter: Optional[np.ndarray] = None  # applied to the model input
    out_adapter: Optional[np.ndarray] = None  # applied after the final norm
    act_quant: Optional[object] = None  # quant.ActQuant
    log: list[str] = field(default_factory=list)

    def copy(self) -> "MambaModel":
        return MambaModel(
            config=self.config,
            blocks=[b.copy() for b in self.blocks],
            final_gamma=np.array(self.final_gamma, copy=True),
            in_adapter=None if self.in_adapter is None else np.array(self.in_adapter, copy=True),
            out_adapter=None if self.out_adapter is None else np.array(self.out_adapter, copy=True),
            act_quant=self.act_quant,
            log=list(self.log),
        )


def init_model(cfg: ModelConfig, outlier_frac: float = 0.0, outlier_gain: float = 1.0) -> MambaModel:
    """Deterministic initialisation from ``cfg.seed`` (numpy PCG64 stream).

    Weights are uniform in +/- 1/sqrt(fan_in); A = -exp(u), u ~ U(0, ln 16).
    ``outlier_frac`` > 0 picks that fraction of inner channels and multiplies
    the matching W_gate columns and W_out rows by ``outlier_gain``.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    dm, di, ds, dc, dr = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.d_conv, cfg.dt_rank

    def unif(shape, fan_in):
        b = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    blocks = []
    for _ in range(cfg.n_blocks):
        p = MambaBlockParams(
            norm_gamma=np.ones(dm),
            W_gate=unif((dm, di), dm),
            W_state=unif((dm, di), dm),
            conv_weight=unif((di, dc), dc),
            conv_bias=unif((di,), dc),
            W_dt_down=unif((di, dr), di),
            W_dt_up=unif((dr, di), dr),
            dt_bias=unif((di,), dr),
            W_B=unif((di, ds), di),
            W_C=unif((di, ds), di),
            A=-np.exp(rng.uniform(0.0, math.log(16.0), size=(di, ds))),
            D=unif((di,), 1),
            W_out=unif((di, dm), di),
        )
        blocks.append(p)
    # drawn after the weights so the knob only rescales the plain model
    n_out = max(int(round(outlier_frac * di)), 1) if outlier_frac > 0 else 0
    outlier_idx = np.sort(rng.choice(di, size=n_out, replace=False)) if n_out else np.array([], int)
    for p in blocks:
        p.W_gate[:, outlier_idx] *= outlier_gain
        p.W_out[outlier_idx, :] *= outlier_gain
    log = [f"init seed={cfg.seed}"]
    if n_out:
        log.append(f"outliers channels={outlier_idx.tolist()} gain={outlier_gain}")
    return MambaModel(config=cfg, blocks=blocks, final_gamma=np.ones(dm), log=log)


@dataclass
class ScanInputs:
    A_bar: np.ndarray  # (T, d_inner, d_state)
    B_bar_x: np.ndarray  # (T, d_inner, d_state)
    C_bar: np.ndarray  # (T, d_state)
    h0: Optional[np.ndarray] = None  # (d_inner, d_state)

    def initial_state(self) -> np.ndarray:
        if self.h0 is None:
            return np.zeros(self.A_bar.shape[1:])
        return np.asarray(self.h0, dtype=np.float64)

    def check(self) -> None:
        if self.A_bar.shape != self.B_bar_x.shape:
            raise ValueError(f"A_bar {self.A_bar.shape} and B_bar_x {self.B_bar_x.shape} differ")
        T, _, ds = self.A_bar.shape
        if self.C_bar.shape != (T, ds):
            raise ValueError(f"C_bar must be {(T, ds)}, got {self.C_bar.shape}")
        if self.h0 is not None and np.shape(self.h0) != self.A_bar.shape[1:]:
            raise ValueError(f"h0 must be {self.A_bar.shape[1:]}, got {np.shape(self.h0)}")


def scan_readout(h: np.ndarray, c_bar: np.ndarray) -> np.ndarray:
    return np.einsum("tn,tcn->tc", c_bar, h)


def pscan_sequential(s: ScanInputs) -> tuple[np.ndarray, np.ndarray]:
    """h(t) = A_bar(t) * h(t-1) + B_bar_x(t), left to right."""
    s.check()
    h = np.empty_like(s.B_bar_x, dtype=np.float64)
    prev = s.initial_state()
    for t in range(s.A_bar.shape[0]):
        prev = s.A_bar[t] * prev + s.B_bar_x[t]
        h[t] = prev
    return h, scan_readout(h, s.C_bar)


def pscan_parallel(s: ScanInputs) -> tuple[np.ndarray, np.ndarray]:
    """Blelloch up-sweep/down-sweep over affine maps h -> a*h + b.

    Composition (later after earlier): (a, b) o (a', b') = (a*a', a*b' + b).
    """
    s.check()
    T = s.A_bar.shape[0]
    n = 1 << max(T - 1, 0).bit_length()
    tail = s.A_bar.shape[1:]
    a = np.ones((n, *tail))
    b = np.zeros((n, *tail))
    a[:T] = s.A_bar
    b[:T] = s.B_bar_x
    elem_a, elem_b = a.copy(), b.copy()

    step = 1
    while step < n:
        right = np.arange(2 * step - 1, n, 2 * step)
        left = right - step
        b[right] = a[right] * b[left] + b[right]
        a[right] = a[right] * a[left]
        step *= 2

    a[n - 1] = 1.0
    b[n - 1] = 0.0
    step = n // 2
    while step >= 1:
        right = np.arange(2 * step - 1, n, 2 * step)
        left = right - step
        la, lb = a[left].copy(), b[left].copy()
        a[left], b[left] = a[right], b[right]
        # prefix of the right subtree = left-subtree total after the parent prefix
        b[right] = la * b[right] + lb
        a[right] = la * a[right]
        step //= 2

    # inclusive prefix = element after exclusive prefix
    pa = elem_a * a
    pb = elem_a * b + elem_b
    h = pa[:T] * s.initial_state() + pb[:T]
    return h, scan_readout(h, s.C_bar)


class TapRecorder:
    """Collects activations by name during a single forward pass."""

    def __init__(self, taps=None):
        self.taps = None if taps is None else set(taps)
        self.records: dict[str, list[tuple[int, np.ndarray]]] = {}

    def wants(self, name: str) -> bool:
        return self.taps is None or name in self.taps

    def record(self, name: str, block: int, value: np.ndarray) -> None:
        if self.wants(name):
            self.records.setdefault(name, []).append((block, np.array(value, copy=True)))

    def get(self, name: str, block: Optional[int] = None) -> list[np.ndarray]:
        return [v for b, v in self.records.get(name, []) if block is None or b == block]


def causal_dwconv(u: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Depthwise causal convolution with left zero padding; u is (T, C)."""
    T = u.shape[0]
    k = weight.shape[1]
    padded = np.concatenate([np.zeros((k - 1, u.shape[1])), u], axis=0)
    out = np.tile(bias, (T, 1)).astype(np.float64)
    for j in range(k):
        out += padded[j:j + T] * weight[:, j]
    return out


ScanFn = Callable[[ScanInputs], tuple[np.ndarray, np.ndarray]]


def block_forward(p: MambaBlockParams, x, taps: Optional[TapRecorder] = None, *,
                  block: int = 0, scan: ScanFn = pscan_parallel,
                  h0: Optional[np.ndarray] = None, act_quant=None,
                  apply_dt1_shift: bool = True) -> np.ndarray:
    """One Mamba block on already-normalised input x of shape (T, d_model)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.W_gate.shape[0]:
        raise ValueError(f"block input must be (T, {p.W_gate.shape[0]}), got {x.shape}")

    def q(point, v):
        return v if act_quant is None else act_quant(point, block, v)

    xin = q("proj_in", x)
    u = xin @ p.W_state
    xp = silu(causal_dwconv(u, p.conv_weight, p.conv_bias))
    xq = q("x_proj_in", xp)
    mid = xq @ p.W_dt_down
    if taps is not None:
        taps.record("lora_mid", block, mid)
    dt = softplus(q("lora_mid", mid) @ p.W_dt_up + p.dt_bias)
    Bp = xq @ p.W_B
    Cp = xq @ p.W_C

    expo = p.A[None, :, :] * dt[:, :, None]
    if p.dt1_shift is not None and apply_dt1_shift and expo.shape[0]:
        expo[0] = expo[0] + p.dt1_shift[None, :]
    s = ScanInputs(
        A_bar=np.exp(expo),
        B_bar_x=dt[:, :, None] * Bp[:, None, :] * xp[:, :, None],
        C_bar=Cp,
        h0=h0,
    )
    h, _ = scan(s)
    if taps is not None:
        taps.record("pscan_in", block, s.B_bar_x)
        taps.record("pscan_out", block, h)
    if p.had_h:
        h = fwht_apply(h)
    if taps is not None:
        taps.record("matmul_h", block, h)
        taps.record("matmul_C", block, Cp)
    y_ssm = scan_readout(q("matmul_h", h), q("matmul_C", Cp)) + p.D * xp

    g = xin @ p.W_gate
    z = silu(g) if p.s_out is None else s_silu(g, p.s_out)
    y = y_ssm * z
    if p.had_out:
        y = fwht_apply(y)
    if taps is not None:
        taps.record("gate_out", block, z)
        taps.record("ssm_out", block, y_ssm)
        taps.record("outproj_in", block, y)
    y = q("outproj_in", y)
    return y @ p.W_out


def model_forward(m: MambaModel, x, taps: Optional[TapRecorder] = None, *,
                  scan: ScanFn = pscan_parallel, h0=None,
                  apply_dt1_shift: bool = True) -> np.ndarray:
    """Pre-norm residual stack with a final RMSNorm.

    ``h0`` may be None or a sequence of per-block initial states.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.config.d_model:
        raise ValueError(f"model input must be (T, {m.config.d_model}), got {x.shape}")
    if m.in_adapter is not None:
        x = x @ m.in_adapter
    for i, p in enumerate(m.blocks):
        xn = rms_normalize(x)
        if taps is not None:
            taps.record("resid_stream", i, xn)
        if not np.all(p.norm_gamma == 1.0):
            xn = xn * p.norm_gamma
        x = x + block_forward(p, xn, taps, block=i, scan=scan,
                              h0=None if h0 is None else h0[i], act_quant=m.act_quant,
                              apply_dt1_shift=apply_dt1_shift)
    y = rmsnorm(x, m.final_gamma)
    if m.out_adapter is not None:
        y = y @ m.out_adapter
    return y


def model_forward_batch(m: MambaModel, xb, taps: Optional[TapRecorder] = None, **kw) -> np.ndarray:
    xb = np.asarray(xb, dtype=np.float64)
    return np.stack([model_forward(m, xb[i], taps, **kw) for i in range(xb.shape[0])])
