"""Dense linear-algebra substrate.

Tensors are plain float64 numpy arrays. This module adds the few pieces the
rest of the package needs on top of numpy: a shape-checked matmul, a cyclic
Jacobi eigensolver with deterministic sign/order conventions, and per-channel
summary statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUANTILES = (0.01, 0.25, 0.5, 0.75, 0.99)


class ShapeError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(
            f"Jacobi iteration did not converge after {sweeps} sweeps "
            f"(max off-diagonal {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


def as_tensor(x, *, check_finite: bool = True) -> np.ndarray:
    """Convert to a contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


@dataclass(frozen=True)
class EighResult:
    eigenvectors: np.ndarray  # columns are eigenvectors
    eigenvalues: np.ndarray  # descending
    sweeps: int = 0


def _round_robin(m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint (p, q) pair sets covering every pair once per sweep."""
    players = list(range(m)) + ([-1] if m % 2 else [])
    n = len(players)
    rounds = []
    for _ in range(n - 1):
        ps, qs = [], []
        for i in range(n // 2):
            a, b = players[i], players[n - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def jacobi_eigh(s, tol: float | None = None, max_sweeps: int = 100) -> EighResult:
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Rotations are scheduled in round-robin order, so each round touches
    disjoint (p, q) pairs and can be applied as one vectorised update.

    Eigenvalues come back sorted descending; each eigenvector column is
    signed so that its largest-magnitude entry is positive.
    """
    a = np.array(s, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite values")
    a = 0.5 * (a + a.T)
    m = a.shape[0]
    v = np.eye(m)
    scale = np.abs(a).sum(axis=1).max() if m else 0.0
    thresh = 1e-12 * scale if tol is None else tol
    off_mask = ~np.eye(m, dtype=bool)

    def off_max() -> float:
        return float(np.abs(a[off_mask]).max()) if m > 1 else 0.0

    sweeps = 0
    rounds = _round_robin(m) if m > 1 else []
    while off_max() > thresh:
        if sweeps >= max_sweeps:
            raise ConvergenceError(off_max(), sweeps)
        for p, q in rounds:
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            nz = apq != 0.0
            t = np.zeros_like(apq)
            # tau may overflow to inf for a tiny apq; t -> 0 is the right limit
            with np.errstate(over="ignore"):
                tau = (aqq[nz] - app[nz]) / (2.0 * apq[nz])
                sgn = np.where(tau >= 0.0, 1.0, -1.0)
                t[nz] = sgn / (np.abs(tau) + np.hypot(1.0, tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = t * c
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - sn * aq
            a[:, q] = sn * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - sn[:, None] * aq
            a[q, :] = sn[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - sn * vq
            v[:, q] = sn * vp + c * vq
        sweeps += 1

    lam = np.diag(a).copy()
    order = np.argsort(-lam, kind="stable")
    return EighResult(_fix_signs(v[:, order]), lam[order], sweeps)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    variance: np.ndarray
    absmax: np.ndarray
    quantiles: dict[float, np.ndarray]


def channel_stats(x) -> ChannelStats:
    """Per-column mean, unbiased variance, absmax and quantiles."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"channel_stats expects a 2-D array, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("channel_stats needs at least 2 rows (variance undefined)")
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).sum(axis=0) / (n - 1)
    qs = np.quantile(x, QUANTILES, axis=0, method="linear")
    return ChannelStats(
        mean=mean,
        variance=var,
        absmax=np.abs(x).max(axis=0),
        quantiles={q: qs[i] for i, q in enumerate(QUANTILES)},
    )


def spread(values) -> float:
    """max/min ratio of a positive vector (inf when the minimum is zero)."""
    values = np.asarray(values, dtype=np.float64)
    lo = values.min()
    if lo <= 0.0:
        return float("inf")
    return float(values.max() / lo)
