"""Hadamard matrices, fast Walsh-Hadamard application and KLT-enhanced rotations."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import EighResult, ShapeError, jacobi_eigh

# Paley type-I constructions (q = 11, 19), stored row by row as signs.
_BASE_SIGNS = {
    12: """
++++++++++++
-++-+++---+-
--++-+++---+
-+-++-+++---
--+-++-+++--
---+-++-+++-
----+-++-+++
-+---+-++-++
-++---+-++-+
-+++---+-++-
--+++---+-++
-+-+++---+-+
""",
    20: """
++++++++++++++++++++
-++--++++-+-+----++-
--++--++++-+-+----++
-+-++--++++-+-+----+
-++-++--++++-+-+----
--++-++--++++-+-+---
---++-++--++++-+-+--
----++-++--++++-+-+-
-----++-++--++++-+-+
-+----++-++--++++-+-
--+----++-++--++++-+
-+-+----++-++--++++-
--+-+----++-++--++++
-+-+-+----++-++--+++
-++-+-+----++-++--++
-+++-+-+----++-++--+
-++++-+-+----++-++--
--++++-+-+----++-++-
---++++-+-+----++-++
-+--++++-+-+----++-+
""",
}


class UnsupportedOrderError(ValueError):
    def __init__(self, m: int):
        super().__init__(
            f"no Hadamard matrix for order {m}; supported orders are 2^k, "
            "12*2^k and 20*2^k"
        )
        self.order = m


def base_sign_matrix(b: int) -> np.ndarray:
    """Unnormalised +/-1 base matrix of order 1, 12 or 20."""
    if b == 1:
        return np.ones((1, 1))
    rows = _BASE_SIGNS[b].split()
    return np.array([[1.0 if c == "+" else -1.0 for c in r] for r in rows])


def factor_order(m: int) -> tuple[int, int]:
    """Split m into (2^k, b) with b in {1, 12, 20}."""
    if m < 1:
        raise UnsupportedOrderError(m)
    for b in (1, 12, 20):
        if m % b == 0:
            p = m // b
            if p & (p - 1) == 0:
                return p, b
    raise UnsupportedOrderError(m)


def is_supported_order(m: int) -> bool:
    try:
        factor_order(m)
    except UnsupportedOrderError:
        return False
    return True


@dataclass(frozen=True)
class HadamardMatrix:
    order: int
    matrix: np.ndarray
    recipe: str


@lru_cache(maxsize=64)
def _hadamard_cached(m: int) -> HadamardMatrix:
    p, b = factor_order(m)
    h = base_sign_matrix(b) / math.sqrt(b)
    size = b
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    while size < m:
        h = np.block([[h, h], [h, -h]]) * inv_sqrt2
        size *= 2
    # Re-normalise so every entry is exactly +/- 1/sqrt(m) in float64.
    h = np.sign(h) / math.sqrt(m)
    h.setflags(write=False)
    recipe = f"sylvester^{p.bit_length() - 1}" + (f" x base{b}" if b > 1 else "")
    return HadamardMatrix(order=m, matrix=h, recipe=recipe)


def hadamard(m: int) -> HadamardMatrix:
    """Orthonormal Hadamard matrix of order m (Sylvester from base 1, 12 or 20)."""
    return _hadamard_cached(int(m))


def _fwht_pow2(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, -1)
    lead = x.shape[:-1]
    n = x.shape[-1]
    y = np.array(x, dtype=np.float64, copy=True).reshape(-1, n)
    h = 1
    while h < n:
        y = y.reshape(-1, n // (2 * h), 2, h)
        a = y[:, :, 0, :]
        b = y[:, :, 1, :]
        y = np.stack((a + b, a - b), axis=2)
        h *= 2
    y = y.reshape(*lead, n)
    return np.moveaxis(y, -1, axis)


def fwht_apply(x, normalize: bool = True) -> np.ndarray:
    """Right-multiply the last axis of ``x`` by the Hadamard matrix of that order.

    The 2^k factor runs through an O(m log m) butterfly; a 12 or 20 base factor
    is applied as a dense multiply via the Kronecker structure.
    With ``normalize=False`` the result is the unscaled +/-1 transform.
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[-1]
    p, b = factor_order(m)
    if b == 1:
        y = _fwht_pow2(x, axis=-1)
    else:
        y = x.reshape(*x.shape[:-1], p, b) @ base_sign_matrix(b)
        y = _fwht_pow2(y, axis=-2).reshape(x.shape)
    if normalize:
        y = y / math.sqrt(m)
    return y


def covariance(x, center: bool = True) -> np.ndarray:
    """Sample covariance X^T X / (n-1), optionally after column centring."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"covariance expects a 2-D array, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("covariance needs at least 2 rows")
    if center:
        x = x - x.mean(axis=0)
    c = (x.T @ x) / (n - 1)
    return 0.5 * (c + c.T)


@dataclass(frozen=True)
class KltRotation:
    K: np.ndarray
    H: np.ndarray
    H_K: np.ndarray
    eigenvalues: np.ndarray
    tap: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def order(self) -> int:
        return self.H_K.shape[0]


def klt_enhanced(cov, tap: str = "", eig_floor: float = 1e-12) -> KltRotation:
    """Build H_K = K @ H from the eigenvectors K of a covariance matrix."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError(f"covariance must be square, got {cov.shape}")
    m = cov.shape[0]
    h = hadamard(m).matrix
    res: EighResult = jacobi_eigh(cov)
    lam = res.eigenvalues.copy()
    if lam.size and lam[0] > 0:
        lam[lam < eig_floor * lam[0]] = 0.0
    K = res.eigenvectors
    return KltRotation(K=K, H=np.array(h), H_K=K @ h, eigenvalues=lam, tap=tap,
                       meta={"sweeps": res.sweeps})


def hadamard_rotation(m: int, tap: str = "") -> KltRotation:
    """Plain Hadamard rotation expressed as a KltRotation with K = I."""
    h = np.array(hadamard(m).matrix)
    return KltRotation(K=np.eye(m), H=h, H_K=h.copy(), eigenvalues=np.ones(m), tap=tap,
                       meta={"kind": "hadamard"})


class NonOrthogonalWarning(UserWarning):
    pass


def orthogonality_error(r) -> float:
    r = np.asarray(r, dtype=np.float64)
    return float(np.abs(r @ r.T - np.eye(r.shape[0])).max())


def rotated_channel_variances(x, r, center: bool = True) -> np.ndarray:
    """Diagonal of covariance(x @ r)."""
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    err = orthogonality_error(r)
    if err > 1e-8:
        warnings.warn(f"rotation is not orthogonal (|RR^T - I| = {err:.2e})",
                      NonOrthogonalWarning, stacklevel=2)
    return np.diag(covariance(x @ r, center=center)).copy()
