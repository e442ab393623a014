"""Small published fixtures and exact-arithmetic oracles for them."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

# 4x4 worked example; every column already has zero mean
APPENDIX_R = np.array([
    [3.0, -1.0, 0.0, -4.0],
    [-2.0, 3.0, -3.0, 1.0],
    [1.0, -3.0, 4.0, -3.0],
    [-2.0, 1.0, -1.0, 6.0],
])

H4_SIGNS = np.array([
    [1, 1, 1, 1],
    [1, -1, 1, -1],
    [1, 1, -1, -1],
    [1, -1, -1, 1],
])

# Printed diagonal of cov(R H); see exact_rh_variances for the exact values.
PUBLISHED_RH_DIAG = (1.83, 30.50, 8.75, 2.17)
PUBLISHED_TOL = 0.01

# Cost-model example inputs and printed percentages.
COST_INPUTS = dict(d_inner=5120, d_state=16, n_blocks=64, n_tokens=1024,
                   base_params=2.8e9, base_flops=2.8e12)
PUBLISHED_COST = {"param_overhead_pct": "0.01", "flop_overhead_pct": "0.91"}


def exact_covariance_diag(x_int, h_signs, h_scale: Fraction) -> list[Fraction]:
    """Diagonal of cov(X H) in rational arithmetic (columns of X H are centred here)."""
    n = len(x_int)
    m = len(h_signs)
    xh = [[sum(Fraction(int(x_int[i][k])) * int(h_signs[k][j]) * h_scale for k in range(m))
           for j in range(m)] for i in range(n)]
    out = []
    for j in range(m):
        col = [xh[i][j] for i in range(n)]
        mu = sum(col) / n
        out.append(sum((v - mu) ** 2 for v in col) / (n - 1))
    return out


def exact_rh_variances() -> list[Fraction]:
    return exact_covariance_diag(APPENDIX_R.astype(int).tolist(), H4_SIGNS.tolist(), Fraction(1, 2))


def exact_trace_r() -> Fraction:
    r = APPENDIX_R.astype(int).tolist()
    return sum(exact_covariance_diag(r, np.eye(4, dtype=int).tolist(), Fraction(1)))
