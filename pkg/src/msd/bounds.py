"""Regularity-coefficient bounds and pathwise triangularization.

Diagonal and trace averages are deterministic time integrals, so they come
from quadrature, not simulation. The limsup/liminf statistics scan one full
multiplicative period of sin(log t) (about 535) plus margin below the
horizon; a plain second-half window misses the extremes of the oscillating
examples at every horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .engines import FundamentalEnsemble
from .model import LinearSde
from .numerics import RankDeficientError, gram_schmidt_qr


class BoundsError(ValueError):
    """Precondition failure in a bound computation or triangularization."""


# Window width in log time; covers e^(2 pi) with margin.
_TAIL_LOG_WIDTH = 2.0 * math.pi + 0.5
_SEGMENTS = 512
_T_FLOOR = 1e-8
# Row statistics closer than this (relative) collapse to a shared value, so
# constant coefficients report a spread of exactly zero.
_COLLAPSE = 64.0 * np.finfo(float).eps


@dataclass(frozen=True)
class DiagonalAverages:
    """Tail statistics of (1/t) * integral of each diagonal drift entry."""

    alpha_bar: tuple[float, ...]
    alpha_under: tuple[float, ...]
    ts: np.ndarray         # tail checkpoints the extremes were taken over
    averages: np.ndarray   # [checkpoint, row] running averages
    horizon: float


@dataclass(frozen=True)
class TriangularizationResult:
    """Per node and path: orthogonal S and upper-triangular X with S X = Phi."""

    ts: np.ndarray
    s: np.ndarray          # [node, path, row, col]
    x: np.ndarray
    max_orthogonality_defect: float
    max_lower_magnitude: float
    max_reconstruction_error: float   # relative Frobenius


@dataclass(frozen=True)
class UnitaryInvarianceReport:
    max_column_norm_gap: float    # ||X e_j|| vs ||Phi e_j||
    max_rotated_norm_gap: float   # ||S X e_j|| vs ||Phi e_j||
    max_trace_gap: float          # tr X^T X vs tr Phi^T Phi
    nodes: int


def _check_horizon(horizon: float) -> None:
    if not (horizon > 0.0 and math.isfinite(horizon)):
        raise BoundsError("horizon must be positive and finite")


def _refine(f, lo, hi, flo, fm, fhi, whole, tol, depth):
    mid = 0.5 * (lo + hi)
    flm = f(0.5 * (lo + mid))
    frm = f(0.5 * (mid + hi))
    left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fm)
    right = (hi - mid) / 6.0 * (fm + 4.0 * frm + fhi)
    err = left + right - whole
    if depth <= 0 or abs(err) <= 15.0 * tol:
        return left + right + err / 15.0
    return (_refine(f, lo, mid, flo, flm, fm, left, 0.5 * tol, depth - 1)
            + _refine(f, mid, hi, fm, frm, fhi, right, 0.5 * tol, depth - 1))


def _adaptive_simpson(f, lo, hi, tol):
    flo = f(lo)
    fm = f(0.5 * (lo + hi))
    fhi = f(hi)
    whole = (hi - lo) / 6.0 * (flo + 4.0 * fm + fhi)
    return _refine(f, lo, hi, flo, fm, fhi, whole, tol, 48)


def _running_average(f, horizon: float) -> tuple[np.ndarray, np.ndarray]:
    """(1/t) * integral_0^t f at log-spaced breakpoints.

    The integrand may be undefined at t = 0 (log-time coefficients), so the
    head [0, _T_FLOOR] is approximated by f(_T_FLOOR) * _T_FLOOR; the error
    is below 1e-7 for bounded coefficients and vanishes after division by
    any tail time.
    """
    if horizon <= _T_FLOOR * 4.0:
        raise BoundsError(f"horizon must exceed {_T_FLOOR * 4.0:g}")
    edges = np.geomspace(_T_FLOOR, horizon, _SEGMENTS + 1)
    tol = 1e-8 / _SEGMENTS
    pieces = np.array([
        _adaptive_simpson(f, edges[i], edges[i + 1], tol) for i in range(_SEGMENTS)
    ])
    totals = f(_T_FLOOR) * _T_FLOOR + np.cumsum(pieces)
    ts = edges[1:]
    return ts, totals / ts


def _tail(ts: np.ndarray, values: np.ndarray, horizon: float) -> np.ndarray:
    return values[ts >= horizon * math.exp(-_TAIL_LOG_WIDTH)]


def _extremes(tail_values: np.ndarray) -> tuple[float, float]:
    hi = float(np.max(tail_values))
    lo = float(np.min(tail_values))
    if hi - lo <= _COLLAPSE * max(1.0, abs(hi), abs(lo)):
        mid = 0.5 * (hi + lo)
        return mid, mid
    return hi, lo


def diagonal_averages(system: LinearSde, horizon: float) -> DiagonalAverages:
    """Limsup and liminf of the running averages of each a_kk."""
    _check_horizon(horizon)
    ts = None
    columns = []
    for k in range(system.dim):
        entry = system.drift[k][k]
        f = lambda t, e=entry: float(ex.evaluate(e, t, system.params))
        ts, avg = _running_average(f, horizon)
        columns.append(avg)
    averages = np.column_stack(columns)
    mask = ts >= horizon * math.exp(-_TAIL_LOG_WIDTH)
    bars, unders = [], []
    for k in range(system.dim):
        hi, lo = _extremes(averages[mask, k])
        bars.append(hi)
        unders.append(lo)
    return DiagonalAverages(alpha_bar=tuple(bars), alpha_under=tuple(unders),
                            ts=ts[mask], averages=averages[mask], horizon=horizon)


def lower_bound(system: LinearSde, horizon: float) -> float:
    """(2/n) * (limsup - liminf) of the running average of tr A."""
    _check_horizon(horizon)
    entries = [system.drift[k][k] for k in range(system.dim)]
    params = system.params

    def trace(t: float) -> float:
        return float(sum(ex.evaluate(e, t, params) for e in entries))

    ts, avg = _running_average(trace, horizon)
    hi, lo = _extremes(_tail(ts, avg, horizon))
    return max(0.0, (2.0 / system.dim) * (hi - lo))


def upper_bound(system: LinearSde, horizon: float) -> float:
    """2 * sum of per-row average spreads; triangular systems only."""
    if not system.is_upper_triangular():
        raise BoundsError("upper_bound needs upper-triangular drift and diffusion")
    davg = diagonal_averages(system, horizon)
    return 2.0 * float(sum(b - u for b, u in zip(davg.alpha_bar, davg.alpha_under)))


def bounds_report(system: LinearSde, horizon: float) -> dict:
    """Lower/upper bounds plus per-row averages, JSON-shaped."""
    davg = diagonal_averages(system, horizon)
    trace_avg = davg.averages.sum(axis=1)
    hi, lo = _extremes(trace_avg)
    upper = None
    if system.is_upper_triangular():
        upper = 2.0 * float(sum(b - u for b, u in zip(davg.alpha_bar, davg.alpha_under)))
    return {
        "horizon": horizon,
        "lower": max(0.0, (2.0 / system.dim) * (hi - lo)),
        "upper": upper,
        "rows": [
            {"alpha_bar": b, "alpha_under": u}
            for b, u in zip(davg.alpha_bar, davg.alpha_under)
        ],
    }


def triangularize_paths(ens: FundamentalEnsemble) -> TriangularizationResult:
    """QR of Phi at every node of every path.

    The positive-diagonal convention of the QR fixes the sign ambiguity, so
    S varies continuously along a path once the grid is fine enough to keep
    consecutive factors close.
    """
    phi = ens.phi
    nodes, paths, n, _ = phi.shape
    s = np.empty_like(phi)
    x = np.empty_like(phi)
    times = ens.grid.times()
    for k in range(nodes):
        for p in range(paths):
            try:
                q, r = gram_schmidt_qr(phi[k, p])
            except RankDeficientError as exc:
                raise BoundsError(
                    f"fundamental matrix numerically rank-deficient at node {k} "
                    f"(t={times[k]:.6g}), path {p}: column {exc.column}"
                ) from None
            s[k, p] = q
            x[k, p] = r
    eye = np.eye(n)
    orth = np.linalg.norm(np.einsum("kpij,kpil->kpjl", s, s) - eye, axis=(2, 3))
    lower = np.abs(np.tril(x, -1))
    recon = np.linalg.norm(s @ x - phi, axis=(2, 3))
    scale = np.linalg.norm(phi, axis=(2, 3))
    return TriangularizationResult(
        ts=times,
        s=s,
        x=x,
        max_orthogonality_defect=float(orth.max()),
        max_lower_magnitude=float(lower.max()),
        max_reconstruction_error=float((recon / scale).max()),
    )


def unitary_invariance_check(ens: FundamentalEnsemble,
                             result: TriangularizationResult) -> UnitaryInvarianceReport:
    """Norm preservation under the orthogonal factor, node by node.

    Column norms of X and of S X must match those of Phi, and the squared
    Frobenius norms must agree, confirming that second-moment curves read
    off X coincide with those of Phi.
    """
    if result.s.shape != ens.phi.shape:
        raise BoundsError("triangularization does not match this ensemble")
    col_phi = np.linalg.norm(ens.phi, axis=2)
    col_x = np.linalg.norm(result.x, axis=2)
    col_sx = np.linalg.norm(result.s @ result.x, axis=2)
    tr_phi = np.sum(ens.phi ** 2, axis=(2, 3))
    tr_x = np.sum(result.x ** 2, axis=(2, 3))
    return UnitaryInvarianceReport(
        max_column_norm_gap=float(np.abs(col_x - col_phi).max()),
        max_rotated_norm_gap=float(np.abs(col_sx - col_phi).max()),
        max_trace_gap=float(np.abs(tr_x - tr_phi).max()),
        nodes=ens.phi.shape[0],
    )
