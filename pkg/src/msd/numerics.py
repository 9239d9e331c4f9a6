"""Shared numerical kernels: RNG streams, Brownian paths, dense linear algebra.

Randomness is counter-based: a stream is identified by ``(seed, stream_index)``
and is reproducible in isolation, so path m of a simulation always sees the
same increments no matter how many other paths run or in what order. Normal
variates come from the inverse CDF applied to fixed-width uniforms, one draw
per variate; nothing in the pipeline uses rejection sampling, so streams never
diverge between runs.

Monte Carlo reductions use a fixed-shape pairwise tree so that results are
bit-identical regardless of how work might be batched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

MAX_DIM = 16

# 2^-53; uniforms are (k + 0.5) * 2^-53 with k drawn from 53 bits, so they
# live strictly inside (0, 1) and ndtri never sees an endpoint.
_U53 = 2.0 ** -53


class NumericsError(ValueError):
    """Raised for invalid inputs to the numerical kernels."""


class RankDeficientError(NumericsError):
    """QR factorization met a (numerically) dependent column."""

    def __init__(self, column: int, norm: float):
        super().__init__(
            f"column {column} is numerically dependent (residual norm {norm:.3e})"
        )
        self.column = column


@dataclass(frozen=True)
class RngStream:
    """Identifier of an independent random stream."""

    seed: int
    stream_index: int

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed % 2**64, self.stream_index % 2**64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def normals(stream: RngStream, count: int) -> np.ndarray:
    """``count`` standard normals via inverse CDF on the counter stream."""
    gen = stream.generator()
    bits = gen.integers(0, 2**53, size=count, dtype=np.uint64)
    u = (bits.astype(np.float64) + 0.5) * _U53
    return ndtri(u)


@dataclass(frozen=True)
class BrownianPath:
    """Increments of a scalar Brownian motion on a uniform grid.

    ``increments[k]`` is w(t0 + (k+1) dt) - w(t0 + k dt), distributed
    Normal(0, dt).
    """

    t0: float
    dt: float
    increments: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.increments)

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def cumulative(self) -> np.ndarray:
        """w(t_k) - w(t0) at every node, starting at 0."""
        out = np.empty(self.steps + 1)
        out[0] = 0.0
        np.cumsum(self.increments, out=out[1:])
        return out


def brownian(t0: float, dt: float, steps: int, stream: RngStream) -> BrownianPath:
    """Sample a Brownian path on ``steps`` uniform increments of size ``dt``."""
    if dt <= 0.0:
        raise NumericsError("dt must be positive")
    if steps < 1:
        raise NumericsError("need at least one step")
    return BrownianPath(t0, dt, normals(stream, steps) * np.sqrt(dt))


def brownian_batch(seed: int, n_paths: int, dt: float, steps: int) -> np.ndarray:
    """Increments for paths 0..n_paths-1, one stream per path; shape (n_paths, steps)."""
    if dt <= 0.0:
        raise NumericsError("dt must be positive")
    out = np.empty((n_paths, steps))
    root = np.sqrt(dt)
    for m in range(n_paths):
        out[m] = normals(RngStream(seed, m), steps) * root
    return out


# ---------------------------------------------------------------------------
# Deterministic reductions


def pairwise_sum(values: np.ndarray) -> float:
    """Sum with a fixed binary tree (blocks of 8 at the leaves).

    The tree shape depends only on ``len(values)``, so the result is
    bit-identical for any batching of the surrounding computation.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    n = len(x)
    if n == 0:
        return 0.0
    if n <= 8:
        total = 0.0
        for v in x:
            total += float(v)
        return total
    half = (n + 1) // 2
    return pairwise_sum(x[:half]) + pairwise_sum(x[half:])


def pairwise_mean_std(values: np.ndarray) -> tuple[float, float]:
    """Mean and sample standard deviation with pairwise accumulation."""
    x = np.asarray(values, dtype=np.float64).ravel()
    n = len(x)
    if n == 0:
        raise NumericsError("empty sample")
    mean = pairwise_sum(x) / n
    if n == 1:
        return mean, 0.0
    var = pairwise_sum((x - mean) ** 2) / (n - 1)
    return mean, float(np.sqrt(var))


# ---------------------------------------------------------------------------
# Dense linear algebra (matrices are small: dim <= MAX_DIM)


def check_dim(n: int) -> None:
    if not 1 <= n <= MAX_DIM:
        raise NumericsError(f"dimension {n} outside [1, {MAX_DIM}]")


def gram_schmidt_qr(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """QR via modified Gram-Schmidt with one re-orthogonalization pass.

    R has a positive diagonal (sign convention that keeps factors continuous
    along a path of matrices). Raises :class:`RankDeficientError` naming the
    first numerically dependent column.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NumericsError("expected a square matrix")
    n = a.shape[0]
    check_dim(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        raise RankDeficientError(0, 0.0)
    q = np.zeros((n, n))
    r = np.zeros((n, n))
    for j in range(n):
        v = a[:, j].copy()
        # Two orthogonalization sweeps: the second removes the O(eps·cond)
        # residue the first leaves behind.
        for _ in range(2):
            for i in range(j):
                c = q[:, i] @ v
                r[i, j] += c
                v -= c * q[:, i]
        norm = np.linalg.norm(v)
        if norm <= 1e-12 * scale:
            raise RankDeficientError(j, float(norm))
        r[j, j] = norm
        q[:, j] = v / norm
    return q, r


def spd_sqrt_commuting(gram: np.ndarray, rank: int) -> np.ndarray:
    """Symmetric PSD square root of P g P + Q g Q computed blockwise.

    ``rank`` is the size of the leading block (the canonical projector
    diag(Id_rank, 0)); the result commutes with that projector exactly by
    construction. Raises if ``gram`` is not symmetric or a block is not
    positive definite.
    """
    g = np.asarray(gram, dtype=np.float64)
    n = g.shape[0]
    check_dim(n)
    if g.shape != (n, n):
        raise NumericsError("expected a square matrix")
    if not 0 <= rank <= n:
        raise NumericsError(f"rank {rank} outside [0, {n}]")
    asym = np.linalg.norm(g - g.T)
    if asym > 1e-10 * max(1.0, np.linalg.norm(g)):
        raise NumericsError(f"matrix is not symmetric (asymmetry {asym:.3e})")
    out = np.zeros((n, n))
    for lo, hi in ((0, rank), (rank, n)):
        if hi == lo:
            continue
        block = 0.5 * (g[lo:hi, lo:hi] + g[lo:hi, lo:hi].T)
        w, v = np.linalg.eigh(block)
        if w[0] <= 0.0:
            raise NumericsError(
                f"projected Gram block [{lo}:{hi}] is not positive definite "
                f"(smallest eigenvalue {w[0]:.3e})"
            )
        out[lo:hi, lo:hi] = (v * np.sqrt(w)) @ v.T
    return out
