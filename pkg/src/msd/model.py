"""Linear SDE models with expression-valued coefficients.

A system is du = A(t) u dt + G(t) u dw with A, G square matrices of
expressions in ``t`` and named parameters, driven by a scalar Brownian
motion. The adjoint system (whose fundamental matrix is the transposed
inverse of the original one) is built symbolically, so it can be fed back
into every engine unchanged.

The gallery collects the worked systems used across the test-suite and CLI:
geometric Brownian motion, the log-time Perron-type diagonal systems (plain,
stochastic, and with the destabilizing one-sided coupling), and small
constant systems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .numerics import MAX_DIM, check_dim


class ModelError(ValueError):
    """Invalid model construction or use."""


Matrix = tuple[tuple[ex.Expr, ...], ...]


@dataclass(frozen=True)
class Projector:
    """Canonical coordinate projector diag(Id_rank, 0)."""

    dim: int
    rank: int

    def __post_init__(self):
        check_dim(self.dim)
        if not 0 <= self.rank <= self.dim:
            raise ModelError(f"rank {self.rank} outside [0, {self.dim}]")

    @property
    def matrix(self) -> np.ndarray:
        d = np.zeros(self.dim)
        d[: self.rank] = 1.0
        return np.diag(d)

    @property
    def complement_matrix(self) -> np.ndarray:
        return np.eye(self.dim) - self.matrix


def make_projector(dim: int, rank: int) -> Projector:
    return Projector(dim, rank)


def _parse_matrix(dim: int, rows, what: str) -> Matrix:
    if len(rows) != dim or any(len(row) != dim for row in rows):
        raise ModelError(f"{what} must be {dim}x{dim}")
    out = []
    for row in rows:
        parsed = []
        for entry in row:
            if isinstance(entry, str):
                parsed.append(ex.parse(entry))
            elif isinstance(entry, (int, float)):
                parsed.append(ex.Num(float(entry)))
            else:
                parsed.append(entry)
        out.append(tuple(parsed))
    return tuple(out)


@dataclass(frozen=True)
class LinearSde:
    """du = A(t) u dt + G(t) u dw, scalar driving noise."""

    dim: int
    drift: Matrix
    diffusion: Matrix
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        check_dim(self.dim)
        bound = set(self.params) | {"t"}
        for what, matrix in (("drift", self.drift), ("diffusion", self.diffusion)):
            if len(matrix) != self.dim or any(len(r) != self.dim for r in matrix):
                raise ModelError(f"{what} must be {self.dim}x{self.dim}")
            for row in matrix:
                for entry in row:
                    free = ex.free_names(entry) - bound
                    if free:
                        raise ModelError(
                            f"unbound parameter(s) {sorted(free)} in {what} entry "
                            f"'{ex.serialize(entry)}'"
                        )
        for name, value in self.params.items():
            if not isinstance(value, (int, float)) or not np.isfinite(value):
                raise ModelError(f"parameter '{name}' must be a finite number")

    @classmethod
    def from_strings(cls, dim, drift, diffusion, params=None) -> "LinearSde":
        params = {k: float(v) for k, v in (params or {}).items()}
        return cls(
            dim=dim,
            drift=_parse_matrix(dim, drift, "drift"),
            diffusion=_parse_matrix(dim, diffusion, "diffusion"),
            params=params,
        )

    def with_params(self, **overrides) -> "LinearSde":
        unknown = set(overrides) - set(self.params)
        if unknown:
            raise ModelError(f"unknown parameter(s) {sorted(unknown)}")
        merged = {**self.params, **{k: float(v) for k, v in overrides.items()}}
        return LinearSde(self.dim, self.drift, self.diffusion, merged)

    def _eval_matrix(self, matrix: Matrix, t) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((len(ts), self.dim, self.dim))
        for i, row in enumerate(matrix):
            for j, entry in enumerate(row):
                value = ex.evaluate(entry, ts, self.params)
                out[:, i, j] = value
        if np.ndim(t) == 0:
            return out[0]
        return out

    def drift_at(self, t) -> np.ndarray:
        """A(t); shape (n, n) for scalar t, (len(t), n, n) for arrays."""
        return self._eval_matrix(self.drift, t)

    def diffusion_at(self, t) -> np.ndarray:
        return self._eval_matrix(self.diffusion, t)

    def is_block_diagonal(self, rank: int) -> bool:
        """True if both matrices are structurally zero off the diag(rank, n-rank) blocks."""
        for matrix in (self.drift, self.diffusion):
            for i in range(self.dim):
                for j in range(self.dim):
                    inside = (i < rank) == (j < rank)
                    if not inside and not ex.is_zero(matrix[i][j]):
                        return False
        return True

    def is_upper_triangular(self, sample_times=None) -> bool:
        """Strictly-below-diagonal entries are zero (structural or sampled exact)."""
        if sample_times is None:
            sample_times = np.geomspace(0.05, 100.0, 7)
        for matrix in (self.drift, self.diffusion):
            for i in range(self.dim):
                for j in range(i):
                    entry = matrix[i][j]
                    if ex.is_zero(entry):
                        continue
                    values = ex.evaluate(entry, np.asarray(sample_times), self.params)
                    if np.any(np.asarray(values) != 0.0):
                        return False
        return True


def adjoint(system: LinearSde) -> LinearSde:
    """System whose fundamental matrix is Phi^-T of the original.

    Drift (-A + G^2)^T and diffusion -G^T, built symbolically so parameters
    stay live.
    """
    n = system.dim
    a, g = system.drift, system.diffusion
    gg = [
        [_sum_products(g, g, i, j, n) for j in range(n)]
        for i in range(n)
    ]
    new_drift = tuple(
        tuple(ex.sub(gg[j][i], a[j][i]) for j in range(n))  # transposed indexing
        for i in range(n)
    )
    new_diff = tuple(tuple(ex.neg(g[j][i]) for j in range(n)) for i in range(n))
    return LinearSde(n, new_drift, new_diff, dict(system.params))


def _sum_products(left: Matrix, right: Matrix, i: int, j: int, n: int) -> ex.Expr:
    total = ex.ZERO
    for k in range(n):
        total = ex.add(total, ex.mul(left[i][k], right[k][j]))
    return total


# ---------------------------------------------------------------------------
# Perturbed systems


@dataclass(frozen=True)
class PerturbationSpec:
    """One nonlinear map (drift or diffusion perturbation).

    kind "power_clipped": u -> coef * u * min(||u||, clip)^(power-1), which
    vanishes at 0 and has globally bounded growth factor clip^(power-1).
    kind "expr": entrywise expressions in t and u1..un; must vanish at u = 0.
    """

    kind: str
    coef: float = 0.0
    power: float = 2.0
    clip: float = 1.0
    entries: tuple = ()

    def __post_init__(self):
        if self.kind not in ("power_clipped", "expr", "zero"):
            raise ModelError(f"unknown perturbation kind '{self.kind}'")
        if self.kind == "power_clipped":
            if self.power < 2.0:
                raise ModelError("power_clipped exponent must be >= 2")
            if self.clip <= 0.0:
                raise ModelError("clip radius must be positive")

    @classmethod
    def zero(cls) -> "PerturbationSpec":
        return cls(kind="zero")

    @classmethod
    def power_clipped(cls, coef, power, clip) -> "PerturbationSpec":
        return cls(kind="power_clipped", coef=float(coef), power=float(power),
                   clip=float(clip))

    @classmethod
    def exprs(cls, entries) -> "PerturbationSpec":
        parsed = tuple(ex.parse(e) if isinstance(e, str) else e for e in entries)
        return cls(kind="expr", entries=parsed)


@dataclass(frozen=True)
class PerturbedSde:
    """Base linear system plus nonlinear drift/diffusion perturbations.

    ``c`` and ``q`` are the declared constants of the mean-square smallness
    condition the stability theory assumes; they are metadata checked by the
    falsifier, not enforced at construction.
    """

    base: LinearSde
    f: PerturbationSpec
    h: PerturbationSpec
    c: float
    q: float

    def __post_init__(self):
        if self.c <= 0.0:
            raise ModelError("declared constant c must be positive")
        if self.q <= 1.0:
            raise ModelError("declared exponent q must exceed 1")
        for spec in (self.f, self.h):
            if spec.kind == "expr":
                if len(spec.entries) != self.base.dim:
                    raise ModelError("perturbation needs one expression per component")
                self._check_vanishes_at_zero(spec)

    def _check_vanishes_at_zero(self, spec: PerturbationSpec) -> None:
        env = {**self.base.params, "t": 1.0}
        env.update({f"u{i + 1}": 0.0 for i in range(self.base.dim)})
        for entry in spec.entries:
            value = ex.evaluate_env(entry, env)
            if value != 0.0:
                raise ModelError(
                    f"perturbation entry '{ex.serialize(entry)}' does not vanish at u = 0"
                )


# ---------------------------------------------------------------------------
# Gallery

_PERRON_DOWN = "-a - b*(sin(log(t)) + cos(log(t)))"
_PERRON_UP = "-a + b*(sin(log(t)) + cos(log(t)))"

GALLERY_NAMES = (
    "gbm",
    "perron-ode",
    "perron-sde",
    "perron-sde-perturbed",
    "triangular-2x2",
    "diag-2x2",
)


def gallery(name: str, **overrides):
    """Build a named example system; keyword overrides replace parameters."""
    if name == "gbm":
        sys_ = LinearSde.from_strings(1, [["a"]], [["b"]], {"a": -1.0, "b": 0.5})
        return sys_.with_params(**overrides)
    if name == "perron-ode":
        sys_ = LinearSde.from_strings(
            2,
            [[_PERRON_DOWN, "0"], ["0", _PERRON_UP]],
            [["0", "0"], ["0", "0"]],
            {"a": 1.05, "b": 1.0},
        )
        return sys_.with_params(**overrides)
    if name == "perron-sde":
        sys_ = LinearSde.from_strings(
            2,
            [[_PERRON_DOWN, "0"], ["0", _PERRON_UP]],
            [["1/(lambda + 1)", "0"], ["0", "1"]],
            {"a": 1.05, "b": 1.0, "lambda": 1.0},
        )
        return sys_.with_params(**overrides)
    if name == "perron-sde-perturbed":
        base = gallery("perron-sde", **overrides)
        lam = base.params["lambda"]
        # Natural exponent of the coupling term is lambda; the declared q of
        # the smallness condition must exceed 1, so it is nominal here.
        return PerturbedSde(
            base=base,
            f=PerturbationSpec.exprs(["0", "u1^(lambda + 1)"]),
            h=PerturbationSpec.zero(),
            c=1.0,
            q=max(1.5, lam),
        )
    if name == "triangular-2x2":
        if overrides:
            raise ModelError("triangular-2x2 has no parameters")
        return LinearSde.from_strings(
            2, [["-1", "1"], ["0", "-2"]], [["0.5", "0"], ["0", "0.5"]], {}
        )
    if name == "diag-2x2":
        sys_ = LinearSde.from_strings(
            2,
            [["a1", "0"], ["0", "a2"]],
            [["g1", "0"], ["0", "g2"]],
            {"a1": -1.0, "a2": -2.0, "g1": 0.2, "g2": 0.3},
        )
        return sys_.with_params(**overrides)
    raise ModelError(f"unknown gallery system '{name}' (known: {', '.join(GALLERY_NAMES)})")


# ---------------------------------------------------------------------------
# Advisory growth check


@dataclass(frozen=True)
class GrowthReport:
    max_logplus_drift: float
    max_logplus_diffusion: float
    drift_trend: float
    diffusion_trend: float
    flag: str  # "consistent" | "growth-violation"


def validate_growth(system: LinearSde, horizon: float = 1e4, samples: int = 200) -> GrowthReport:
    """Advisory check that coefficient norms are not trending upward.

    Samples ||A(t)||_F and ||G(t)||_F on a log-spaced grid and compares the
    mean of log+ over the last third against the first third. A positive
    trend flags a violation of the bounded-coefficient assumption as
    literally written; bounded oscillation is reported "consistent".
    """
    ts = np.geomspace(0.01, horizon, samples)
    a_norms = np.linalg.norm(system.drift_at(ts), axis=(1, 2))
    g_norms = np.linalg.norm(system.diffusion_at(ts), axis=(1, 2))
    logplus_a = np.log(np.maximum(1.0, a_norms))
    logplus_g = np.log(np.maximum(1.0, g_norms))
    third = samples // 3

    def trend(values):
        return float(np.mean(values[-third:]) - np.mean(values[:third]))

    ta, tg = trend(logplus_a), trend(logplus_g)
    flag = "consistent" if max(ta, tg) <= 0.2 else "growth-violation"
    return GrowthReport(
        max_logplus_drift=float(np.max(logplus_a)),
        max_logplus_diffusion=float(np.max(logplus_g)),
        drift_trend=ta,
        diffusion_trend=tg,
        flag=flag,
    )


# ---------------------------------------------------------------------------
# JSON interchange


def to_dict(system: LinearSde) -> dict:
    return {
        "dim": system.dim,
        "params": {k: float(v) for k, v in sorted(system.params.items())},
        "A": [[ex.serialize(e) for e in row] for row in system.drift],
        "G": [[ex.serialize(e) for e in row] for row in system.diffusion],
    }


def from_dict(data: dict) -> LinearSde:
    try:
        dim = int(data["dim"])
        drift = data["A"]
        diffusion = data["G"]
    except (KeyError, TypeError) as exc:
        raise ModelError(f"system object needs dim/A/G: {exc}") from None
    return LinearSde.from_strings(dim, drift, diffusion, data.get("params", {}))
