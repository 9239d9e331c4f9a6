"""Mean-square dichotomy toolkit for linear stochastic differential equations.

The package simulates linear Ito systems du = A(t)u dt + G(t)u dw together
with their coupled inverses, estimates second-moment Lyapunov exponents and
regularity, brackets the nonuniformity degree from the coefficients, fits
exponential dichotomy envelopes to measured moment surfaces, and runs the
perturbation experiments (stability under small nonlinearities, the
oscillating instability example). The ``msd`` console script exposes the
same surfaces with deterministic JSON and CSV output.

Submodules hold the full API; the names re-exported here cover the common
workflow: build or pick a system (``model``), simulate and integrate
moments (``engines``), estimate exponents (``lyapunov``), bound and
triangularize (``bounds``), fit and transport envelopes (``dichotomy``),
and perturb (``perturb``).
"""

from msd.bounds import bounds_report, lower_bound, triangularize_paths, upper_bound
from msd.dichotomy import (
    decoupling_check,
    dichotomy_surface,
    fit_envelope,
    pair_grid,
    predicted_exponent,
    similarity_propagate,
    uniform_witness,
)
from msd.engines import (
    TimeGrid,
    mc_second_moment,
    moment_ode,
    simulate_fundamental,
    transition_second_moment,
    triangular_fundamental,
)
from msd.lyapunov import chi_estimate, duality_defect, regularity_estimate, spectrum
from msd.model import (
    GALLERY_NAMES,
    LinearSde,
    PerturbationSpec,
    PerturbedSde,
    gallery,
    make_projector,
)
from msd.perturb import (
    check_condition_42,
    perron_instability,
    simulate_perturbed,
    stability_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "GALLERY_NAMES",
    "LinearSde",
    "PerturbationSpec",
    "PerturbedSde",
    "TimeGrid",
    "bounds_report",
    "check_condition_42",
    "chi_estimate",
    "decoupling_check",
    "dichotomy_surface",
    "duality_defect",
    "fit_envelope",
    "gallery",
    "lower_bound",
    "make_projector",
    "mc_second_moment",
    "moment_ode",
    "pair_grid",
    "perron_instability",
    "predicted_exponent",
    "regularity_estimate",
    "similarity_propagate",
    "simulate_fundamental",
    "simulate_perturbed",
    "spectrum",
    "stability_experiment",
    "transition_second_moment",
    "triangular_fundamental",
    "triangularize_paths",
    "uniform_witness",
    "upper_bound",
    "__version__",
]
