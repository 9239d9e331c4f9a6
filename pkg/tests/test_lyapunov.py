import math

import numpy as np
import pytest

from msd.lyapunov import (
    LyapunovError,
    chi_estimate,
    duality_defect,
    regularity_estimate,
    spectrum,
)
from msd.model import LinearSde, gallery


def _diag_system(*entries, g=0.0):
    n = len(entries)
    a = [[str(entries[i]) if i == j else "0" for j in range(n)] for i in range(n)]
    gm = [[str(g) if i == j else "0" for j in range(n)] for i in range(n)]
    return LinearSde.from_strings(n, a, gm)


def test_chi_gbm_ode():
    est = chi_estimate(gallery("gbm"), [1.0], horizon=50.0)
    assert est.chi == pytest.approx(-1.75, abs=1e-6)
    assert est.method == "ode" and est.stderr is None
    assert est.window == (25.0, 50.0)
    assert all(t >= 25.0 for t, _ in est.tail_values)


def test_chi_zero_system_exact():
    sys_ = _diag_system(0, 0)
    est = chi_estimate(sys_, [1.0, 1.0], horizon=10.0)
    assert est.chi == 0.0


def test_chi_second_axis():
    est = chi_estimate(_diag_system(-1, -2), [0.0, 1.0], horizon=30.0)
    assert est.chi == pytest.approx(-4.0, abs=1e-6)


def test_chi_scale_invariance_exact():
    sys_ = _diag_system(-1, -2)
    u = np.array([0.3, 0.7])
    base = chi_estimate(sys_, u, horizon=20.0)
    doubled = chi_estimate(sys_, 2.0 * u, horizon=20.0)
    assert doubled.chi == base.chi
    assert np.array_equal(doubled.values, base.values)
    scaled = chi_estimate(sys_, 3.0 * u, horizon=20.0)
    assert scaled.chi == pytest.approx(base.chi, abs=1e-10)


def test_chi_validation():
    sys_ = gallery("gbm")
    with pytest.raises(LyapunovError, match="nonzero"):
        chi_estimate(sys_, [0.0], horizon=10.0)
    with pytest.raises(LyapunovError, match="horizon"):
        chi_estimate(sys_, [1.0], horizon=0.0)
    with pytest.raises(LyapunovError, match="length 1"):
        chi_estimate(sys_, [1.0, 2.0], horizon=10.0)
    with pytest.raises(LyapunovError, match="method"):
        chi_estimate(sys_, [1.0], horizon=10.0, method="exact")


def test_chi_mc_route_gbm():
    est = chi_estimate(gallery("gbm"), [1.0], horizon=8.0, method="mc",
                       dt=1e-2, paths=10_000, seed=6)
    assert est.method == "mc" and est.stderr is not None and est.stderr > 0.0
    assert abs(est.chi - (-1.75)) <= max(0.05, 3.0 * est.stderr)


def test_chi_mc_agrees_with_ode():
    sys_ = gallery("diag-2x2")
    u = np.array([1.0, 1.0]) / math.sqrt(2.0)
    ode = chi_estimate(sys_, u, horizon=8.0)
    mc = chi_estimate(sys_, u, horizon=8.0, method="mc", dt=1e-2, paths=10_000, seed=8)
    assert abs(ode.chi - mc.chi) <= max(0.05, 3.0 * mc.stderr)


def test_spectrum_two_blocks():
    # Random probes carry a log(c^2)/t transient toward the dominant
    # exponent; the horizon must be long enough to flush it below the
    # cluster tolerance.
    est = spectrum(_diag_system(-1, -2), horizon=200.0, trials=4, seed=3)
    assert len(est.values) == 2
    assert est.values[0] == pytest.approx(-4.0, abs=0.05)
    assert est.values[1] == pytest.approx(-2.0, abs=0.05)
    assert est.multiplicities == (1, 1)
    assert est.split_index == 2
    assert len(est.per_vector) == 4


def test_spectrum_scalar():
    est = spectrum(gallery("gbm"), horizon=40.0, trials=1)
    assert est.values == (pytest.approx(-1.75, abs=1e-6),)
    assert est.multiplicities == (1,)
    assert est.split_index == 1


def test_spectrum_zero_three_dim():
    est = spectrum(_diag_system(0, 0, 0), horizon=10.0, trials=5, seed=1)
    assert len(est.values) == 1
    assert est.values[0] == pytest.approx(0.0, abs=1e-9)
    assert sum(est.multiplicities) == 3
    assert est.split_index == 0


def test_spectrum_requires_enough_trials():
    with pytest.raises(LyapunovError, match="trials"):
        spectrum(_diag_system(-1, -2), horizon=10.0, trials=1)


def test_duality_gbm_sum():
    # chi = 2a + b^2 and the adjoint gives -2a + 3b^2; the sum is 4b^2.
    rep = duality_defect(gallery("gbm"), np.eye(1), np.eye(1), horizon=40.0)
    assert rep.sums[0] == pytest.approx(1.0, abs=0.02)
    assert rep.chis[0] == pytest.approx(-1.75, abs=1e-6)
    assert rep.chis_adjoint[0] == pytest.approx(2.75, abs=1e-6)


def test_duality_deterministic_diagonal_zero_sums():
    sys_ = gallery("diag-2x2", g1=0.0, g2=0.0)
    rep = duality_defect(sys_, np.eye(2), np.eye(2), horizon=30.0)
    # Forward and adjoint runs discretize differently, so the cancellation
    # is only as good as the integrator.
    np.testing.assert_allclose(rep.sums, 0.0, atol=1e-7)


def test_duality_rejects_non_dual_bases():
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(LyapunovError, match="not dual"):
        duality_defect(gallery("diag-2x2"), np.eye(2), swap, horizon=5.0)


def test_duality_pairing_drift_small():
    rep = duality_defect(gallery("diag-2x2"), np.eye(2), np.eye(2), horizon=10.0,
                         seed=4, drift_dt=1e-3, drift_paths=4)
    assert 0.0 <= rep.max_pairing_drift <= 0.05


@pytest.mark.parametrize("name,t_start,horizon", [
    ("gbm", 0.0, 30.0),
    ("diag-2x2", 0.0, 30.0),
    ("perron-ode", 1.0, 50.0),
    ("perron-sde", 1.0, 50.0),
])
def test_duality_sums_nonnegative_ode(name, t_start, horizon):
    # Pointwise E||u||^2 E||v||^2 >= 1 forces every ODE-route sum >= 0.
    sys_ = gallery(name)
    rep = duality_defect(sys_, np.eye(sys_.dim), np.eye(sys_.dim), horizon,
                         t_start=t_start)
    assert np.all(rep.sums >= -1e-9)


def test_regularity_gbm():
    est = regularity_estimate(gallery("gbm"), [(np.eye(1), np.eye(1))], horizon=40.0)
    assert est.gamma_upper_estimate == pytest.approx(1.0, abs=0.02)
    assert est.kind == "upper"


def test_regularity_deterministic_diagonal():
    sys_ = gallery("diag-2x2", g1=0.0, g2=0.0)
    est = regularity_estimate(sys_, [(np.eye(2), np.eye(2))], horizon=30.0)
    assert est.gamma_upper_estimate == pytest.approx(0.0, abs=1e-7)


def test_regularity_perron_ode_window():
    sys_ = gallery("perron-ode")
    est = regularity_estimate(sys_, [(np.eye(2), np.eye(2))], horizon=600.0,
                              t_start=1.0, dt=2e-2)
    assert -0.05 <= est.gamma_upper_estimate <= 8.3


def test_regularity_picks_best_pair():
    sys_ = gallery("diag-2x2", g1=0.0, g2=0.0)
    theta = 0.6
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    est = regularity_estimate(sys_, [(np.eye(2), np.eye(2)), (rot, rot)], horizon=30.0)
    # Mixed directions pick up the dominant exponent both ways, so the
    # rotated pair cannot beat the canonical one here.
    assert est.gamma_upper_estimate == min(est.per_pair_max)
    assert est.per_pair_max[0] <= est.per_pair_max[1] + 1e-12


def test_regularity_requires_candidates():
    with pytest.raises(LyapunovError, match="candidate"):
        regularity_estimate(gallery("gbm"), [], horizon=10.0)
