import math

import numpy as np
import pytest

from qslq import riccati
from qslq import verify as vf

SMALL = dict(N_list=(3, 4), m_list=(1,), problems_per_cell=1, ladder=(4, 6), random_controls=3)


def test_random_problem_is_deterministic():
    a, b = vf.random_problem(4, 2, 99), vf.random_problem(4, 2, 99)
    for name in ("M", "R", "G", "eta"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    for name in "ABCD":
        assert np.array_equal(getattr(a.coeffs, name), getattr(b.coeffs, name))
    assert not np.array_equal(a.G, vf.random_problem(4, 2, 100).G)


def test_strict_mode_range_defect():
    spec = vf.random_problem(5, 2, 3, "strict")
    for k in range(5):
        n = 1 << k
        assert np.linalg.norm(spec.coeffs.A[k][n:], 2) <= 1e-12
        assert np.linalg.norm(spec.coeffs.C[k][n:], 2) <= 1e-12


def test_scalar_structure():
    spec = vf.random_problem(4, 1, 8, "scalar")
    d = spec.grid.dim
    for k in range(4):
        assert np.array_equal(spec.coeffs.A[k], spec.coeffs.A[k][0, 0] * np.eye(d))
        assert np.array_equal(spec.coeffs.C[k], spec.coeffs.C[k][0, 0] * np.eye(d))
    assert min(spec.positivity_defects().values()) >= 0
    spec.validate()


def test_random_problem_arguments():
    with pytest.raises(ValueError):
        vf.random_problem(1, 1, 0)
    with pytest.raises(ValueError):
        vf.random_problem(3, 0, 0)
    with pytest.raises(ValueError):
        vf.random_problem(3, 1, 0, "other")


def test_derived_seeds_are_stable():
    assert vf.derive_seed(0, 1, 2) == vf.derive_seed(0, 1, 2)
    assert vf.derive_seed(0, 1, 2) != vf.derive_seed(0, 2, 1)
    assert vf.make_rng(5).random() == vf.make_rng(5).random()


def test_jordan_wigner_gammas_anticommute():
    g = vf.jordan_wigner_gammas(3, 0.5)
    for i in range(3):
        for j in range(3):
            anti = g[i] @ g[j] + g[j] @ g[i]
            assert np.allclose(anti, (1.0 if i == j else 0.0) * np.eye(8))


def test_observed_order():
    dts = np.array([0.25, 0.125, 0.0625])
    assert vf.observed_order(dts, 3 * dts) == pytest.approx(1.0)
    assert vf.observed_order(dts, dts**4) == pytest.approx(4.0)
    assert math.isnan(vf.observed_order(dts, [0.0, 1e-14, 0.0]))


def test_suite_config_validation():
    with pytest.raises(ValueError, match="unknown"):
        vf.SuiteConfig(tolerances={"nonsense": 1.0})
    with pytest.raises(ValueError, match="positive"):
        vf.SuiteConfig(tolerances={"algebra": 0.0})
    with pytest.raises(ValueError):
        vf.SuiteConfig(ladder=(4,))
    with pytest.raises(ValueError):
        vf.SuiteConfig(N_list=(12,))
    cfg = vf.SuiteConfig(tolerances={"algebra": 1e-9})
    assert cfg.tolerances["algebra"] == 1e-9 and cfg.tolerances["psd_P"] == 1e-8


def test_pass_flag_follows_tolerance_and_order():
    cfg = vf.SuiteConfig()
    assert vf._result(cfg, "x", "value_function", 4, 1, 0, 0.1, dt=0.25).passed
    r = vf._result(cfg, "x", "value_function", 4, 1, 0, 0.1, dt=0.25, order=0.5)
    assert not r.passed and r.tolerance == 0.75
    assert vf._result(cfg, "x", "algebra", 4, 1, 0, 1e-13).tolerance == cfg.tolerances["algebra"]
    assert vf._result(cfg, "x", "value_function", 4, 1, 0, 0.1, 0.25, math.nan).order is None


def test_zero_dynamics_cell():
    cfg = vf.SuiteConfig()
    results = vf.problem_checks(cfg, vf.zero_dynamics_problem(4, 2), True)
    for r in results:
        if r.check.startswith("weak_solution"):
            continue  # carries the dt^2 <mu1, mu2> quadrature term, see the riccati tests
        assert r.measured <= 1e-10, r


def test_cell_failure_is_captured():
    cfg = vf.SuiteConfig(**SMALL)
    out = vf.run_cell(cfg, ("problem", "bogus", 3, 1, 0))
    assert len(out) == 1 and not out[0].passed and out[0].check.startswith("cell_error:")
    assert math.isnan(out[0].measured)


def test_corrupted_riccati_sign_is_detected(monkeypatch):
    rhs = riccati.riccati_rhs
    monkeypatch.setattr(riccati, "riccati_rhs", lambda *a, **k: -rhs(*a, **k))
    cfg = vf.SuiteConfig()
    results = vf.problem_checks(cfg, vf.random_problem(4, 1, 0), False)
    vfun = next(r for r in results if r.check.startswith("value_function"))
    assert not vfun.passed and vfun.measured > vfun.tolerance


def test_budget_error_before_allocation():
    with pytest.raises(vf.BudgetError):
        vf.convergence_study(N_list=(4, 16))


def test_small_suite_passes_and_is_ordered():
    cfg = vf.SuiteConfig(**SMALL)
    results = vf.run_suite(cfg)
    failed = [r for r in results if not r.passed]
    # a two-point ladder is pre-asymptotic: slopes may dip below the floor, magnitudes may not
    assert all(r.check.endswith(":ladder") and r.measured <= r.tolerance for r in failed)
    assert {r.check for r in failed} <= {"weak_solution:ladder", "flow_Pi:ladder"}
    names = [r.check for r in results]
    assert names[0] == "algebra" and names[-1] == "riccati_substeps:ladder"
    assert results == vf.run_suite(cfg)
