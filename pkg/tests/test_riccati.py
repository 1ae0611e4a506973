import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qslq.qsde import CoefficientPath, TimeGrid
from qslq.riccati import (
    InversionPolicy,
    NonHermitianError,
    RiccatiPath,
    SingularGainError,
    WeakProbes,
    adapted_range_defect,
    gains_at,
    hermitian_defect,
    integrate_riccati,
    k_inverse,
    lyapunov_adjoint,
    positivity_scan,
    weak_solution_residual,
)
from qslq.verify import (
    ScalarParams,
    random_problem,
    scalar_lyapunov_oracle,
    scalar_problem,
    scalar_riccati_oracle,
    substep_study,
    zero_dynamics_problem,
)

params = st.builds(
    ScalarParams,
    a=st.floats(-0.2, 0.1), c=st.floats(0.1, 0.4), b=st.floats(0.2, 0.6), d=st.floats(0.0, 0.3),
    m=st.floats(0.1, 0.5), r=st.floats(0.8, 1.5), g=st.floats(0.2, 0.6),
)


def _solve(spec, substeps=4, policy=InversionPolicy()):
    return integrate_riccati(spec.G, spec.coeffs, spec.M, spec.R, spec.grid, substeps, policy)


def _block_error(path, p):
    return max(np.linalg.norm(P[: 1 << k, : 1 << k] - p[k] * np.eye(1 << k), 2) for k, P in enumerate(path.P))


def test_default_scalar_family_matches_oracle():
    spec = scalar_problem(4)
    path, _ = _solve(spec)
    p = scalar_riccati_oracle(ScalarParams(), spec.grid.times, 1.0)
    assert _block_error(path, p) <= 1e-8


@given(params)
def test_scalar_reduction_riccati_and_lyapunov(prm):
    spec = scalar_problem(4, prm)
    path, _ = _solve(spec)
    assert _block_error(path, scalar_riccati_oracle(prm, spec.grid.times, 1.0)) <= 1e-8
    adj = lyapunov_adjoint(spec.G, spec.coeffs, spec.M, spec.R, spec.grid, 4)
    q = scalar_lyapunov_oracle(prm, spec.grid.times, 1.0)
    assert max(np.linalg.norm(adj.phi[k] - q[k] * np.eye(16), 2) for k in range(5)) <= 1e-8


def test_rk4_substep_order():
    study = substep_study()
    assert study["order"] >= 3.5


@given(st.integers(2, 4), st.integers(1, 2), st.integers(0, 2**32 - 1))
def test_random_problem_solution_hermitian_psd(N, m, seed):
    spec = random_problem(N, m, seed)
    path, gains = _solve(spec)
    assert hermitian_defect(path.P) <= 1e-10
    assert positivity_scan(path.P).min_eig.min() >= -1e-8
    assert gains.min_eig_K.min() > 0
    assert gains.residual_gain.max() <= 1e-10


def test_zero_dynamics_keeps_terminal_value():
    spec = zero_dynamics_problem(3, 2, g=0.7)
    path, gains = _solve(spec)
    assert np.array_equal(path.P, np.stack([0.7 * np.eye(8)] * 4))
    assert np.all(gains.Theta == 0)
    assert np.all(adapted_range_defect(path) == 0)


def test_non_hermitian_terminal_rejected():
    spec = zero_dynamics_problem(2)
    G = np.triu(np.ones((4, 4)))
    with pytest.raises(NonHermitianError):
        integrate_riccati(G, spec.coeffs, spec.M, spec.R, spec.grid)


def test_singular_gain_strict_and_pinv():
    spec = zero_dynamics_problem(2, 1, r=0.0)
    with pytest.raises(SingularGainError) as info:
        _solve(spec)
    assert info.value.index == 1
    path, gains = _solve(spec, policy=InversionPolicy("pinv"))
    assert np.all(gains.Theta == 0)


def test_k_inverse_policies():
    K = np.diag([2.0, 1e-14])
    with pytest.raises(SingularGainError):
        k_inverse(K)
    assert np.allclose(k_inverse(K, InversionPolicy("pinv")), np.diag([0.5, 0.0]))
    assert np.allclose(k_inverse(K, InversionPolicy("pinv", ridge=1.0)), np.diag([1 / 3, 1 / (1 + 1e-14)]))
    with pytest.raises(ValueError):
        InversionPolicy("other")


def test_gains_stationarity_identity():
    rng = np.random.default_rng(0)
    d, m = 4, 2
    S = rng.standard_normal((d, d))
    P = S.T @ S
    B, D = rng.standard_normal((d, m)), rng.standard_normal((d, m))
    C = rng.standard_normal((d, d))
    g = gains_at(P, B, C, D, np.eye(m))
    assert g.residual_gain <= 1e-12
    assert np.allclose(g.Theta, -np.linalg.solve(np.eye(m) + D.T @ P @ D, B.T @ P + D.T @ P @ C))


def test_second_order_nonnegative_for_psd_data():
    spec = random_problem(4, 2, 3)
    adj = lyapunov_adjoint(spec.G, spec.coeffs, spec.M, spec.R, spec.grid)
    assert adj.min_eig_second_order.min() >= -1e-8
    assert positivity_scan(-adj.phi).min_eig.min() >= -1e-10


def test_positivity_scan_flags():
    mats = np.stack([np.eye(2), np.diag([1.0, -1.0])])
    trace = positivity_scan(mats)
    assert list(trace.flagged) == [1]
    assert trace.max_eig.tolist() == [1.0, 1.0]


def _probes(rng, N, d, with_mu=True):
    def path():
        v = np.zeros((N, d), dtype=complex)
        for k in range(N):
            v[k, : 1 << k] = rng.standard_normal(1 << k) / np.sqrt(1 << k)
        return v

    e0 = np.eye(d, 1)[:, 0]
    mu1, mu2 = (path(), path()) if with_mu else (np.zeros((N, d)), np.zeros((N, d)))
    return WeakProbes(0.8 * e0, -1.1 * e0, mu1, mu2, path(), path())


def test_weak_solution_zero_dynamics_is_exact_without_drift_sources():
    spec = zero_dynamics_problem(4, g=0.6)
    path, _ = _solve(spec)
    probes = _probes(np.random.default_rng(1), 4, 16, with_mu=False)
    assert weak_solution_residual(path, probes, spec.coeffs, spec.M, spec.R, spec.grid) <= 1e-13


def test_weak_solution_zero_dynamics_quadrature_term():
    # with drift sources the only defect is the dt^2 <mu1, mu2> term of each Euler step
    spec = zero_dynamics_problem(4, g=0.6)
    path, _ = _solve(spec)
    pr = _probes(np.random.default_rng(2), 4, 16)
    dt = spec.grid.dt
    expected = abs(0.6 * dt**2 * sum(np.vdot(pr.mu2[k], pr.mu1[k]) for k in range(4)))
    got = weak_solution_residual(path, pr, spec.coeffs, spec.M, spec.R, spec.grid)
    assert got == pytest.approx(expected, rel=1e-10)


def test_weak_solution_residual_small_on_scalar_family():
    for N in (4, 6):
        spec = scalar_problem(N)
        path, _ = _solve(spec)
        pr = _probes(np.random.default_rng(N), N, spec.grid.dim)
        assert weak_solution_residual(path, pr, spec.coeffs, spec.M, spec.R, spec.grid) <= 3.0 * spec.grid.dt


def test_weak_solution_detects_wrong_path():
    spec = scalar_problem(6)
    path, _ = _solve(spec)
    wrong = RiccatiPath(path.P * 3.0, path.times, path.substeps)
    pr = _probes(np.random.default_rng(3), 6, 64)
    good = weak_solution_residual(path, pr, spec.coeffs, spec.M, spec.R, spec.grid)
    bad = weak_solution_residual(wrong, pr, spec.coeffs, spec.M, spec.R, spec.grid)
    assert bad > 10 * good


def test_keep_fine_grid():
    spec = scalar_problem(3)
    path, _ = integrate_riccati(spec.G, spec.coeffs, spec.M, spec.R, spec.grid, 2, keep_fine=True)
    assert path.fine.shape == (7, 8, 8)
    assert np.array_equal(path.fine[::2], path.P)
    with pytest.raises(ValueError):
        integrate_riccati(spec.G, spec.coeffs, spec.M, spec.R, spec.grid, 0)


def test_coefficient_grid_mismatch():
    spec = scalar_problem(3)
    with pytest.raises(ValueError):
        integrate_riccati(spec.G, spec.coeffs, spec.M, spec.R, TimeGrid(0, 1, 2))
    assert isinstance(spec.coeffs, CoefficientPath)
