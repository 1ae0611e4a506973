"""Linear-quadratic problem layer: cost, feedback synthesis, the open-loop QP oracle,
first/second-order condition checks and the flow reconstruction of P.

The open-loop oracle deliberately does not reuse the solvers of :mod:`qslq.qsde`; it
propagates unit impulses through its own loop built on the algebra-product matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.linalg import LinAlgError
from scipy.linalg import cho_factor, cho_solve

from . import clifford as cl
from .qsde import (
    CoefficientPath,
    StatePath,
    TimeGrid,
    flow_backward,
    flow_forward,
    flow_forward_parity_form,
    flow_inverse_adjoint,
    solve_backward,
    solve_closed_loop,
    solve_forward,
)
from .riccati import STRICT, GainPath, InversionPolicy, RiccatiPath, gain_path


class UnboundedCostError(ArithmeticError):
    pass


class ConditioningError(ArithmeticError):
    def __init__(self, cond: float, node: int):
        super().__init__(f"dual flow ill-conditioned at node {node}: cond {cond:.3e}")
        self.cond = cond
        self.node = node


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    grid: TimeGrid
    coeffs: CoefficientPath
    M: np.ndarray
    R: np.ndarray
    G: np.ndarray
    eta: np.ndarray
    seed: int | None = None
    structure: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        N, d, m = self.grid.N, self.grid.dim, self.coeffs.m
        self.coeffs.matches(self.grid)
        for name, shape in (("M", (N, d, d)), ("R", (N, m, m)), ("G", (d, d)), ("eta", (d,))):
            a = np.asarray(getattr(self, name), dtype=complex)
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
            object.__setattr__(self, name, a)

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def m(self) -> int:
        return self.coeffs.m

    def positivity_defects(self) -> dict[str, float]:
        def worst(mats):
            return float(min(np.linalg.eigvalsh((X + X.conj().T) / 2).min() for X in mats))

        return {"M": worst(self.M), "R": worst(self.R), "G": worst([self.G])}

    def validate(self, tol: float = 1e-10, strict: bool = False) -> None:
        for name, v in self.positivity_defects().items():
            if v < -tol:
                raise ValueError(f"{name} is not positive semidefinite: min eigenvalue {v:.3e}")
        self.coeffs.check_filtration(strict=strict)
        if not cl.is_adapted(self.eta, 0):
            raise cl.AdaptednessError("initial state must lie in H_0", step=0)


@dataclass(frozen=True)
class CostBreakdown:
    state: float
    control: float
    terminal: float
    total: float
    imag: float


def _cost_from_path(spec: ProblemSpec, x: np.ndarray, u: np.ndarray) -> CostBreakdown:
    dt = spec.grid.dt
    s = sum(np.vdot(x[k], spec.M[k] @ x[k]) for k in range(spec.N)) * dt
    c = sum(np.vdot(u[k], spec.R[k] @ u[k]) for k in range(spec.N)) * dt
    t = np.vdot(x[-1], spec.G @ x[-1])
    tot = s + c + t
    return CostBreakdown(float(s.real), float(c.real), float(t.real), 0.5 * float(tot.real), float(abs(tot.imag)))


def cost(spec: ProblemSpec, u) -> CostBreakdown:
    """Left-endpoint discretisation of the quadratic cost for the control path ``u``."""
    x = solve_forward(spec.eta, u, spec.coeffs, spec.grid)
    return _cost_from_path(spec, x.x, x.u)


@dataclass(frozen=True, eq=False)
class ClosedLoopRun:
    Theta: np.ndarray
    state: StatePath
    u: np.ndarray
    cost: CostBreakdown


def synthesize_and_simulate(
    spec: ProblemSpec, path: RiccatiPath, policy: InversionPolicy = STRICT
) -> ClosedLoopRun:
    gains = gain_path(path, spec.coeffs, spec.R, policy)
    return simulate_feedback(spec, gains.Theta)


def simulate_feedback(spec: ProblemSpec, Theta: np.ndarray) -> ClosedLoopRun:
    x, _ = solve_closed_loop(spec.eta, Theta, spec.coeffs, spec.M, spec.G, spec.grid)
    return ClosedLoopRun(Theta, x, x.u, _cost_from_path(spec, x.x, x.u))


def value(path: RiccatiPath, eta) -> float:
    eta = eta.coeffs if isinstance(eta, cl.CliffordElement) else np.asarray(eta)
    if not cl.is_adapted(eta, 0):
        raise cl.AdaptednessError("value is defined for initial states in H_0", step=0)
    return 0.5 * float(np.vdot(eta, path.P[0] @ eta).real)


# --- open-loop oracle ---------------------------------------------------------------


def _oracle_states(spec: ProblemSpec, U: np.ndarray, with_data: bool) -> np.ndarray:
    """Independent Euler-Ito propagation of a stack of control paths.

    ``U`` has shape ``(N, m, n)``; the result has shape ``(N + 1, d, n)``.  Noise
    enters through the right-multiplication matrix of each increment built from the
    algebra product, not through the solver kernels.
    """
    grid, co = spec.grid, spec.coeffs
    space = grid.space
    n = U.shape[2]
    x = np.zeros((grid.N + 1, grid.dim, n), dtype=complex)
    if with_data:
        x[0] = spec.eta[:, None]
    for k in range(grid.N):
        right = cl.mul_superop(space.gamma(k + 1), "right").entries
        drift = co.A[k] @ x[k] + co.B[k] @ U[k]
        noise = co.C[k] @ x[k] + co.D[k] @ U[k]
        if with_data and co.f is not None:
            drift = drift + co.f[k][:, None]
        if with_data and co.g is not None:
            noise = noise + co.g[k][:, None]
        x[k + 1] = x[k] + grid.dt * drift + right @ noise
    return x


@dataclass(frozen=True, eq=False)
class OpenLoopSolution:
    u: np.ndarray
    J: float
    H: np.ndarray
    g: np.ndarray
    c: float
    residual: float
    flat_directions: np.ndarray

    def objective(self, u) -> float:
        v = np.asarray(u, dtype=complex).ravel()
        return float(0.5 * np.vdot(v, self.H @ v).real + np.vdot(self.g, v).real + self.c)


def _solve_psd(H: np.ndarray, g: np.ndarray, rtol: float) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-norm solution of ``Hu = -g`` for Hermitian PSD ``H`` plus its null directions.

    A Cholesky factor is tried first; a pivot ratio below ``rtol * n`` or a failed
    factorisation falls back to the eigendecomposition.
    """
    n = H.shape[0]
    try:
        L, low = cho_factor(H, lower=True, check_finite=False)
        piv = np.abs(np.diag(L)) ** 2
        if piv.min() > rtol * n * max(1.0, piv.max()):
            return -cho_solve((L, low), g, check_finite=False), np.zeros((n, 0), dtype=complex)
    except LinAlgError:
        pass
    w, V = np.linalg.eigh(H)
    tol = rtol * max(1.0, float(np.abs(w).max(initial=0.0))) * n
    flat = V[:, w <= tol]
    if flat.size and np.linalg.norm(flat.conj().T @ g) > 1e-8 * max(1.0, np.linalg.norm(g)):
        raise UnboundedCostError("cost is unbounded below along a flat direction")
    inv = np.where(w > tol, 1.0 / np.where(w > tol, w, 1.0), 0.0)
    return -(V * inv) @ (V.conj().T @ g), flat


def open_loop_qp(spec: ProblemSpec, rtol: float = 1e-12) -> OpenLoopSolution:
    """Exact minimiser of the discrete cost over stacked controls.

    ``J(u) = 1/2 u*Hu + Re(g*u) + c``; the minimum-norm solution of ``Hu = -g`` is
    returned and flat directions of ``H`` are listed.
    """
    N, m, dt = spec.N, spec.m, spec.grid.dt
    n = N * m
    x0 = _oracle_states(spec, np.zeros((N, m, 1), dtype=complex), with_data=True)[:, :, 0]
    impulses = np.eye(n, dtype=complex).reshape(N, m, n)
    Phi = _oracle_states(spec, impulses, with_data=False)

    H = np.zeros((n, n), dtype=complex)
    g = np.zeros(n, dtype=complex)
    c = 0.0
    for k in range(N):
        H += dt * Phi[k].conj().T @ spec.M[k] @ Phi[k]
        H[k * m:(k + 1) * m, k * m:(k + 1) * m] += dt * spec.R[k]
        g += dt * Phi[k].conj().T @ spec.M[k] @ x0[k]
        c += dt * np.vdot(x0[k], spec.M[k] @ x0[k]).real
    H += Phi[N].conj().T @ spec.G @ Phi[N]
    g += Phi[N].conj().T @ spec.G @ x0[N]
    c += np.vdot(x0[N], spec.G @ x0[N]).real
    H = (H + H.conj().T) / 2

    u, flat = _solve_psd(H, g, rtol)
    res = float(np.linalg.norm(H @ u + g) / max(1.0, np.linalg.norm(g)))
    sol = OpenLoopSolution(u.reshape(N, m), 0.0, H, g, 0.5 * float(c), res, flat)
    return OpenLoopSolution(sol.u, sol.objective(sol.u), H, g, sol.c, res, flat)


def oracle_state(spec: ProblemSpec, u) -> np.ndarray:
    """State path from the oracle's own propagation."""
    return _oracle_states(spec, np.asarray(u, dtype=complex)[:, :, None], with_data=True)[:, :, 0]


# --- optimality conditions ----------------------------------------------------------


def stationarity_residual(spec: ProblemSpec, ubar, xbar) -> float:
    """``max_k |R_k u_k - B_k* y_k - D_k* Y_k|`` with the adjoint driven by ``xbar``."""
    xbar = xbar.x if isinstance(xbar, StatePath) else np.asarray(xbar)
    ubar = np.asarray(ubar, dtype=complex)
    h = -np.einsum("kij,kj->ki", spec.M, xbar[:-1])
    adj = solve_backward(-spec.G @ xbar[-1], h, spec.coeffs, spec.grid)
    co = spec.coeffs
    r = [
        np.linalg.norm(spec.R[k] @ ubar[k] - co.B[k].conj().T @ adj.y[k] - co.D[k].conj().T @ adj.Y[k])
        for k in range(spec.N)
    ]
    return float(max(r))


@dataclass(frozen=True, eq=False)
class VariationReport:
    mode: str
    eps: np.ndarray
    quotients: np.ndarray

    @property
    def worst(self) -> float:
        return float(self.quotients.min()) if self.quotients.size else 0.0


def variation_checks(
    spec: ProblemSpec,
    ubar,
    mode: Literal["convex", "spike"],
    trials: Sequence[np.ndarray],
    eps: Sequence[float] | None = None,
    windows: Sequence[tuple[int, int]] | None = None,
) -> VariationReport:
    """Difference quotients of the cost around ``ubar``.

    Convex mode uses ``ubar + eps (u - ubar)``.  Spike mode replaces ``ubar`` by the
    trial on grid-aligned windows ``[tau, tau + eps)`` given as ``(start, length)``
    pairs in steps; the quotient divides by the window length in time.
    """
    ubar = np.asarray(ubar, dtype=complex)
    base = cost(spec, ubar).total
    N, dt = spec.N, spec.grid.dt
    if mode == "convex":
        eps = np.asarray([0.5, 0.1, 0.01] if eps is None else eps, dtype=float)
        q = np.array([[(cost(spec, ubar + e * (np.asarray(u) - ubar)).total - base) / e for e in eps] for u in trials])
        return VariationReport(mode, eps, q)
    if mode == "spike":
        if windows is None:
            windows = [(s, 1) for s in range(N)]
        for s, L in windows:
            if s < 0 or L < 1 or s + L > N:
                raise ValueError(f"window ({s}, {L}) outside the grid of {N} steps")
        q = np.zeros((len(trials), len(windows)))
        for i, u in enumerate(trials):
            for j, (s, L) in enumerate(windows):
                v = ubar.copy()
                v[s:s + L] = np.asarray(u)[s:s + L]
                q[i, j] = (cost(spec, v).total - base) / (L * dt)
        return VariationReport(mode, np.array([L * dt for _, L in windows]), q)
    raise ValueError(f"unknown variation mode {mode!r}")


def completion_of_squares_residual(spec: ProblemSpec, gains: GainPath, u, J_closed: float | None = None) -> float:
    """``|J(u) - J(Theta x) - 1/2 Re sum dt <K (u - Theta x), u - Theta x>|``."""
    x = solve_forward(spec.eta, u, spec.coeffs, spec.grid)
    Ju = _cost_from_path(spec, x.x, x.u).total
    if J_closed is None:
        J_closed = simulate_feedback(spec, gains.Theta).cost.total
    pen = 0.0
    for k in range(spec.N):
        e = x.u[k] - gains.Theta[k] @ x.x[k]
        pen += spec.grid.dt * np.vdot(e, gains.K[k] @ e).real
    return float(abs(Ju - J_closed - 0.5 * pen))


# --- flow reconstruction -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FlowReconstruction:
    """Per-node comparison of the flow-built operators with the Riccati path.

    ``P_hat[k]`` and ``Pi_hat[k]`` are ``2^k x 2^k`` blocks on H_k from flows started at
    node ``k``.  ``duality[k]`` is the worst ``|X~_j* X_j - I|`` over all flows started at
    ``k``; ``range_error`` follows ``P_hat`` along the flow started at node 0.
    """

    P_hat: list
    Pi_hat: list
    P_error: np.ndarray
    Pi_error: np.ndarray
    hermitian: np.ndarray
    residual_gain: np.ndarray
    residual_pi: np.ndarray
    duality: np.ndarray
    range_error: np.ndarray
    parity_form_gap: float
    max_condition: float


def flow_reconstruct_P(
    spec: ProblemSpec,
    Theta: np.ndarray,
    path: RiccatiPath,
    max_condition: float = 1e8,
) -> FlowReconstruction:
    """Rebuild ``P = -Ybar X~*`` and ``Pi = -Ytil X~*`` from closed-loop flows."""
    grid, co = spec.grid, spec.coeffs
    N = grid.N
    P_hat, Pi_hat = [], []
    P_err, Pi_err, herm_d, r_gain, r_pi, dual = (np.zeros(N) for _ in range(6))
    range_err = np.zeros(N + 1)
    worst_cond = 1.0
    parity_gap = 0.0
    for s in range(N):
        n = 1 << s
        X = flow_forward(Theta, co, grid, s)
        Xt = flow_inverse_adjoint(Theta, co, grid, s)
        Yb, Yt = flow_backward(X, co, spec.M, spec.G, grid, s)
        eye = np.eye(n)
        for k in range(s, N + 1):
            sv = np.linalg.svd(Xt[k], compute_uv=False)
            cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
            worst_cond = max(worst_cond, cond)
            if cond > max_condition:
                raise ConditioningError(cond, k)
            dual[s] = max(dual[s], np.linalg.norm(Xt[k].conj().T @ X[k] - eye, 2))
        Ph = -Yb[s][:n]  # rows of H_s; X~_s is the identity embedding
        Pih = -Yt[s][:n]
        Ccl = (co.C[s] + co.D[s] @ Theta[s])[:n, :n]
        P_hat.append(Ph)
        Pi_hat.append(Pih)
        P_err[s] = np.linalg.norm(Ph - path.P[s][:n, :n], 2)
        Pi_true = (path.P[s] @ (co.C[s] + co.D[s] @ Theta[s]))[:n, :n]
        Pi_err[s] = np.linalg.norm(Pih - Pi_true, 2)
        herm_d[s] = np.linalg.norm(Ph - Ph.conj().T, 2)
        r_gain[s] = np.linalg.norm(
            spec.R[s] @ Theta[s][:, :n] + co.B[s][:n].conj().T @ Ph + co.D[s][:n].conj().T @ Pih, 2
        )
        r_pi[s] = np.linalg.norm(Pih - Ph @ Ccl, 2)
        if s == 0:
            for k in range(N + 1):
                Pk = -Yb[k] @ Xt[k].conj().T
                nk = 1 << k
                range_err[k] = np.linalg.norm((Pk[:nk] - path.P[k][:nk]) @ X[k])
            Xp = flow_forward_parity_form(Theta, co, grid, 0)
            parity_gap = float(np.max(np.abs(Xp - X)))
    return FlowReconstruction(
        P_hat, Pi_hat, P_err, Pi_err, herm_d, r_gain, r_pi, dual, range_err, parity_gap, float(worst_cond)
    )
