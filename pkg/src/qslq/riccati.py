"""Operator Riccati equation, feedback gains, the Lyapunov adjoint and weak-solution pairing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .qsde import CoefficientPath, TimeGrid, propagate_forward


class SingularGainError(ArithmeticError):
    def __init__(self, min_eig: float, index: int | None = None):
        where = "" if index is None else f" at step {index}"
        super().__init__(f"K is not positive definite{where}: min eigenvalue {min_eig:.3e}")
        self.min_eig = min_eig
        self.index = index


class NonHermitianError(ValueError):
    pass


@dataclass(frozen=True)
class InversionPolicy:
    """How to invert K = R + D*PD.

    ``strict`` fails when an eigenvalue sits below ``rel_threshold * max(1, |K|)``;
    ``pinv`` adds ``ridge`` and inverts the eigenvalues above that threshold only.
    """

    mode: Literal["strict", "pinv"] = "strict"
    ridge: float = 0.0
    rel_threshold: float = 1e-10

    def __post_init__(self):
        if self.mode not in ("strict", "pinv"):
            raise ValueError(f"unknown inversion mode {self.mode!r}")
        if self.ridge < 0 or self.rel_threshold <= 0:
            raise ValueError("ridge must be >= 0 and threshold > 0")


STRICT = InversionPolicy()


def herm(X: np.ndarray) -> np.ndarray:
    return (X + np.conj(np.swapaxes(X, -1, -2))) / 2


def hermitian_defect(X: np.ndarray) -> float:
    return float(np.max(np.abs(X - np.conj(np.swapaxes(X, -1, -2))), initial=0.0))


def k_inverse(K: np.ndarray, policy: InversionPolicy = STRICT, index: int | None = None) -> np.ndarray:
    w, V = np.linalg.eigh(herm(K))
    tau = policy.rel_threshold * max(1.0, float(np.abs(w).max(initial=0.0)))
    if policy.mode == "strict":
        if w.size and w.min() <= tau:
            raise SingularGainError(float(w.min()), index)
        inv = 1.0 / w
    else:
        w = w + policy.ridge
        inv = np.where(w > tau, 1.0 / np.where(w > tau, w, 1.0), 0.0)
    return (V * inv) @ V.conj().T


def riccati_rhs(P, A, B, C, D, M, R, policy: InversionPolicy = STRICT, index: int | None = None) -> np.ndarray:
    """``dP/dt = -(PA + A*P + C*PC + M - L*K^{-1}L)`` with ``L = B*P + D*PC``."""
    PC = P @ C
    L = B.conj().T @ P + D.conj().T @ PC
    K = R + D.conj().T @ P @ D
    Kinv = k_inverse(K, policy, index)
    rhs = -(P @ A + A.conj().T @ P + C.conj().T @ PC + M - L.conj().T @ Kinv @ L)
    return herm(rhs)


@dataclass(frozen=True, eq=False)
class RiccatiPath:
    """``P[k]`` approximates ``P(t_k)`` for nodes ``k = 0..N``."""

    P: np.ndarray
    times: np.ndarray
    substeps: int
    fine: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class GainPath:
    """Gains on steps ``k = 0..N-1`` evaluated with ``P_k`` and step-``k`` coefficients."""

    K: np.ndarray
    L: np.ndarray
    Theta: np.ndarray
    min_eig_K: np.ndarray
    residual_gain: np.ndarray


@dataclass(frozen=True, eq=False)
class Gains:
    K: np.ndarray
    L: np.ndarray
    Theta: np.ndarray
    min_eig_K: float
    residual_gain: float


def gains_at(P, B, C, D, R, policy: InversionPolicy = STRICT, index: int | None = None) -> Gains:
    """``K = R + D*PD``, ``L = B*P + D*PC`` and ``Theta = -K^{-1} L``.

    Also reports ``|R Theta + B*P + D*Pi|`` with ``Pi = P(C + D Theta)``.
    """
    K = herm(R + D.conj().T @ P @ D)
    L = B.conj().T @ P + D.conj().T @ P @ C
    Theta = -k_inverse(K, policy, index) @ L
    Pi = P @ (C + D @ Theta)
    res = np.linalg.norm(R @ Theta + B.conj().T @ P + D.conj().T @ Pi, 2) if Theta.size else 0.0
    min_eig = float(np.linalg.eigvalsh(K).min()) if K.size else np.inf
    return Gains(K, L, Theta, min_eig, float(res))


def _rk4_backward(F, P, h):
    k1 = F(P)
    k2 = F(herm(P - h / 2 * k1))
    k3 = F(herm(P - h / 2 * k2))
    k4 = F(herm(P - h * k3))
    return herm(P - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4))


def _check_hermitian(X, name):
    if hermitian_defect(X) > 1e-10 * max(1.0, float(np.abs(X).max(initial=0.0))):
        raise NonHermitianError(f"{name} is not Hermitian")


def integrate_riccati(
    G: np.ndarray,
    coeffs: CoefficientPath,
    M: np.ndarray,
    R: np.ndarray,
    grid: TimeGrid,
    substeps: int = 4,
    policy: InversionPolicy = STRICT,
    keep_fine: bool = False,
) -> tuple[RiccatiPath, GainPath]:
    """Integrate the Riccati equation backward from ``P(T) = G`` with classical RK4.

    Each noise step is split into ``substeps`` RK4 steps; the coefficients are held
    at their step values.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    coeffs.matches(grid)
    _check_hermitian(G, "G")
    N, d = grid.N, grid.dim
    h = grid.dt / substeps
    P = np.zeros((N + 1, d, d), dtype=complex)
    P[N] = herm(np.asarray(G, dtype=complex))
    fine = np.zeros((N * substeps + 1, d, d), dtype=complex) if keep_fine else None
    if keep_fine:
        fine[-1] = P[N]
    for k in range(N - 1, -1, -1):
        A, B, C, D = coeffs.A[k], coeffs.B[k], coeffs.C[k], coeffs.D[k]

        def F(Q, A=A, B=B, C=C, D=D, k=k):
            return riccati_rhs(Q, A, B, C, D, M[k], R[k], policy, k)

        Q = P[k + 1]
        for s in range(substeps):
            Q = _rk4_backward(F, Q, h)
            if keep_fine:
                fine[k * substeps + substeps - 1 - s] = Q
        P[k] = Q
    path = RiccatiPath(P, grid.times, substeps, fine)
    return path, gain_path(path, coeffs, R, policy)


def gain_path(path: RiccatiPath, coeffs: CoefficientPath, R: np.ndarray, policy: InversionPolicy = STRICT) -> GainPath:
    N = coeffs.N
    out = [gains_at(path.P[k], coeffs.B[k], coeffs.C[k], coeffs.D[k], R[k], policy, k) for k in range(N)]
    return GainPath(
        K=np.stack([g.K for g in out]),
        L=np.stack([g.L for g in out]),
        Theta=np.stack([g.Theta for g in out]),
        min_eig_K=np.array([g.min_eig_K for g in out]),
        residual_gain=np.array([g.residual_gain for g in out]),
    )


@dataclass(frozen=True, eq=False)
class AdjointPath:
    phi: np.ndarray
    min_eig_second_order: np.ndarray


def lyapunov_adjoint(
    G: np.ndarray,
    coeffs: CoefficientPath,
    M: np.ndarray,
    R: np.ndarray,
    grid: TimeGrid,
    substeps: int = 4,
) -> AdjointPath:
    """Second-order adjoint with vanishing martingale part.

    Integrates ``phi' = -(A*phi + phi A + C*phi C - M)`` backward from ``phi(T) = -G`` and
    records ``min eig(R_k - D_k* phi_k D_k)`` per step.
    """
    coeffs.matches(grid)
    _check_hermitian(G, "G")
    for k in range(grid.N):
        _check_hermitian(M[k], f"M[{k}]")
        _check_hermitian(R[k], f"R[{k}]")
    N, d = grid.N, grid.dim
    h = grid.dt / substeps
    phi = np.zeros((N + 1, d, d), dtype=complex)
    phi[N] = -herm(np.asarray(G, dtype=complex))
    for k in range(N - 1, -1, -1):
        A, C = coeffs.A[k], coeffs.C[k]

        def F(Q, A=A, C=C, k=k):
            return herm(-(A.conj().T @ Q + Q @ A + C.conj().T @ Q @ C - M[k]))

        Q = phi[k + 1]
        for _ in range(substeps):
            Q = _rk4_backward(F, Q, h)
        phi[k] = Q
    second = np.array(
        [
            np.linalg.eigvalsh(herm(R[k] - coeffs.D[k].conj().T @ phi[k] @ coeffs.D[k])).min()
            for k in range(N)
        ]
    )
    return AdjointPath(phi, second)


@dataclass(frozen=True, eq=False)
class EigenTrace:
    min_eig: np.ndarray
    max_eig: np.ndarray
    flagged: np.ndarray


def positivity_scan(mats: np.ndarray, threshold: float = -1e-8) -> EigenTrace:
    """Spectrum extremes per node; ``flagged`` lists nodes whose minimum is below threshold."""
    mats = np.asarray(mats)
    lo, hi = [], []
    for X in mats:
        w = np.linalg.eigvalsh(herm(X))
        lo.append(w.min())
        hi.append(w.max())
    lo = np.array(lo)
    return EigenTrace(lo, np.array(hi), np.flatnonzero(lo < threshold))


def adapted_range_defect(path: RiccatiPath) -> np.ndarray:
    """``|(I - Pi_k) P_k Pi_k|`` per node."""
    out = []
    for k, P in enumerate(path.P):
        n = 1 << k
        block = P[n:, :n]
        out.append(np.linalg.norm(block, 2) if block.size else 0.0)
    return np.array(out)


@dataclass(frozen=True, eq=False)
class WeakProbes:
    """Initial values in H_t and adapted drift/diffusion sources of shape ``(N, d)``."""

    xi1: np.ndarray
    xi2: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    nu1: np.ndarray
    nu2: np.ndarray


def weak_solution_residual(
    path: RiccatiPath,
    probes: WeakProbes,
    coeffs: CoefficientPath,
    M: np.ndarray,
    R: np.ndarray,
    grid: TimeGrid,
    start: int = 0,
    policy: InversionPolicy = STRICT,
) -> float:
    """Absolute defect of the pairing identity that defines a weak Riccati solution.

    Both probe equations ``dz = (Az + mu) ds + (Cz + nu) dW`` start at node ``start``;
    integrals use left-endpoint quadrature with ``P_k`` and step-``k`` gains.
    """
    coeffs.matches(grid)
    N, dt = grid.N, grid.dt
    z1 = propagate_forward(probes.xi1, start, coeffs.A, coeffs.C, grid, probes.mu1, probes.nu1)
    z2 = propagate_forward(probes.xi2, start, coeffs.A, coeffs.C, grid, probes.mu2, probes.nu2)
    P = path.P
    lhs = np.vdot(z2[N], P[N] @ z1[N])
    rhs = np.vdot(z2[start], P[start] @ z1[start])
    for k in range(start, N):
        g = gains_at(P[k], coeffs.B[k], coeffs.C[k], coeffs.D[k], R[k], policy, k)
        Lz1 = g.L @ z1[k]
        LKL = np.vdot(g.L @ z2[k], k_inverse(g.K, policy, k) @ Lz1)
        lhs += dt * (np.vdot(z2[k], M[k] @ z1[k]) - LKL)
        Pk, Ck = P[k], coeffs.C[k]
        rhs += dt * (
            np.vdot(probes.mu2[k], Pk @ z1[k])
            + np.vdot(z2[k], Pk @ probes.mu1[k])
            + np.vdot(probes.nu2[k], Pk @ (Ck @ z1[k] + probes.nu1[k]))
            + np.vdot(Ck @ z2[k], Pk @ probes.nu1[k])
        )
    return float(abs(lhs - rhs))
