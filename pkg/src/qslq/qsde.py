"""Forward, backward and coupled QSDE solvers on the discrete Clifford space.

All solvers work on coefficient arrays in the monomial ONB.  A path of elements is an
array of shape ``(N + 1, d)`` indexed by absolute grid node; rows before the start node
``k0`` are zero.  Operator flows are column stacks of shape ``(N + 1, d, n0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clifford import (
    AdaptednessError,
    CliffordElement,
    CliffordSpace,
    _parity_signs,
    adapted_defect,
    is_adapted,
    right_gamma,
)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"need at least one step, got N={self.N}")
        if not self.T > self.t0:
            raise ValueError(f"horizon must satisfy T > t0, got [{self.t0}, {self.T}]")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.N

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.N + 1)

    @property
    def space(self) -> CliffordSpace:
        return CliffordSpace(self.N, self.dt)

    @property
    def dim(self) -> int:
        return 1 << self.N


def _stack(x, shape, name):
    a = np.asarray(x, dtype=complex)
    if a.shape != shape:
        raise ShapeError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class CoefficientPath:
    """Per-step coefficients, piecewise constant on each noise step.

    ``A, C`` have shape ``(N, d, d)``; ``B, D`` have shape ``(N, d, m)``; the optional
    sources ``f, g`` have shape ``(N, d)``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    f: np.ndarray | None = None
    g: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=complex)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ShapeError(f"A must have shape (N, d, d), got {A.shape}")
        N, d, _ = A.shape
        B = np.asarray(self.B, dtype=complex)
        if B.ndim != 3 or B.shape[:2] != (N, d):
            raise ShapeError(f"B must have shape (N, d, m), got {B.shape}")
        m = B.shape[2]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", _stack(self.C, (N, d, d), "C"))
        object.__setattr__(self, "D", _stack(self.D, (N, d, m), "D"))
        for name in ("f", "g"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _stack(v, (N, d), name))

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[2]

    @classmethod
    def zeros(cls, grid: TimeGrid, m: int) -> "CoefficientPath":
        N, d = grid.N, grid.dim
        z = np.zeros((N, d, d))
        return cls(z, np.zeros((N, d, m)), z, np.zeros((N, d, m)))

    def matches(self, grid: TimeGrid) -> None:
        if (self.N, self.dim) != (grid.N, grid.dim):
            raise ShapeError(f"coefficients sized for N={self.N}, grid has N={grid.N}")

    def filtration_defects(self, strict: bool = False) -> np.ndarray:
        """Per-step worst leakage of the coefficient maps out of H_k."""
        out = np.zeros(self.N)
        for k in range(self.N):
            n = 1 << k
            parts = [
                self.A[k][n:, :n],
                self.C[k][n:, :n],
                self.B[k][n:],
                self.D[k][n:],
            ]
            if strict:
                parts += [self.A[k][n:], self.C[k][n:]]
            for name in ("f", "g"):
                v = getattr(self, name)
                if v is not None:
                    parts.append(v[k][n:])
            out[k] = max(np.linalg.norm(p, 2) if p.ndim == 2 and p.size else np.linalg.norm(p) for p in parts)
        return out

    def check_filtration(self, strict: bool = False, rtol: float = 1e-10) -> None:
        defects = self.filtration_defects(strict)
        scale = max(1.0, *(float(np.max(np.abs(x), initial=0.0)) for x in (self.A, self.B, self.C, self.D)))
        bad = np.flatnonzero(defects > rtol * scale)
        if bad.size:
            k = int(bad[0])
            raise AdaptednessError(f"coefficients leak out of H_{k}: defect {defects[k]:.3e}", step=k)


@dataclass(frozen=True, eq=False)
class StatePath:
    x: np.ndarray
    u: np.ndarray
    k0: int = 0

    def element(self, k: int, space: CliffordSpace) -> CliffordElement:
        return CliffordElement(space, self.x[k])


@dataclass(frozen=True, eq=False)
class BackwardSolution:
    y: np.ndarray
    Y: np.ndarray
    h: np.ndarray | None = None
    k0: int = 0


@dataclass(frozen=True, eq=False)
class FlowBundle:
    """Operator flows started on H_{k0}; arrays are indexed by absolute node."""

    k0: int
    X: np.ndarray
    Xt: np.ndarray
    Ybar: np.ndarray | None = None
    Ytil: np.ndarray | None = None
    info: dict = field(default_factory=dict)


def _as_coeffs(v, d: int) -> np.ndarray:
    if isinstance(v, CliffordElement):
        return v.coeffs
    a = np.asarray(v, dtype=complex)
    if a.shape[0] != d:
        raise ShapeError(f"expected leading dimension {d}, got {a.shape}")
    return a


def propagate_forward(
    X0: np.ndarray,
    k0: int,
    drift: np.ndarray,
    diffusion: np.ndarray,
    grid: TimeGrid,
    drift_src: np.ndarray | None = None,
    diff_src: np.ndarray | None = None,
) -> np.ndarray:
    """Euler-Ito recursion for a column stack.

    ``X_{k+1} = X_k + dt (drift_k X_k + a_k) + (diffusion_k X_k + b_k) gamma_{k+1}``,
    with the integrand multiplied on the left of the increment.
    """
    N, dt, d = grid.N, grid.dt, grid.dim
    X0 = np.asarray(X0, dtype=complex)
    vec = X0.ndim == 1
    X0 = X0[:, None] if vec else X0
    out = np.zeros((N + 1, d, X0.shape[1]), dtype=complex)
    out[k0] = X0
    for k in range(k0, N):
        a = drift[k] @ out[k]
        b = diffusion[k] @ out[k]
        if drift_src is not None:
            a = a + drift_src[k].reshape(d, -1)
        if diff_src is not None:
            b = b + diff_src[k].reshape(d, -1)
        out[k + 1] = out[k] + dt * a + right_gamma(b, N, k + 1, dt)
    return out[..., 0] if vec else out


def extract_martingale(y_next: np.ndarray, k: int, grid: TimeGrid) -> np.ndarray:
    """``Y_k`` in H_k with ``y_{k+1} = E_k y_{k+1} + Y_k gamma_{k+1}``."""
    lo, hi = 1 << k, 1 << (k + 1)
    Y = np.zeros_like(y_next)
    Y[:lo] = y_next[lo:hi] / np.sqrt(grid.dt)
    return Y


def propagate_backward(
    Xi: np.ndarray,
    k0: int,
    A: np.ndarray,
    C: np.ndarray,
    grid: TimeGrid,
    h: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Explicit BQSDE recursion ``y_k = E_k(y_{k+1} + dt(A* y_{k+1} + C* Y_k + h_k))``."""
    N, dt, d = grid.N, grid.dt, grid.dim
    Xi = np.asarray(Xi, dtype=complex)
    vec = Xi.ndim == 1
    Xi = Xi[:, None] if vec else Xi
    n = Xi.shape[1]
    y = np.zeros((N + 1, d, n), dtype=complex)
    Y = np.zeros((N, d, n), dtype=complex)
    y[N] = Xi
    for k in range(N - 1, k0 - 1, -1):
        yn = y[k + 1]
        Y[k] = extract_martingale(yn, k, grid)
        v = yn + dt * (A[k].conj().T @ yn + C[k].conj().T @ Y[k])
        if h is not None:
            v = v + dt * h[k].reshape(d, -1)
        v[1 << k:] = 0
        y[k] = v
    if vec:
        return y[..., 0], Y[..., 0]
    return y, Y


def _controls(u, coeffs: CoefficientPath) -> np.ndarray:
    if u is None:
        return np.zeros((coeffs.N, coeffs.m), dtype=complex)
    u = np.asarray(u, dtype=complex)
    if u.shape != (coeffs.N, coeffs.m):
        raise ShapeError(f"control path must have shape {(coeffs.N, coeffs.m)}, got {u.shape}")
    return u


def solve_forward(eta, u, coeffs: CoefficientPath, grid: TimeGrid, k0: int = 0) -> StatePath:
    """State equation driven by a deterministic control path ``u`` of shape ``(N, m)``."""
    coeffs.matches(grid)
    x0 = _as_coeffs(eta, grid.dim)
    if not is_adapted(x0, k0):
        raise AdaptednessError(
            f"initial state not in H_{k0}: defect {adapted_defect(x0, k0):.3e}", step=k0
        )
    u = _controls(u, coeffs)
    a = np.einsum("kdm,km->kd", coeffs.B, u)
    b = np.einsum("kdm,km->kd", coeffs.D, u)
    if coeffs.f is not None:
        a = a + coeffs.f
    if coeffs.g is not None:
        b = b + coeffs.g
    x = propagate_forward(x0, k0, coeffs.A, coeffs.C, grid, a, b)
    return StatePath(x, u, k0)


def _check_source(h: np.ndarray | None, grid: TimeGrid, k0: int) -> np.ndarray | None:
    if h is None:
        return None
    h = np.asarray(h, dtype=complex)
    if h.shape[:2] != (grid.N, grid.dim):
        raise ShapeError(f"source must have leading shape {(grid.N, grid.dim)}, got {h.shape}")
    for k in range(k0, grid.N):
        if not is_adapted(h[k], k):
            raise AdaptednessError(f"source not adapted at step {k}", step=k)
    return h


def solve_backward(xi, h, coeffs: CoefficientPath, grid: TimeGrid, k0: int = 0) -> BackwardSolution:
    coeffs.matches(grid)
    xi = _as_coeffs(xi, grid.dim)
    h = _check_source(h, grid, k0)
    y, Y = propagate_backward(xi, k0, coeffs.A, coeffs.C, grid, h)
    return BackwardSolution(y, Y, h, k0)


def closed_loop_coefficients(Theta: np.ndarray, coeffs: CoefficientPath) -> tuple[np.ndarray, np.ndarray]:
    Theta = np.asarray(Theta, dtype=complex)
    expected = (coeffs.N, coeffs.m, coeffs.dim)
    if Theta.shape != expected:
        raise ShapeError(f"feedback must have shape {expected}, got {Theta.shape}")
    return coeffs.A + coeffs.B @ Theta, coeffs.C + coeffs.D @ Theta


def solve_closed_loop(
    sigma,
    Theta: np.ndarray,
    coeffs: CoefficientPath,
    M: np.ndarray,
    G: np.ndarray,
    grid: TimeGrid,
    k0: int = 0,
) -> tuple[StatePath, BackwardSolution]:
    """Forward run under ``u = Theta x`` followed by the adjoint equation.

    The adjoint has drift ``A* y + C* Y - M x`` and terminal value ``-G x_N``.
    """
    coeffs.matches(grid)
    Acl, Ccl = closed_loop_coefficients(Theta, coeffs)
    x0 = _as_coeffs(sigma, grid.dim)
    if not is_adapted(x0, k0):
        raise AdaptednessError(f"initial state not in H_{k0}", step=k0)
    x = propagate_forward(x0, k0, Acl, Ccl, grid, coeffs.f, coeffs.g)
    u = np.zeros((grid.N, coeffs.m), dtype=complex)
    for k in range(k0, grid.N):
        u[k] = Theta[k] @ x[k]
    h = -np.einsum("kij,kj->ki", M, x[:-1])
    y, Y = propagate_backward(-G @ x[-1], k0, coeffs.A, coeffs.C, grid, h)
    return StatePath(x, u, k0), BackwardSolution(y, Y, h, k0)


def _identity_embedding(grid: TimeGrid, k0: int) -> np.ndarray:
    return np.eye(grid.dim, 1 << k0, dtype=complex)


def flow_forward(Theta: np.ndarray, coeffs: CoefficientPath, grid: TimeGrid, k0: int = 0) -> np.ndarray:
    """Column ``j`` at node ``k`` is the closed-loop state started from ``e_j`` in H_{k0}."""
    Acl, Ccl = closed_loop_coefficients(Theta, coeffs)
    return propagate_forward(_identity_embedding(grid, k0), k0, Acl, Ccl, grid)


def flow_inverse_adjoint(Theta: np.ndarray, coeffs: CoefficientPath, grid: TimeGrid, k0: int = 0) -> np.ndarray:
    """Columnwise solution of the dual equation.

    ``dx~ = (-A - B Theta + (C + D Theta)^2)* x~ dt - (C + D Theta)* x~ dW``.
    """
    Acl, Ccl = closed_loop_coefficients(Theta, coeffs)
    drift = np.conj(np.swapaxes(-Acl + Ccl @ Ccl, 1, 2))
    diffusion = -np.conj(np.swapaxes(Ccl, 1, 2))
    return propagate_forward(_identity_embedding(grid, k0), k0, drift, diffusion, grid)


def flow_backward(
    X: np.ndarray, coeffs: CoefficientPath, M: np.ndarray, G: np.ndarray, grid: TimeGrid, k0: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint columns ``(Ybar, Ytil)`` driven by the forward flow columns."""
    h = -M @ X[:-1]
    return propagate_backward(-(G @ X[-1]), k0, coeffs.A, coeffs.C, grid, h)


def flow_forward_parity_form(
    Theta: np.ndarray, coeffs: CoefficientPath, grid: TimeGrid, k0: int = 0
) -> np.ndarray:
    """Experimental propagator for the parity-inserted operator diffusion.

    The increment is read as ``gamma_{k+1} (C + D Theta) X_k Upsilon``, i.e. the noise
    multiplies from the left after a parity flip of the input.  Agreement with
    :func:`flow_forward` is reported by the verification suite, not asserted.
    """
    Acl, Ccl = closed_loop_coefficients(Theta, coeffs)
    N, dt = grid.N, grid.dt
    ups = _parity_signs(N)
    X = np.zeros((N + 1, grid.dim, 1 << k0), dtype=complex)
    X[k0] = _identity_embedding(grid, k0)
    ups_in = ups[: 1 << k0]
    for k in range(k0, N):
        Z = Ccl[k] @ X[k] * ups_in[None, :]
        # gamma z = Upsilon(z) gamma for z in H_k
        X[k + 1] = X[k] + dt * Acl[k] @ X[k] + right_gamma(ups[:, None] * Z, N, k + 1, dt)
    return X


def ito_pairing_residual(y: BackwardSolution, x: StatePath, coeffs: CoefficientPath, grid: TimeGrid) -> float:
    """Defect of the discrete product rule for ``<y, x>``.

    Compares ``<y_N, x_N> - <y_k0, x_k0>`` with the sum over steps of
    ``dt (<y_k, B u_k + f_k> - <h_k, x_k> + <Y_k, D u_k + g_k>)``.
    """
    coeffs.matches(grid)
    if y.y.shape != x.x.shape:
        raise ShapeError(f"paths differ in shape: {y.y.shape} vs {x.x.shape}")
    k0 = max(x.k0, y.k0)
    total = 0j
    for k in range(k0, grid.N):
        a = coeffs.B[k] @ x.u[k]
        b = coeffs.D[k] @ x.u[k]
        if coeffs.f is not None:
            a = a + coeffs.f[k]
        if coeffs.g is not None:
            b = b + coeffs.g[k]
        term = np.vdot(y.y[k], a) + np.vdot(y.Y[k], b)
        if y.h is not None:
            term -= np.vdot(y.h[k], x.x[k])
        total += grid.dt * term
    lhs = np.vdot(y.y[-1], x.x[-1]) - np.vdot(y.y[k0], x.x[k0])
    return float(abs(lhs - total))


@dataclass(frozen=True, eq=False)
class GalerkinCurve:
    """Errors of level-``l`` truncated solutions, ``l = 1 .. 2^N`` (index ``l - 1``)."""

    levels: np.ndarray
    forward: np.ndarray
    backward_y: np.ndarray
    backward_Y: np.ndarray
    reconstruction: np.ndarray

    def monotone(self, which: str = "reconstruction", slack: float = 1e-12) -> bool:
        e = getattr(self, which)
        return bool(np.all(np.diff(e) <= slack))


def galerkin_truncate(
    coeffs: CoefficientPath,
    grid: TimeGrid,
    xi,
    level: int,
    eta=None,
    k0: int = 0,
) -> dict:
    """Solve with data projected onto the first ``level`` ONB vectors.

    The forward equation uses the truncated initial state (controls and sources
    removed, they cancel in the error by linearity) and the backward equation the
    truncated terminal value.  Returns sup-norm errors against the full solutions.
    """
    d = grid.dim
    if not 1 <= level <= d:
        raise ValueError(f"level {level} outside [1, {d}]")
    curve = galerkin_curve(coeffs, grid, xi, eta, k0, levels=[level])
    return {
        "level": level,
        "forward": float(curve.forward[0]),
        "backward_y": float(curve.backward_y[0]),
        "backward_Y": float(curve.backward_Y[0]),
        "reconstruction": float(curve.reconstruction[0]),
    }


def galerkin_curve(coeffs: CoefficientPath, grid: TimeGrid, xi, eta=None, k0: int = 0, levels=None) -> GalerkinCurve:
    """Error curve over truncation levels, computed from the discarded tails by linearity.

    ``reconstruction`` measures the exactly representable part of the backward
    solution: the conditional-expectation martingale of the terminal value and its
    representation kernel.
    """
    coeffs.matches(grid)
    d = grid.dim
    levels = np.arange(1, d + 1) if levels is None else np.asarray(levels)
    xi = _as_coeffs(xi, d)
    eta = np.zeros(d, dtype=complex) if eta is None else _as_coeffs(eta, d)
    tails_xi = np.stack([np.where(np.arange(d) >= l, xi, 0) for l in levels], axis=1)
    tails_eta = np.stack([np.where(np.arange(d) >= l, eta, 0) for l in levels], axis=1)

    X = propagate_forward(tails_eta, k0, coeffs.A, coeffs.C, grid)
    y, Y = propagate_backward(tails_xi, k0, coeffs.A, coeffs.C, grid)
    zero = np.zeros_like(coeffs.A)
    ym, Ym = propagate_backward(tails_xi, k0, zero, zero, grid)

    def sup(path, lo):
        return np.max(np.linalg.norm(path[lo:], axis=1), axis=0)

    recon = np.maximum(sup(ym, k0), sup(Ym, k0))
    return GalerkinCurve(levels, sup(X, k0), sup(y, k0), sup(Y, k0), recon)
