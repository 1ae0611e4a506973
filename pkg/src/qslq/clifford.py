"""Finite Clifford probability space with one fermionic mode per time step.

Elements are stored in the orthonormal monomial basis ``e_S = dt^{-|S|/2} gamma_S``,
indexed by the subset bitmask ``S`` (mode ``j`` is bit ``j - 1``).  In that basis the
algebra product is a signed permutation, ``e_S e_T = sign(S, T) e_{S xor T}``, the
trace state reads the empty-monomial coefficient and the L2 inner product is the
plain Hermitian dot product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, Sequence

import numpy as np

ADAPTED_RTOL = 1e-10
MAX_MODES = 14


class SpaceMismatchError(ValueError):
    """Operands live in different Clifford spaces."""


class AdaptednessError(ValueError):
    """An element carries mass on increments beyond its filtration index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def popcount(x):
    return np.bitwise_count(np.asarray(x, dtype=np.int64))


def blade_product(S: int, T: int, dt: float) -> tuple[int, float, int]:
    """Multiply raw blades: ``gamma_S gamma_T = sign * scale * gamma_{S xor T}``.

    The sign is the parity of the number of transpositions needed to sort the
    concatenated index list; repeated indices contract to a factor ``dt`` each.
    """
    if S < 0 or T < 0:
        raise ValueError("subset masks must be non-negative")
    swaps = 0
    t, j = T, 0
    while t:
        if t & 1:
            swaps += int(S >> (j + 1)).bit_count()
        t >>= 1
        j += 1
    sign = -1 if swaps % 2 else 1
    return sign, float(dt) ** int(S & T).bit_count(), S ^ T


@lru_cache(maxsize=None)
def sign_table(N: int) -> np.ndarray:
    """``table[S, T]`` is the sign of ``e_S e_T`` (read-only int8 array)."""
    d = 1 << N
    masks = np.arange(d, dtype=np.int64)
    swaps = np.zeros((d, d), dtype=np.int64)
    for j in range(N):
        above = popcount(masks >> (j + 1))
        swaps += np.outer(above, (masks >> j) & 1)
    table = np.where(swaps % 2 == 0, 1, -1).astype(np.int8)
    table.flags.writeable = False
    return table


@lru_cache(maxsize=None)
def _gamma_action(N: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    # (x e_j)_U = sign(U ^ bit, bit) * x_{U ^ bit}
    bit = 1 << (j - 1)
    masks = np.arange(1 << N, dtype=np.int64)
    perm = masks ^ bit
    sgn = sign_table(N)[perm, bit].astype(float)
    perm.flags.writeable = False
    sgn.flags.writeable = False
    return perm, sgn


@lru_cache(maxsize=None)
def _adjoint_signs(N: int) -> np.ndarray:
    k = popcount(np.arange(1 << N))
    out = np.where((k * (k - 1) // 2) % 2 == 0, 1.0, -1.0)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def _parity_signs(N: int) -> np.ndarray:
    out = np.where(popcount(np.arange(1 << N)) % 2 == 0, 1.0, -1.0)
    out.flags.writeable = False
    return out


def filtration_mask(N: int, k: int) -> np.ndarray:
    """Boolean mask of the monomials spanning H_k (all indices <= k)."""
    if not 0 <= k <= N:
        raise ValueError(f"filtration index {k} outside [0, {N}]")
    return np.arange(1 << N) < (1 << k)


def right_gamma(coeffs: np.ndarray, N: int, j: int, dt: float) -> np.ndarray:
    """Coefficients of ``x * gamma_j`` for a vector or a column stack ``x``."""
    perm, sgn = _gamma_action(N, j)
    x = np.asarray(coeffs)
    if x.ndim == 1:
        return np.sqrt(dt) * sgn * x[perm]
    return np.sqrt(dt) * sgn[:, None] * x[perm]


def adapted_defect(coeffs: np.ndarray, k: int) -> float:
    """L2 mass (per column, maximised) carried by monomials outside H_k."""
    x = np.asarray(coeffs)
    tail = x[1 << k:]
    if x.ndim == 1:
        return float(np.linalg.norm(tail))
    if tail.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(tail, axis=0)))


def is_adapted(coeffs: np.ndarray, k: int, rtol: float = ADAPTED_RTOL) -> bool:
    x = np.asarray(coeffs)
    scale = np.linalg.norm(x) if x.ndim == 1 else np.max(np.linalg.norm(x, axis=0), initial=0.0)
    return adapted_defect(x, k) <= rtol * scale


@dataclass(frozen=True)
class CliffordSpace:
    """L2 of the Clifford algebra generated by ``N`` increments of length ``dt``."""

    N: int
    dt: float

    def __post_init__(self):
        if not 0 <= self.N <= MAX_MODES:
            raise ValueError(f"mode count must lie in [0, {MAX_MODES}], got {self.N}")
        if not self.dt > 0:
            raise ValueError(f"step length must be positive, got {self.dt}")

    @property
    def dim(self) -> int:
        return 1 << self.N

    def element(self, coeffs) -> "CliffordElement":
        return CliffordElement(self, coeffs)

    def zero(self) -> "CliffordElement":
        return CliffordElement(self, np.zeros(self.dim, dtype=complex))

    def one(self) -> "CliffordElement":
        return self.basis(0)

    def basis(self, S: int) -> "CliffordElement":
        c = np.zeros(self.dim, dtype=complex)
        c[S] = 1.0
        return CliffordElement(self, c)

    def gamma(self, j: int) -> "CliffordElement":
        """The increment ``gamma_j = W(t_j) - W(t_{j-1})``."""
        if not 1 <= j <= self.N:
            raise ValueError(f"mode index {j} outside [1, {self.N}]")
        return np.sqrt(self.dt) * self.basis(1 << (j - 1))

    def blade(self, S: int) -> "CliffordElement":
        """Raw monomial ``gamma_S``."""
        return self.dt ** (int(S).bit_count() / 2) * self.basis(S)

    def random_element(self, rng: np.random.Generator, k: int | None = None) -> "CliffordElement":
        """Standard complex Gaussian coefficients, restricted to H_k when given."""
        d = self.dim if k is None else 1 << k
        c = np.zeros(self.dim, dtype=complex)
        c[:d] = rng.standard_normal(d) + 1j * rng.standard_normal(d)
        return CliffordElement(self, c)


@dataclass(frozen=True, eq=False)
class CliffordElement:
    space: CliffordSpace
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        if c.shape != (self.space.dim,):
            raise ValueError(f"expected {self.space.dim} coefficients, got shape {c.shape}")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    def _check(self, other: "CliffordElement"):
        if self.space != other.space:
            raise SpaceMismatchError(f"{self.space} vs {other.space}")

    def __add__(self, other):
        if not isinstance(other, CliffordElement):
            return NotImplemented
        self._check(other)
        return CliffordElement(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        if not isinstance(other, CliffordElement):
            return NotImplemented
        self._check(other)
        return CliffordElement(self.space, self.coeffs - other.coeffs)

    def __neg__(self):
        return CliffordElement(self.space, -self.coeffs)

    def __mul__(self, other):
        if isinstance(other, CliffordElement):
            return mul(self, other)
        if np.isscalar(other):
            return CliffordElement(self.space, self.coeffs * other)
        return NotImplemented

    def __rmul__(self, other):
        if np.isscalar(other):
            return CliffordElement(self.space, other * self.coeffs)
        return NotImplemented

    def __truediv__(self, other):
        if np.isscalar(other):
            return CliffordElement(self.space, self.coeffs / other)
        return NotImplemented

    def allclose(self, other: "CliffordElement", atol: float = 1e-12) -> bool:
        self._check(other)
        return bool(np.max(np.abs(self.coeffs - other.coeffs), initial=0.0) <= atol)

    def __repr__(self):
        nz = {f"{S:#x}": complex(v) for S, v in enumerate(self.coeffs) if v != 0}
        return f"CliffordElement(N={self.space.N}, dt={self.space.dt}, {nz})"


def mul(a: CliffordElement, b: CliffordElement) -> CliffordElement:
    """Algebra product ``a b``."""
    a._check(b)
    N, d = a.space.N, a.space.dim
    masks = np.arange(d)
    idx = masks[:, None] ^ masks[None, :]
    terms = a.coeffs[:, None] * sign_table(N) * b.coeffs[None, :]
    flat = idx.ravel()
    out = np.bincount(flat, weights=terms.real.ravel(), minlength=d) + 1j * np.bincount(
        flat, weights=terms.imag.ravel(), minlength=d
    )
    return CliffordElement(a.space, out)


def adjoint(a: CliffordElement) -> CliffordElement:
    return CliffordElement(a.space, _adjoint_signs(a.space.N) * np.conj(a.coeffs))


def trace(a: CliffordElement) -> complex:
    """The state m(a)."""
    return complex(a.coeffs[0])


def inner(a: CliffordElement, b: CliffordElement) -> complex:
    """``<a, b> = m(a* b)``, conjugate-linear in ``a``."""
    a._check(b)
    return complex(np.vdot(a.coeffs, b.coeffs))


def norm(a: CliffordElement) -> float:
    return float(np.linalg.norm(a.coeffs))


def cond_expect(a: CliffordElement, k: int) -> CliffordElement:
    """Conditional expectation onto H_k."""
    keep = filtration_mask(a.space.N, k)
    return CliffordElement(a.space, np.where(keep, a.coeffs, 0))


def parity(a: CliffordElement) -> CliffordElement:
    return CliffordElement(a.space, _parity_signs(a.space.N) * a.coeffs)


def brownian(space: CliffordSpace, k: int) -> CliffordElement:
    """``W(t_k) = gamma_1 + ... + gamma_k``."""
    if not 0 <= k <= space.N:
        raise ValueError(f"node {k} outside [0, {space.N}]")
    c = np.zeros(space.dim, dtype=complex)
    for j in range(1, k + 1):
        c[1 << (j - 1)] = np.sqrt(space.dt)
    return CliffordElement(space, c)


def check_adapted(a: CliffordElement, k: int, what: str = "element") -> None:
    if not is_adapted(a.coeffs, k):
        raise AdaptednessError(
            f"{what} is not adapted to H_{k}: defect {adapted_defect(a.coeffs, k):.3e}", step=k
        )


def stochastic_integral(
    f: Sequence[CliffordElement], start: int = 0, stop: int | None = None
) -> CliffordElement:
    """Ito-Clifford integral ``sum_{start <= k < stop} f_k gamma_{k+1}``.

    ``f`` is indexed by absolute step; ``f[k]`` must lie in H_k.
    """
    if not f:
        raise ValueError("empty integrand")
    space = f[0].space
    stop = space.N if stop is None else stop
    if not 0 <= start <= stop <= space.N:
        raise ValueError(f"invalid step range [{start}, {stop})")
    out = np.zeros(space.dim, dtype=complex)
    for k in range(start, stop):
        fk = f[k]
        f[0]._check(fk)
        if not is_adapted(fk.coeffs, k):
            raise AdaptednessError(
                f"integrand at step {k} is not adapted: defect {adapted_defect(fk.coeffs, k):.3e}",
                step=k,
            )
        out += right_gamma(fk.coeffs, space.N, k + 1, space.dt)
    return CliffordElement(space, out)


def martingale_repr(a: CliffordElement) -> tuple[complex, list[CliffordElement]]:
    """Split ``a = m(a) + sum_k c_k gamma_k`` with ``c_k`` in H_{k-1}.

    Returns the mean and the kernel list ``[c_1, ..., c_N]``.
    """
    space = a.space
    kernel = []
    for k in range(1, space.N + 1):
        lo, hi = 1 << (k - 1), 1 << k
        c = np.zeros(space.dim, dtype=complex)
        # e_S = e_{S minus k} e_k when k = max(S); the ordering sign is +1
        c[: hi - lo] = a.coeffs[lo:hi] / np.sqrt(space.dt)
        kernel.append(CliffordElement(space, c))
    return trace(a), kernel


def martingale_reconstruct(mean: complex, kernel: Sequence[CliffordElement]) -> CliffordElement:
    space = kernel[0].space
    out = mean * space.one()
    for k, c in enumerate(kernel, start=1):
        out = out + CliffordElement(space, right_gamma(c.coeffs, space.N, k, space.dt))
    return out


Kind = Literal["none", "hermitian", "psd"]


@dataclass(frozen=True, eq=False)
class SuperOperator:
    """Linear map on L2 in the monomial ONB, optionally flagged Hermitian or PSD."""

    entries: np.ndarray
    kind: Kind = "none"

    def __post_init__(self):
        E = np.array(self.entries, dtype=complex)
        if E.ndim != 2 or E.shape[0] != E.shape[1]:
            raise ValueError(f"superoperator must be square, got {E.shape}")
        if self.kind in ("hermitian", "psd") and np.max(np.abs(E - E.conj().T), initial=0.0) > 1e-12:
            raise ValueError("entries are not Hermitian")
        if self.kind == "psd" and np.linalg.eigvalsh((E + E.conj().T) / 2).min() < -1e-10:
            raise ValueError("entries are not positive semidefinite")
        E.flags.writeable = False
        object.__setattr__(self, "entries", E)

    def apply(self, a: CliffordElement) -> CliffordElement:
        return CliffordElement(a.space, self.entries @ a.coeffs)

    def adjoint(self) -> "SuperOperator":
        return SuperOperator(self.entries.conj().T, self.kind)

    def __matmul__(self, other):
        if isinstance(other, SuperOperator):
            return SuperOperator(self.entries @ other.entries)
        if isinstance(other, CliffordElement):
            return self.apply(other)
        return NotImplemented


def mul_superop(b: CliffordElement, side: Literal["left", "right"]) -> SuperOperator:
    """Matrix of ``xi -> b xi`` (left) or ``xi -> xi b`` (right)."""
    N, d = b.space.N, b.space.dim
    masks = np.arange(d)
    partner = masks[:, None] ^ masks[None, :]  # partner[U, T] = U xor T
    table = sign_table(N)
    cols = np.broadcast_to(masks[None, :], (d, d))
    if side == "left":
        signs = table[partner, cols]
    elif side == "right":
        signs = table[cols, partner]
    else:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    return SuperOperator(b.coeffs[partner] * signs)


def to_json(a: CliffordElement) -> str:
    """Debug dump: hex bitmask -> [re, im] for every non-zero coefficient."""
    body = {f"{S:#x}": [float(v.real), float(v.imag)] for S, v in enumerate(a.coeffs) if v != 0}
    return json.dumps(body, sort_keys=True)


def from_json(text: str, space: CliffordSpace) -> CliffordElement:
    c = np.zeros(space.dim, dtype=complex)
    for key, (re, im) in json.loads(text).items():
        S = int(key, 16)
        if S >= space.dim:
            raise ValueError(f"mask {key} outside a space with {space.N} modes")
        c[S] = complex(re, im)
    return CliffordElement(space, c)
