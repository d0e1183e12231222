"""Autonomous systems ``dx/dt = A(x)`` with polynomial drift.

The Liouville operator acting on densities is ``L = d_i(A_i .)``; its formal
adjoint acting on observables is ``L* = -A_i d_i``, and ``L + L* = div A``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .polymoment import (
    DimensionError,
    Polynomial,
    poly_partial,
    poly_sum,
    polys_from_text,
    polys_to_text,
)


@dataclass(frozen=True)
class DynamicalSystem:
    drift: tuple[Polynomial, ...]
    name: str = "custom"
    divergence: Polynomial = field(init=False, repr=False)
    _levels: tuple = field(init=False, repr=False, compare=False)
    _coefs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        drift = tuple(self.drift)
        if not drift:
            raise DimensionError("drift must have at least one component")
        n = len(drift)
        for k, a in enumerate(drift):
            if a.nvars != n:
                raise DimensionError(f"drift component {k} has {a.nvars} variables, expected {n}")
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "divergence", _divergence(drift))
        # every monomial is a parent monomial times one variable; closing the
        # drift monomials under that rule lets evaluation go degree by degree
        needed = {e for a in drift for e, _ in a.items()} | {(0,) * n}
        frontier = list(needed)
        while frontier:
            e = frontier.pop()
            if sum(e):
                i = next(k for k, v in enumerate(e) if v)
                parent = e[:i] + (e[i] - 1,) + e[i + 1 :]
                if parent not in needed:
                    needed.add(parent)
                    frontier.append(parent)
        monos = sorted(needed, key=lambda e: (sum(e), e))
        index = {e: k for k, e in enumerate(monos)}
        levels = []
        for d in range(1, max(sum(e) for e in monos) + 1):
            slots, parents, variables = [], [], []
            for e in monos:
                if sum(e) == d:
                    i = next(k for k, v in enumerate(e) if v)
                    slots.append(index[e])
                    parents.append(index[e[:i] + (e[i] - 1,) + e[i + 1 :]])
                    variables.append(i)
            levels.append((np.array(slots), np.array(parents), np.array(variables)))
        coefs = np.zeros((n, len(monos)))
        for i, a in enumerate(drift):
            for e, c in a.items():
                coefs[i, index[e]] = c
        object.__setattr__(self, "_levels", tuple(levels))
        object.__setattr__(self, "_coefs", coefs)

    @property
    def n(self) -> int:
        return len(self.drift)

    @property
    def max_degree(self) -> int:
        return max(a.degree for a in self.drift)

    def is_linear(self) -> bool:
        return self.max_degree <= 1

    def linear_part(self) -> tuple[np.ndarray, np.ndarray]:
        """``(U, c)`` with ``A(x) = U x + c``; raises if the drift is nonlinear."""
        if not self.is_linear():
            raise ValueError(f"system {self.name!r} has nonlinear drift")
        n = self.n
        U = np.zeros((n, n))
        c = np.zeros(n)
        for i, a in enumerate(self.drift):
            c[i] = a.coefficient((0,) * n)
            for j in range(n):
                e = [0] * n
                e[j] = 1
                U[i, j] = a.coefficient(e)
        return U, c

    def to_text(self) -> str:
        return polys_to_text(self.drift)


@dataclass(frozen=True)
class GenericDecomposition:
    """Split of a forced-dissipative drift: conservative + alpha*x + F."""

    conservative: tuple[Polynomial, ...]
    alpha: np.ndarray
    forcing: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if np.any(alpha > 0):
            raise ValueError("dissipation coefficients must be <= 0")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "forcing", np.asarray(self.forcing, dtype=float))

    def assemble(self) -> tuple[Polynomial, ...]:
        n = len(self.conservative)
        return tuple(
            c + Polynomial.variable(n, i, self.alpha[i]) + self.forcing[i]
            for i, c in enumerate(self.conservative)
        )


def _divergence(drift: Sequence[Polynomial]) -> Polynomial:
    n = len(drift)
    return poly_sum((poly_partial(a, i) for i, a in enumerate(drift)), n)


def drift_eval(sys: DynamicalSystem, x) -> np.ndarray:
    """Evaluate ``A(x)``; ``x`` may carry leading batch axes."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != sys.n:
        raise DimensionError(f"state has {x.shape[-1]} components, system has {sys.n}")
    monos = np.empty(x.shape[:-1] + (sys._coefs.shape[1],))
    monos[..., 0] = 1.0
    for slots, parents, variables in sys._levels:
        monos[..., slots] = monos[..., parents] * x[..., variables]
    return monos @ sys._coefs.T


def apply_Lstar(sys: DynamicalSystem, F: Polynomial) -> Polynomial:
    """``L* F = -sum_i A_i dF/dx_i``."""
    if F.nvars != sys.n:
        raise DimensionError(f"observable has {F.nvars} variables, system has {sys.n}")
    return -poly_sum((a * poly_partial(F, i) for i, a in enumerate(sys.drift)), sys.n)


def apply_L(sys: DynamicalSystem, F: Polynomial) -> Polynomial:
    """``L F = sum_i d(A_i F)/dx_i``."""
    if F.nvars != sys.n:
        raise DimensionError(f"observable has {F.nvars} variables, system has {sys.n}")
    return poly_sum((poly_partial(a * F, i) for i, a in enumerate(sys.drift)), sys.n)


def divergence_poly(sys: DynamicalSystem) -> Polynomial:
    return sys.divergence


# ---------------------------------------------------------------------------
# builtins


def make_linear(U, c=None, name: str = "linear") -> DynamicalSystem:
    """Drift ``A(x) = U x (+ c)``."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise DimensionError(f"U must be square, got shape {U.shape}")
    const = np.zeros(U.shape[0]) if c is None else np.asarray(c, dtype=float)
    return DynamicalSystem(
        tuple(Polynomial.linear(U[i], const[i]) for i in range(U.shape[0])), name=name
    )


def make_rotation(omega: float = 1.0) -> DynamicalSystem:
    """Harmonic oscillator ``q' = omega p, p' = -omega q`` (H = omega (q^2+p^2)/2)."""
    return make_linear([[0.0, omega], [-omega, 0.0]], name="rotation")


def make_lorenz(sigma: float = 10.0, rho: float = 28.0, b: float = 8.0 / 3.0) -> DynamicalSystem:
    x, y, z = (Polynomial.variable(3, i) for i in range(3))
    drift = (sigma * (y - x), x * (rho - z) - y, x * y - b * z)
    return DynamicalSystem(drift, name="lorenz")


def burgers_index(k: int, part: str) -> int:
    """State index of the cosine (``"a"``) or sine (``"b"``) coefficient of wavenumber k."""
    return 2 * (k - 1) + (0 if part == "a" else 1)


def make_burgers(N: int, nu: float = 0.0, F=None) -> tuple[DynamicalSystem, GenericDecomposition]:
    """Real Fourier-Galerkin truncation of ``u_t + u u_x = nu u_xx + f`` on [0, 2pi].

    ``u(x) = sum_{k=1..N} a_k cos(kx) + b_k sin(kx)`` with state ordering
    ``(a_1, b_1, a_2, b_2, ...)``.  Products are projected back onto
    wavenumbers ``1..N``; the mean mode is omitted (it is conserved).
    All Galerkin coefficients are dyadic rationals, so the energy identity
    holds exactly in floating point.
    """
    if N < 2:
        raise ValueError(f"need at least 2 modes, got {N}")
    if nu < 0:
        raise ValueError("viscosity must be non-negative")
    n = 2 * N
    forcing = np.zeros(n) if F is None else np.asarray(F, dtype=float)
    if forcing.shape != (n,):
        raise DimensionError(f"forcing must have length {n}")
    zero = Polynomial.zero(n)

    def uhat(p: int) -> tuple[Polynomial, Polynomial]:
        # complex coefficient of exp(ipx) as (real, imag) polynomials
        k = abs(p)
        a = Polynomial.variable(n, burgers_index(k, "a"), 0.5)
        b = Polynomial.variable(n, burgers_index(k, "b"), 0.5)
        return (a, -b) if p > 0 else (a, b)

    conservative = [zero] * n
    for k in range(1, N + 1):
        s_re, s_im = zero, zero
        for p in range(-N, N + 1):
            q = k - p
            if p == 0 or q == 0 or abs(q) > N:
                continue
            pr, pi = uhat(p)
            qr, qi = uhat(q)
            s_re = s_re + (pr * qr - pi * qi)
            s_im = s_im + (pr * qi + pi * qr)
        # (-u u_x)^_k = -(ik/2) S  =>  a_k' = k Im S,  b_k' = k Re S
        conservative[burgers_index(k, "a")] = k * s_im
        conservative[burgers_index(k, "b")] = k * s_re
    alpha = np.array([-nu * (k * k) for k in range(1, N + 1) for _ in (0, 1)])
    deco = GenericDecomposition(tuple(conservative), alpha, forcing)
    return DynamicalSystem(deco.assemble(), name=f"burgers{N}"), deco


def burgers_energy(N: int) -> Polynomial:
    """``sum x_i^2 / 2``, proportional to the spatial mean of u^2/2."""
    n = 2 * N
    return Polynomial.quadratic(0.5 * np.eye(n))


# ---------------------------------------------------------------------------
# text I/O


def load_system(path: str | Path, name: str | None = None) -> DynamicalSystem:
    """Read drift components from the block polynomial text format."""
    path = Path(path)
    drift = polys_from_text(path.read_text())
    return DynamicalSystem(tuple(drift), name=name or path.stem)


def save_system(sys: DynamicalSystem, path: str | Path) -> None:
    Path(path).write_text(sys.to_text())


BUILTINS = ("linear", "rotation", "lorenz", "burgers")


def make_builtin(name: str, **params) -> DynamicalSystem:
    if name == "linear":
        return make_linear(params["U"], params.get("c"))
    if name == "rotation":
        return make_rotation(params.get("omega", 1.0))
    if name == "lorenz":
        return make_lorenz(
            params.get("sigma", 10.0), params.get("rho", 28.0), params.get("b", 8.0 / 3.0)
        )
    if name == "burgers":
        sys, _ = make_burgers(int(params["N"]), params.get("nu", 0.0), params.get("F"))
        return sys
    raise ValueError(f"unknown builtin system {name!r}; choose from {BUILTINS}")
