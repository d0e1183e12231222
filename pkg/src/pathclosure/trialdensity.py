"""Gaussian-tractable exponential families ``exp(lam.Q(x) - beta psi(x)) / Z(lam)``.

Every slow variable ``Q_i`` and the reference function ``psi`` are polynomials
of degree at most two, so each member of the family is a Gaussian.  Natural
parameters map to moments through the precision matrix ``P`` and linear term
``b`` of the exponent ``-x^T P x / 2 + b^T x + c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Sequence

import numpy as np
import scipy.linalg

from .polymoment import DimensionError, GaussianMoments, Polynomial


class NonNormalizable(ValueError):
    """Natural parameters give an exponent without a negative-definite quadratic part."""


def _quadratic_parts(p: Polynomial) -> tuple[np.ndarray, np.ndarray, float]:
    """Symmetric ``A``, vector ``a`` and constant with ``p = x^T A x + a^T x + c``."""
    n = p.nvars
    A = np.zeros((n, n))
    a = np.zeros(n)
    c = 0.0
    for exps, coef in p.items():
        nz = [i for i, e in enumerate(exps) for _ in range(e)]
        if len(nz) == 0:
            c += coef
        elif len(nz) == 1:
            a[nz[0]] += coef
        elif len(nz) == 2:
            i, j = nz
            if i == j:
                A[i, i] += coef
            else:
                A[i, j] += 0.5 * coef
                A[j, i] += 0.5 * coef
        else:
            raise ValueError(f"polynomial of degree {p.degree} is not Gaussian-tractable")
    return A, a, c


@dataclass(frozen=True)
class TrialFamily:
    Q: tuple[Polynomial, ...]
    psi: Polynomial
    beta: float = 0.0
    _A: np.ndarray = field(init=False, repr=False, compare=False)
    _a: np.ndarray = field(init=False, repr=False, compare=False)
    _c: np.ndarray = field(init=False, repr=False, compare=False)
    _psi_parts: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        Q = tuple(self.Q)
        if not Q:
            raise ValueError("family needs at least one slow variable")
        n = Q[0].nvars
        if any(q.nvars != n for q in Q) or self.psi.nvars != n:
            raise DimensionError("Q and psi must share the state dimension")
        for k, q in enumerate(Q):
            if q.degree > 2:
                raise ValueError(f"Q[{k}] has degree {q.degree}; at most 2 is supported")
        if self.psi.degree > 2:
            raise ValueError("psi must have degree at most 2")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        parts = [_quadratic_parts(q) for q in Q]
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "_A", np.array([p[0] for p in parts]))
        object.__setattr__(self, "_a", np.array([p[1] for p in parts]))
        object.__setattr__(self, "_c", np.array([p[2] for p in parts]))
        object.__setattr__(self, "_psi_parts", _quadratic_parts(self.psi))

    @property
    def n(self) -> int:
        return self.psi.nvars

    @property
    def m(self) -> int:
        return len(self.Q)

    def exponent(self, lam) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Precision ``P``, linear term ``b`` and constant, batched over ``lam``."""
        lam = np.asarray(lam, dtype=float)
        if lam.shape[-1] != self.m:
            raise DimensionError(f"expected {self.m} natural parameters, got {lam.shape[-1]}")
        Apsi, apsi, cpsi = self._psi_parts
        quad = np.einsum("...i,ijk->...jk", lam, self._A) - self.beta * Apsi
        lin = np.einsum("...i,ij->...j", lam, self._a) - self.beta * apsi
        const = lam @ self._c - self.beta * cpsi
        return -2.0 * quad, lin, const

    def moments(self, lam) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batched ``(mean, cov, ok)``; entries with ``ok == False`` are NaN."""
        P, b, _ = self.exponent(lam)
        batch = P.shape[:-2]
        ok = np.isfinite(P).all(axis=(-1, -2)) & np.isfinite(b).all(axis=-1)
        Psafe = np.where(ok[..., None, None], P, np.eye(self.n))
        ok &= np.linalg.eigvalsh(Psafe)[..., 0] > 0
        Psafe = np.where(ok[..., None, None], Psafe, np.eye(self.n))
        cov = np.linalg.inv(Psafe)
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
        mean = np.einsum("...ij,...j->...i", cov, np.where(ok[..., None], b, 0.0))
        mean = np.where(ok[..., None], mean, np.nan)
        cov = np.where(ok[..., None, None], cov, np.nan)
        return mean, cov, ok.reshape(batch)

    def point(self, lam) -> TrialPoint:
        return TrialPoint(self, lam)

    def natural_from_moments(self, mean, cov) -> np.ndarray:
        """Least-squares inverse of :meth:`moments`; exact when Q spans the needed monomials."""
        mean = np.asarray(mean, dtype=float)
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        P = np.linalg.inv(cov)
        b = P @ mean
        Apsi, apsi, _ = self._psi_parts
        # sum_i lam_i A_i = -P/2 + beta Apsi, sum_i lam_i a_i = b + beta apsi
        iu = np.triu_indices(self.n)
        rows_quad = self._A[:, iu[0], iu[1]].T
        rows_lin = self._a.T
        lhs = np.vstack([rows_quad, rows_lin])
        rhs = np.concatenate([(-0.5 * P + self.beta * Apsi)[iu], b + self.beta * apsi])
        lam, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        if np.linalg.norm(lhs @ lam - rhs) > 1e-8 * (1 + np.linalg.norm(rhs)):
            raise ValueError("requested moments are not reachable within this family")
        return lam


@dataclass(frozen=True)
class TrialPoint:
    family: TrialFamily
    lam: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float).reshape(-1)
        if lam.size != self.family.m:
            raise DimensionError(f"expected {self.family.m} natural parameters, got {lam.size}")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)


def _precision(pt: TrialPoint) -> tuple[np.ndarray, np.ndarray, float]:
    P, b, c = pt.family.exponent(pt.lam)
    P = 0.5 * (P + P.T)
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise NonNormalizable(f"lambda={pt.lam.tolist()} gives a non-normalizable density") from None
    return P, b, float(c)


def to_gaussian(pt: TrialPoint) -> GaussianMoments:
    P, b, _ = _precision(pt)
    cov = np.linalg.inv(P)
    return GaussianMoments(cov @ b, cov)


def log_partition(pt: TrialPoint) -> float:
    """``log int exp(lam.Q - beta psi) dx`` in closed form."""
    P, b, c = _precision(pt)
    chol = np.linalg.cholesky(P)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    w = scipy.linalg.cho_solve((chol, True), b)
    n = P.shape[0]
    return c + 0.5 * b @ w + 0.5 * n * np.log(2 * np.pi) - 0.5 * logdet


def fisher_matrix(pt: TrialPoint) -> np.ndarray:
    """``g_ij = Cov(Q_i, Q_j)`` under the trial Gaussian.

    With ``Q_i = x^T A_i x + a_i^T x + c_i`` and ``x ~ N(m, S)``:
    ``Cov(Q_i, Q_j) = 2 tr(A_i S A_j S) + h_i^T S h_j`` where ``h_i = 2 A_i m + a_i``.
    """
    g = to_gaussian(pt)
    fam = pt.family
    S = g.covariance
    h = 2.0 * fam._A @ g.mean + fam._a
    AS = fam._A @ S
    G = 2.0 * np.einsum("ijk,lkj->il", AS, AS) + h @ S @ h.T
    return 0.5 * (G + G.T)


def sample(pt: TrialPoint, count: int, seed: int) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be positive")
    g = to_gaussian(pt)
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(g.covariance)
    return g.mean + rng.standard_normal((count, g.dim)) @ chol.T


def gaussian_kl(p: GaussianMoments, q: GaussianMoments) -> float:
    """``D(p || q)`` for two non-degenerate Gaussians."""
    if p.dim != q.dim:
        raise DimensionError("Gaussians have different dimensions")
    if np.array_equal(p.mean, q.mean) and np.array_equal(p.covariance, q.covariance):
        return 0.0
    try:
        chol_q = np.linalg.cholesky(q.covariance)
        np.linalg.cholesky(p.covariance)
    except np.linalg.LinAlgError:
        raise ValueError("singular covariance in KL divergence") from None
    # eigenvalues of S_q^{-1} S_p; each contributes (e - 1) - log(e)
    e = scipy.linalg.eigh(p.covariance, q.covariance, eigvals_only=True)
    d = e - 1.0
    trace_part = np.sum(d - np.log1p(d))
    diff = q.mean - p.mean
    w = scipy.linalg.solve_triangular(chol_q, diff, lower=True)
    return max(0.0, 0.5 * (trace_part + w @ w))


def fit_psi(equilibrium_sample) -> tuple[Polynomial, float]:
    """Quadratic ``psi`` such that ``exp(-psi)`` has the sample mean and covariance.

    Returns ``(psi, beta)`` with ``beta = 1``; ``psi = (x - m)^T S^{-1} (x - m) / 2``.
    """
    X = np.asarray(equilibrium_sample, dtype=float)
    if X.ndim != 2:
        raise ValueError("sample must be a (count, n) matrix")
    count, n = X.shape
    if count < 10 * n * n:
        raise ValueError(f"need at least {10 * n * n} states to fit psi, got {count}")
    m = X.mean(axis=0)
    S = np.cov(X, rowvar=False).reshape(n, n)
    ev = np.linalg.eigvalsh(S)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        raise ValueError("degenerate sample covariance; cannot fit psi")
    Pm = np.linalg.inv(S)
    Pm = 0.5 * (Pm + Pm.T)
    psi = Polynomial.quadratic(0.5 * Pm, -(Pm @ m), 0.5 * m @ Pm @ m)
    return psi, 1.0


# ---------------------------------------------------------------------------
# family builders


def linear_monomials(n: int) -> list[tuple[int, ...]]:
    return [tuple(1 if j == i else 0 for j in range(n)) for i in range(n)]


def quadratic_monomials(n: int, diagonal_only: bool = False) -> list[tuple[int, ...]]:
    out = []
    for i, j in combinations_with_replacement(range(n), 2):
        if diagonal_only and i != j:
            continue
        e = [0] * n
        e[i] += 1
        e[j] += 1
        out.append(tuple(e))
    return out


def monomial_family(
    monomials: Sequence[Sequence[int]],
    psi: Polynomial | None = None,
    beta: float = 0.0,
) -> TrialFamily:
    monomials = [tuple(m) for m in monomials]
    if len(set(monomials)) != len(monomials):
        raise ValueError("duplicate slow-variable monomials")
    n = len(monomials[0])
    Q = tuple(Polynomial.monomial(m) for m in monomials)
    return TrialFamily(Q, psi if psi is not None else Polynomial.zero(n), beta)


def gaussian_family(n: int) -> TrialFamily:
    """All first and second monomials, no reference function: the full Gaussian manifold."""
    return monomial_family(linear_monomials(n) + quadratic_monomials(n))


def fixed_covariance_family(n: int, psi: Polynomial, beta: float = 1.0) -> TrialFamily:
    """Linear slow variables over a quadratic reference: shifts of ``exp(-beta psi)``."""
    return monomial_family(linear_monomials(n), psi, beta)
