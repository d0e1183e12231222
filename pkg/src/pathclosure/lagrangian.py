"""Liouville residual, information-loss Lagrangian and discrete action.

For a trial log-density ``l = lam.Q - beta psi - log Z(lam)`` the residual is

    R = (d/dt - L*) l + div A
      = lam_dot.(Q - <Q>) - lam.(L* Q) + beta L* psi + div A,

using ``d log Z / dt = lam_dot.<Q>``.  ``R`` vanishes when the trial density
is transported exactly, and ``<R> = 0`` for every ``(lam, lam_dot)``.  The
Lagrangian density is ``<R^2> / 2`` and a discrete path's action is the
midpoint sum ``sum_k dt * <R^2>/2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse

from .dynsys import DynamicalSystem, apply_Lstar
from .polymoment import (
    MomentPlan,
    Polynomial,
    gaussian_expectation,
    gaussian_product_expectation,
    poly_sum,
)
from .trialdensity import NonNormalizable, TrialFamily, TrialPoint, fisher_matrix, to_gaussian

if TYPE_CHECKING:
    from .pathspace import DiscretePath


@dataclass(frozen=True)
class ResidualContext:
    sys: DynamicalSystem
    family: TrialFamily
    lam: np.ndarray
    lam_dot: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float).reshape(-1)
        lam_dot = np.array(self.lam_dot, dtype=float).reshape(-1)
        if lam.size != self.family.m or lam_dot.size != self.family.m:
            raise ValueError(f"lam and lam_dot must both have length {self.family.m}")
        if self.sys.n != self.family.n:
            raise ValueError("system and family disagree on state dimension")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "lam_dot", lam_dot)

    @property
    def point(self) -> TrialPoint:
        return TrialPoint(self.family, self.lam)


def residual_poly(ctx: ResidualContext) -> Polynomial:
    """The Liouville residual ``R`` as an exact polynomial in ``x``.

    Raises ``NonNormalizable`` only when ``lam_dot`` is nonzero, since ``<Q>``
    is then needed.
    """
    fam, sys = ctx.family, ctx.sys
    n = fam.n
    if np.any(ctx.lam_dot):
        g = to_gaussian(ctx.point)
        mean_q = np.array([gaussian_expectation(q, g) for q in fam.Q])
    else:
        # no time-derivative term, so the polynomial exists even off the manifold
        mean_q = np.zeros(fam.m)
    # log-density up to its x-independent part, which L* annihilates
    lhat = poly_sum((lam_i * q for lam_i, q in zip(ctx.lam, fam.Q)), n) - fam.beta * fam.psi
    time_part = poly_sum((ld * q for ld, q in zip(ctx.lam_dot, fam.Q)), n) - float(
        ctx.lam_dot @ mean_q
    )
    return time_part - apply_Lstar(sys, lhat) + sys.divergence


def mean_residual(ctx: ResidualContext) -> float:
    return gaussian_expectation(residual_poly(ctx), to_gaussian(ctx.point))


def lagrangian_direct(ctx: ResidualContext) -> float:
    """``<R^2> / 2`` evaluated exactly with the Isserlis engine."""
    R = residual_poly(ctx)
    return 0.5 * gaussian_product_expectation(R, R, to_gaussian(ctx.point))


@dataclass(frozen=True)
class LagrangianCoefficients:
    g: np.ndarray
    M: np.ndarray
    K: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Gamma: Polynomial

    def phi(self, lam) -> float:
        lam = np.asarray(lam, dtype=float)
        return float(lam @ self.K @ lam)


def _lstar_q(sys: DynamicalSystem, fam: TrialFamily) -> list[Polynomial]:
    return [apply_Lstar(sys, q) for q in fam.Q]


def coefficients(sys: DynamicalSystem, family: TrialFamily, lam) -> LagrangianCoefficients:
    """Fields of the coefficient form, with ``Gamma = div A - beta L* psi``."""
    pt = TrialPoint(family, lam)
    g = to_gaussian(pt)
    lq = _lstar_q(sys, family)
    Gamma = sys.divergence - family.beta * apply_Lstar(sys, family.psi)
    m = family.m
    mean_q = [gaussian_expectation(q, g) for q in family.Q]
    M = np.array([gaussian_expectation(p, g) for p in lq])
    K = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            K[i, j] = K[j, i] = gaussian_product_expectation(lq[i], lq[j], g)
    X = np.array([gaussian_product_expectation(q - mq, Gamma, g) for q, mq in zip(family.Q, mean_q)])
    Y = np.array([gaussian_product_expectation(p, Gamma, g) for p in lq])
    return LagrangianCoefficients(fisher_matrix(pt), M, K, X, Y, Gamma)


@dataclass(frozen=True)
class ReconcileReport:
    direct: float
    assembled: float
    gap: float
    gap_spread: float
    lam_dot_independent: bool
    derived: float
    derived_gap: float

    def as_text(self) -> str:
        return "\n".join(f"{k} = {getattr(self, k)!r}" for k in self.__dataclass_fields__)


def assembled_lagrangian(c: LagrangianCoefficients, lam, lam_dot) -> float:
    """Coefficient form ``(ld.g.ld - 2 ld.M + lam.K.lam + 2 ld.X - 2 lam.Y) / 2``."""
    lam = np.asarray(lam, dtype=float)
    ld = np.asarray(lam_dot, dtype=float)
    return 0.5 * float(ld @ c.g @ ld - 2 * ld @ c.M + lam @ c.K @ lam + 2 * ld @ c.X - 2 * lam @ c.Y)


def derived_lagrangian(ctx: ResidualContext) -> float:
    """Coefficient form obtained by expanding ``<R^2>`` with integration by parts.

    ``<R^2> = ld.g.ld + 2 ld.M + lam.K.lam - 2 lam.Y+ + <G+^2>`` with
    ``G+ = div A + beta L* psi`` and ``Y+_i = <(L* Q_i) G+>``; the ``X``-type
    cross terms cancel exactly.
    """
    sys, fam = ctx.sys, ctx.family
    pt = ctx.point
    g = to_gaussian(pt)
    lq = _lstar_q(sys, fam)
    gplus = sys.divergence + fam.beta * apply_Lstar(sys, fam.psi)
    M = np.array([gaussian_expectation(p, g) for p in lq])
    lam_lq = poly_sum((l * p for l, p in zip(ctx.lam, lq)), fam.n)
    phi = gaussian_product_expectation(lam_lq, lam_lq, g)
    ypl = gaussian_product_expectation(lam_lq, gplus, g)
    gg = gaussian_product_expectation(gplus, gplus, g)
    ld = ctx.lam_dot
    return 0.5 * float(ld @ fisher_matrix(pt) @ ld + 2 * ld @ M + phi - 2 * ypl + gg)


def reconcile(ctx: ResidualContext, lam_dot_grid=None, tol: float = 1e-9) -> ReconcileReport:
    """Compare the direct Lagrangian with the coefficient form.

    The gap is sampled over ``lam_dot_grid`` (default: the context's
    ``lam_dot`` scaled by -2..2 plus the coordinate axes) at fixed ``lam``
    to decide whether it is a ``lam_dot``-independent constant.
    """
    c = coefficients(ctx.sys, ctx.family, ctx.lam)
    direct = lagrangian_direct(ctx)
    assembled = assembled_lagrangian(c, ctx.lam, ctx.lam_dot)
    if lam_dot_grid is None:
        m = ctx.family.m
        lam_dot_grid = [s * ctx.lam_dot for s in (-2.0, -1.0, 0.0, 0.5, 2.0)]
        lam_dot_grid += [np.eye(m)[i] for i in range(m)]
    gaps = []
    for ld in lam_dot_grid:
        sub = ResidualContext(ctx.sys, ctx.family, ctx.lam, ld)
        gaps.append(lagrangian_direct(sub) - assembled_lagrangian(c, ctx.lam, ld))
    spread = float(max(gaps) - min(gaps))
    scale = 1.0 + abs(direct)
    derived = derived_lagrangian(ctx)
    return ReconcileReport(
        direct=direct,
        assembled=assembled,
        gap=direct - assembled,
        gap_spread=spread,
        lam_dot_independent=bool(spread <= tol * scale),
        derived=derived,
        derived_gap=direct - derived,
    )


def discrete_action(sys: DynamicalSystem, family: TrialFamily, path: DiscretePath) -> float:
    """Midpoint action ``sum_k dt * <R^2>/2`` on the exact polynomial route.

    Returns ``inf`` when any knot is non-normalizable.
    """
    knots = np.asarray(path.knots, dtype=float)
    _, _, ok = family.moments(knots)
    if not np.all(ok):
        return math.inf
    dt = path.dt
    total = 0.0
    for k in range(len(knots) - 1):
        mid = 0.5 * (knots[k] + knots[k + 1])
        vel = (knots[k + 1] - knots[k]) / dt
        try:
            total += dt * lagrangian_direct(ResidualContext(sys, family, mid, vel))
        except NonNormalizable:
            return math.inf
    return total


class ClosureLagrangian:
    """Batched evaluation of ``<R^2>/2`` and its gradient for path computations.

    ``R`` is linear in a fixed polynomial basis
    ``B = (Q_1..Q_m, L*Q_1..L*Q_m, beta L* psi + div A, 1)`` with weights
    ``w = (lam_dot, -lam, 1, -lam_dot.<Q>)``, so ``<R^2> = w^T G w`` with
    ``G_ab = <B_a B_b>``.  All products are expanded once; each call only
    evaluates raw Gaussian moments through a :class:`MomentPlan`.

    Derivatives in ``lam`` use ``d<f>/d lam_k = <f Q_k> - <f><Q_k>``, which
    holds for any exponential family, so the gradient needs the moments of
    ``B_a B_b Q_k`` as well.  Those are compiled lazily on first use.
    """

    def __init__(self, sys: DynamicalSystem, family: TrialFamily):
        if sys.n != family.n:
            raise ValueError("system and family disagree on state dimension")
        self.sys = sys
        self.family = family
        n = family.n
        gplus = sys.divergence + family.beta * apply_Lstar(sys, family.psi)
        self.basis = list(family.Q) + _lstar_q(sys, family) + [gplus, Polynomial.constant(n, 1.0)]
        self.m = family.m
        self.nb = len(self.basis)
        self._products = {}
        for a in range(self.nb):
            for b in range(a, self.nb):
                self._products[a, b] = self.basis[a] * self.basis[b]
        self._compile(with_gradient=False)

    def _compile(self, with_gradient: bool) -> None:
        n, nb, m = self.family.n, self.nb, self.m
        polys = dict(self._products)
        if with_gradient:
            for (a, b), p in self._products.items():
                for k, q in enumerate(self.family.Q):
                    polys[a, b, k] = p * q
        monos = sorted({e for p in polys.values() for e, _ in p.items()}) or [(0,) * n]
        self.plan = MomentPlan(monos, n)
        self._gram = self._sparse(
            {(a * nb + b, b * nb + a): p for (a, b), p in self._products.items()}, nb * nb
        )
        self._third = None
        if with_gradient:
            third = {}
            for (a, b), _ in self._products.items():
                for k in range(m):
                    rows = ((k * nb + a) * nb + b, (k * nb + b) * nb + a)
                    third[rows] = polys[a, b, k]
            self._third = self._sparse(third, m * nb * nb)
        self.has_gradient = with_gradient

    def _sparse(self, row_polys, nrows):
        rows, cols, vals = [], [], []
        for targets, p in row_polys.items():
            for r in set(targets):
                for e, c in p.items():
                    rows.append(r)
                    cols.append(self.plan.index[e])
                    vals.append(c)
        return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(nrows, self.plan.size))

    @property
    def dim(self) -> int:
        return self.m

    def normalizable(self, lam) -> np.ndarray:
        """Boolean mask over the batch: is the trial density at ``lam`` normalizable?"""
        P, b, _ = self.family.exponent(np.asarray(lam, dtype=float))
        ok = np.isfinite(P).all(axis=(-1, -2)) & np.isfinite(b).all(axis=-1)
        P = np.where(ok[..., None, None], P, np.eye(self.family.n))
        return ok & (np.linalg.eigvalsh(P)[..., 0] > 0)

    def _moments(self, lam):
        lam = np.asarray(lam, dtype=float)
        mean, cov, ok = self.family.moments(lam)
        n = self.family.n
        flat_mean = np.where(ok[..., None], mean, 0.0).reshape(-1, n)
        flat_cov = np.where(ok[..., None, None], cov, 0.0).reshape(-1, n, n)
        return self.plan.evaluate_all(flat_mean, flat_cov), ok

    def gram(self, lam) -> tuple[np.ndarray, np.ndarray]:
        """``(G, ok)`` with ``G`` of shape ``(..., nb, nb)``."""
        E, ok = self._moments(lam)
        G = (self._gram @ E.T).T.reshape(ok.shape + (self.nb, self.nb))
        return G, ok

    def _weights(self, lam, lam_dot, G):
        m = self.m
        mean_q = G[..., :m, self.nb - 1]
        ones = np.ones(lam.shape[:-1] + (1,))
        proj = np.einsum("...i,...i->...", lam_dot, mean_q)[..., None]
        return np.concatenate([lam_dot, -lam, ones, -proj], axis=-1), mean_q

    def __call__(self, lam, lam_dot) -> np.ndarray:
        """Lagrangian values, ``inf`` where ``lam`` is non-normalizable."""
        lam = np.asarray(lam, dtype=float)
        lam_dot = np.asarray(lam_dot, dtype=float)
        G, ok = self.gram(lam)
        w, _ = self._weights(lam, lam_dot, G)
        val = 0.5 * np.einsum("...a,...ab,...b->...", w, G, w)
        return np.where(ok, val, np.inf)

    def value_and_grad(self, lam, lam_dot):
        """``(L, dL/dlam, dL/dlam_dot)``; non-normalizable entries give ``inf``/NaN."""
        if not self.has_gradient:
            self._compile(with_gradient=True)
        lam = np.asarray(lam, dtype=float)
        lam_dot = np.asarray(lam_dot, dtype=float)
        m, nb = self.m, self.nb
        E, ok = self._moments(lam)
        batch = ok.shape
        G = (self._gram @ E.T).T.reshape(batch + (nb, nb))
        H = (self._third @ E.T).T.reshape(batch + (m, nb, nb))
        w, mean_q = self._weights(lam, lam_dot, G)
        v = np.einsum("...ab,...b->...a", G, w)
        val = 0.5 * np.einsum("...a,...a->...", w, v)
        # d w / d lam_dot_i = e_i - mean_q_i e_last
        d_dot = v[..., :m] - v[..., nb - 1 : nb] * mean_q
        # d G / d lam_k = H_k - G <Q_k>;  d mean_q / d lam_k = fisher[:, k]
        quad = 0.5 * (np.einsum("...a,...kab,...b->...k", w, H, w) - 2.0 * val[..., None] * mean_q)
        fisher = H[..., :, :m, nb - 1] - mean_q[..., :, None] * mean_q[..., None, :]
        d_lam = quad - v[..., m : 2 * m] - v[..., nb - 1 : nb] * np.einsum(
            "...i,...ik->...k", lam_dot, fisher
        )
        val = np.where(ok, val, np.inf)
        d_lam = np.where(ok[..., None], d_lam, np.nan)
        d_dot = np.where(ok[..., None], d_dot, np.nan)
        return val, d_lam, d_dot

    def fisher(self, lam) -> np.ndarray:
        G, _ = self.gram(lam)
        m = self.m
        mq = G[..., :m, self.nb - 1]
        return G[..., :m, :m] - mq[..., :, None] * mq[..., None, :]
