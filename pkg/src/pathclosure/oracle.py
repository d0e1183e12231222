"""Reference computations: trajectory ensembles, exact Gaussian transport,
directly measured information loss and equilibrium sampling."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynsys import DynamicalSystem, drift_eval
from .polymoment import GaussianMoments
from .trialdensity import TrialFamily, TrialPoint, gaussian_kl, to_gaussian

BLOWUP = 1e12


class UnsupportedSystem(ValueError):
    """Raised when an exact linear-transport routine gets a nonlinear drift."""


class StationarityWarning(RuntimeWarning):
    pass


def rk4_step(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_trajectory(sys: DynamicalSystem, x0, T: float, dt: float) -> np.ndarray:
    """States at ``0, dt, ..., T`` (``T`` must be a whole number of steps)."""
    steps = _step_count(T, dt)
    x = np.asarray(x0, dtype=float).copy()
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    f = lambda y: drift_eval(sys, y)
    for k in range(steps):
        x = rk4_step(f, x, dt)
        out[k + 1] = x
    return out


def _step_count(T: float, dt: float) -> int:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if T < 0:
        raise ValueError("T must be non-negative")
    steps = int(round(T / dt))
    if abs(steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a whole number of steps of {dt}")
    return steps


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Private stream for trajectory ``index``, independent of how work is split."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


@dataclass
class EnsembleResult:
    times: np.ndarray
    moments: np.ndarray
    stderr: np.ndarray
    count: int
    excluded: int = 0

    def write_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "q", "mean", "stderr"])
            for k, t in enumerate(self.times):
                for i in range(self.moments.shape[1]):
                    w.writerow([repr(float(t)), i, repr(float(self.moments[k, i])), repr(float(self.stderr[k, i]))])


def ensemble_evolve(
    sys: DynamicalSystem,
    start: TrialPoint,
    count: int,
    T: float,
    dt: float,
    seed: int,
    record_every: int = 1,
) -> EnsembleResult:
    """Integrate ``count`` RK4 trajectories drawn from ``start`` and track ``<Q_i>``.

    Trajectory ``j`` draws its initial state from its own stream, so results do
    not depend on batching.  Trajectories that exceed ``1e12`` in norm or turn
    non-finite are dropped from that point on and counted in ``excluded``.
    """
    if count < 100:
        raise ValueError("an ensemble needs at least 100 trajectories")
    if start.family.n != sys.n:
        raise ValueError("trial family and system have different state dimensions")
    steps = _step_count(T, dt)
    g = to_gaussian(start)
    chol = np.linalg.cholesky(g.covariance + 0.0)
    z = np.stack([trajectory_rng(seed, j).standard_normal(sys.n) for j in range(count)])
    x = g.mean + z @ chol.T
    Q = start.family.Q
    alive = np.ones(count, dtype=bool)
    f = lambda y: drift_eval(sys, y)

    times, means, errs = [], [], []

    def record(t):
        vals = np.stack([np.asarray(q(x[alive]), dtype=float) for q in Q], axis=-1)
        k = vals.shape[0]
        times.append(t)
        means.append(vals.mean(axis=0))
        errs.append(vals.std(axis=0, ddof=1) / math.sqrt(k) if k > 1 else np.full(len(Q), np.inf))

    record(0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, steps + 1):
            x[alive] = rk4_step(f, x[alive], dt)
            bad = alive & ~(np.all(np.isfinite(x), axis=1) & (np.linalg.norm(x, axis=1) <= BLOWUP))
            if bad.any():
                alive &= ~bad
                if not alive.any():
                    raise FloatingPointError("every trajectory blew up")
            if step % record_every == 0 or step == steps:
                record(step * dt)
    return EnsembleResult(
        np.array(times), np.array(means), np.array(errs), count, int(count - alive.sum())
    )


def exact_gaussian_evolve(
    sys: DynamicalSystem, start: GaussianMoments, T: float, steps: int
) -> list[GaussianMoments]:
    """RK4 on ``m' = U m + c`` and ``S' = U S + S U^T``; returns ``steps + 1`` states."""
    if not sys.is_linear():
        raise UnsupportedSystem(f"system {sys.name!r} is nonlinear; exact Gaussian transport needs linear drift")
    if steps < 1:
        raise ValueError("steps must be positive")
    U, c = sys.linear_part()
    dt = T / steps

    def f(y):
        m, S = y
        return (U @ m + c, U @ S + S @ U.T)

    def axpy(y, a, k):
        return (y[0] + a * k[0], y[1] + a * k[1])

    y = (start.mean.copy(), start.covariance.copy())
    out = [start]
    for _ in range(steps):
        k1 = f(y)
        k2 = f(axpy(y, 0.5 * dt, k1))
        k3 = f(axpy(y, 0.5 * dt, k2))
        k4 = f(axpy(y, dt, k3))
        y = (
            y[0] + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            y[1] + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        )
        out.append(GaussianMoments(y[0], y[1]))
    return out


def information_loss_direct(
    sys: DynamicalSystem,
    family: TrialFamily,
    lam_t,
    lam_next,
    dt: float,
    substeps: int = 16,
) -> float:
    """``D(transported || trial)`` after one step: the trial density at ``lam_t`` is
    moved exactly for ``dt`` and compared with the trial density at ``lam_next``."""
    evolved = exact_gaussian_evolve(sys, to_gaussian(family.point(lam_t)), dt, substeps)[-1]
    return gaussian_kl(evolved, to_gaussian(family.point(lam_next)))


def _decorrelation_steps(x: np.ndarray) -> int:
    """Steps until every coordinate's autocorrelation first drops below zero."""
    y = x - x.mean(axis=0)
    var = (y * y).mean(axis=0)
    lag_max = 1
    nfft = 1 << int(np.ceil(np.log2(2 * len(y))))
    spec = np.fft.rfft(y, n=nfft, axis=0)
    acf = np.fft.irfft(spec * np.conj(spec), n=nfft, axis=0)[: len(y)]
    for i in range(y.shape[1]):
        if var[i] <= 0:
            continue
        neg = np.nonzero(acf[:, i] <= 0)[0]
        lag_max = max(lag_max, int(neg[0]) if len(neg) else len(y) // 2)
    return lag_max


def equilibrium_sample(
    sys: DynamicalSystem,
    burn_T: float,
    count: int,
    dt: float,
    seed: int,
    x0=None,
    spacing: int | None = None,
) -> np.ndarray:
    """``count`` states from one long RK4 trajectory after discarding ``burn_T``.

    With ``spacing=None`` the stride is the first zero crossing of the
    autocorrelation measured on a pilot stretch.  A ``StationarityWarning`` is
    issued when the two halves of the sample disagree by more than 5 standard
    errors, or when the sample has collapsed to a point.
    """
    if count < 2:
        raise ValueError("count must be at least 2")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(sys.n) if x0 is None else np.asarray(x0, dtype=float).copy()
    f = lambda y: drift_eval(sys, y)

    def advance(x, nsteps):
        for _ in range(nsteps):
            x = rk4_step(f, x, dt)
        if not (np.all(np.isfinite(x)) and np.linalg.norm(x) <= BLOWUP):
            raise FloatingPointError("trajectory blew up while sampling the equilibrium")
        return x

    with np.errstate(over="ignore", invalid="ignore"):
        x = advance(x, _step_count(burn_T, dt))
        if spacing is None:
            pilot = np.empty((2000, sys.n))
            for k in range(len(pilot)):
                x = advance(x, 1)
                pilot[k] = x
            spacing = _decorrelation_steps(pilot)
        out = np.empty((count, sys.n))
        for k in range(count):
            x = advance(x, spacing)
            out[k] = x

    half = count // 2
    a, b = out[:half], out[half:]
    spread = out.std(axis=0)
    if np.all(spread <= 1e-10 * (1.0 + np.abs(out.mean(axis=0)))):
        warnings.warn("equilibrium sample has collapsed to a single state", StationarityWarning)
    else:
        se = np.sqrt(a.var(axis=0, ddof=1) / len(a) + b.var(axis=0, ddof=1) / len(b))
        for stat_a, stat_b, s in (
            (a.mean(axis=0), b.mean(axis=0), se),
            (a.var(axis=0), b.var(axis=0), np.sqrt(2.0 / len(a)) * (a.var(axis=0) + b.var(axis=0)) / np.sqrt(2.0)),
        ):
            if np.any(np.abs(stat_a - stat_b) > 5 * np.maximum(s, 1e-300)):
                warnings.warn("first and second halves of the equilibrium sample differ", StationarityWarning)
                break
    return out
