"""Discretised paths on the trial manifold: extremal paths and path MCMC.

Any object ``lag`` with ``lag(lam_mid, lam_dot) -> values`` (batched over
leading axes, ``inf`` outside the manifold) and an integer ``lag.dim`` can
drive these routines; :class:`~pathclosure.lagrangian.ClosureLagrangian` is
the one built from a dynamical system and a trial family.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
import scipy.optimize

EndpointMode = Literal["fixed-both", "fixed-start-free-end"]
ENDPOINT_MODES = ("fixed-both", "fixed-start-free-end")


@dataclass(frozen=True)
class DiscretePath:
    t0: float
    t1: float
    knots: np.ndarray

    def __post_init__(self):
        knots = np.array(self.knots, dtype=float)
        if knots.ndim == 1:
            knots = knots[:, None]
        if knots.ndim != 2 or knots.shape[0] < 2:
            raise ValueError("a path needs at least two knots")
        if not self.t1 > self.t0:
            raise ValueError("t1 must exceed t0")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def N(self) -> int:
        return self.knots.shape[0] - 1

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.N

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.N + 1)

    @classmethod
    def straight(cls, start, end, t0: float, t1: float, N: int) -> DiscretePath:
        start = np.atleast_1d(np.asarray(start, dtype=float))
        end = np.atleast_1d(np.asarray(end, dtype=float))
        s = np.linspace(0.0, 1.0, N + 1)[:, None]
        return cls(t0, t1, (1 - s) * start + s * end)

    @classmethod
    def from_function(cls, fn: Callable[[float], Sequence[float]], t0, t1, N) -> DiscretePath:
        ts = t0 + (t1 - t0) * np.arange(N + 1) / N
        return cls(t0, t1, np.array([np.atleast_1d(fn(t)) for t in ts], dtype=float))


def segment_terms(lag, knots: np.ndarray, dt: float) -> np.ndarray:
    """``dt * L(midpoint, difference quotient)`` for every segment (batched).

    A segment is ``inf`` when either end knot is off the manifold, even if
    its midpoint is not.
    """
    knots = np.asarray(knots, dtype=float)
    mid = 0.5 * (knots[..., 1:, :] + knots[..., :-1, :])
    vel = (knots[..., 1:, :] - knots[..., :-1, :]) / dt
    vals = dt * lag(mid, vel)
    if hasattr(lag, "normalizable"):
        ok = lag.normalizable(knots)
        vals = np.where(ok[..., 1:] & ok[..., :-1], vals, np.inf)
    return vals


def path_action(lag, path: DiscretePath) -> float:
    return float(np.sum(segment_terms(lag, path.knots, path.dt)))


def _free_slice(N: int, endpoint_mode: str) -> range:
    if endpoint_mode == "fixed-both":
        return range(1, N)
    if endpoint_mode == "fixed-start-free-end":
        return range(1, N + 1)
    raise ValueError(f"endpoint_mode must be one of {ENDPOINT_MODES}")


def action_gradient(lag, path: DiscretePath, endpoint_mode: str = "fixed-both") -> np.ndarray:
    """Central-difference gradient of the action over the free knots.

    Returns an array of shape ``(n_free, m)``.  Each knot only touches its two
    neighbouring segments, so every other knot is perturbed at once and each
    probe costs one batched sweep over the segments.  If a probe leaves the
    manifold the difference falls back to one side and a ``RuntimeWarning``
    is issued.
    """
    knots = path.knots
    N, m = path.N, knots.shape[1]
    dt = path.dt
    free = np.array(_free_slice(N, endpoint_mode))
    grad = np.zeros((len(free), m))
    if len(free) == 0:
        return grad
    base = segment_terms(lag, knots, dt)
    one_sided = False
    for j in range(m):
        for parity in (0, 1):
            sel = free[free % 2 == parity]
            if len(sel) == 0:
                continue
            h = 1e-6 * (1.0 + np.abs(knots[sel, j]))
            local = {}
            for sign in (1.0, -1.0):
                probe = knots.copy()
                probe[sel, j] += sign * h
                seg = segment_terms(lag, probe, dt)
                local[sign] = _knot_sums(seg, sel, N)
            centre = _knot_sums(base, sel, N)
            plus, minus = local[1.0], local[-1.0]
            g = (plus - minus) / (2 * h)
            bad_p = ~np.isfinite(plus)
            bad_m = ~np.isfinite(minus)
            if np.any(bad_p | bad_m):
                one_sided = True
                g = np.where(bad_p & ~bad_m, (centre - minus) / h, g)
                g = np.where(bad_m & ~bad_p, (plus - centre) / h, g)
            rows = np.searchsorted(free, sel)
            grad[rows, j] = g
    if one_sided:
        warnings.warn("action_gradient used one-sided differences at the manifold edge", RuntimeWarning)
    return grad


def _knot_sums(seg: np.ndarray, sel: np.ndarray, N: int) -> np.ndarray:
    # segments k-1 and k touch knot k
    left = seg[sel - 1]
    right = np.where(sel < N, seg[np.minimum(sel, N - 1)], 0.0)
    return left + right


def _knot_gradients(lag, knots: np.ndarray, dt: float) -> np.ndarray:
    """Exact action gradient at every knot, batched over leading axes."""
    mid = 0.5 * (knots[..., 1:, :] + knots[..., :-1, :])
    vel = (knots[..., 1:, :] - knots[..., :-1, :]) / dt
    _, d_lam, d_dot = lag.value_and_grad(mid, vel)
    # segment k = dt * L(mid_k, vel_k) touches knots k and k+1
    full = np.zeros_like(knots)
    full[..., :-1, :] += 0.5 * dt * d_lam - d_dot
    full[..., 1:, :] += 0.5 * dt * d_lam + d_dot
    return full


def analytic_action_gradient(lag, path: DiscretePath, endpoint_mode: str = "fixed-both") -> np.ndarray:
    """Exact gradient over the free knots for Lagrangians with ``value_and_grad``."""
    free = list(_free_slice(path.N, endpoint_mode))
    return _knot_gradients(lag, path.knots, path.dt)[free]


@dataclass
class ExtremalResult:
    path: DiscretePath
    action: float
    converged: bool
    grad_norm: float
    iterations: int
    initial_action: float
    message: str = ""


def minimal_residual_path(lag, lam0, T: float, N: int, t0: float = 0.0) -> DiscretePath | None:
    """RK4 path of ``lam' = argmin_v L(lam, v)``; ``None`` if it leaves the manifold.

    Needs ``lag.value_and_grad`` and ``lag.fisher``.  The Lagrangian is
    quadratic in the velocity with Hessian equal to the Fisher metric, so the
    minimiser is ``-g^{-1} dL/dv`` evaluated at ``v = 0``.
    """
    lam0 = np.atleast_1d(np.asarray(lam0, dtype=float))

    def flow(lam):
        _, _, d_dot = lag.value_and_grad(lam[None], np.zeros((1, lam.size)))
        g = np.asarray(lag.fisher(lam[None]))[0]
        return -np.linalg.lstsq(g, d_dot[0], rcond=None)[0]

    dt = T / N
    knots = np.empty((N + 1, lam0.size))
    knots[0] = lam0
    with np.errstate(all="ignore"):
        for k in range(N):
            y = knots[k]
            k1 = flow(y)
            k2 = flow(y + 0.5 * dt * k1)
            k3 = flow(y + 0.5 * dt * k2)
            k4 = flow(y + dt * k3)
            knots[k + 1] = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(knots[k + 1])):
                return None
    return DiscretePath(t0, t0 + T, knots)


def _banded_hessian(lag, path: DiscretePath, mode: str, h: float = 1e-5) -> np.ndarray:
    """Upper band storage of the action Hessian over the free knots.

    Knot k only interacts with knots k-1 and k+1, so knots three apart can be
    perturbed together; ``6 m`` exact-gradient calls give the whole matrix.
    """
    knots = path.knots
    m = knots.shape[1]
    free = np.array(_free_slice(path.N, mode))
    nf = len(free)
    u = 2 * m - 1
    probes = []
    for colour in range(3):
        for j in range(m):
            for sign in (1.0, -1.0):
                probe = knots.copy()
                probe[free[colour::3], j] += sign * h
                probes.append(probe)
    grads = _knot_gradients(lag, np.array(probes), path.dt)[:, free]
    H = np.zeros((nf * m, nf * m))
    for colour in range(3):
        for j in range(m):
            k = 2 * (colour * m + j)
            dg = (grads[k] - grads[k + 1]) / (2 * h)
            for i in range(colour, nf, 3):
                lo, hi = max(i - 1, 0), min(i + 2, nf)
                H[lo * m : hi * m, i * m + j] = dg[lo:hi].ravel()
    H = 0.5 * (H + H.T)
    ab = np.zeros((u + 1, nf * m))
    for d in range(u + 1):
        ab[u - d, d:] = np.diagonal(H, d)
    return ab


def _newton_polish(lag, path: DiscretePath, mode: str, tol: float, max_steps: int):
    """Damped Newton on the free knots; returns ``(path, S, grad_norm, steps, converged)``."""
    import scipy.linalg

    free = np.array(_free_slice(path.N, mode))
    m = path.knots.shape[1]
    S = path_action(lag, path)
    g = analytic_action_gradient(lag, path, mode)
    mu = 0.0
    steps = 0
    for steps in range(1, max_steps + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol * (1.0 + abs(S)):
            return path, S, gnorm, steps - 1, True
        ab = _banded_hessian(lag, path, mode)
        scale = float(np.max(np.abs(ab[-1]))) or 1.0
        mu = max(mu / 10.0, 1e-14 * scale)
        accepted = False
        for _ in range(40):
            band = ab.copy()
            band[-1] += mu
            try:
                step = scipy.linalg.solveh_banded(band, -g.ravel())
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            knots = path.knots.copy()
            knots[free] += step.reshape(-1, m)
            trial = DiscretePath(path.t0, path.t1, knots)
            S_new = path_action(lag, trial)
            if np.isfinite(S_new):
                g_new = analytic_action_gradient(lag, trial, mode)
                if S_new < S or (S_new <= S * (1 + 1e-12) and np.linalg.norm(g_new) < gnorm):
                    path, S, g = trial, S_new, g_new
                    accepted = True
                    break
            mu = max(mu * 10.0, 1e-14 * scale)
        if not accepted:
            break
    gnorm = float(np.linalg.norm(g))
    return path, S, gnorm, steps, gnorm <= tol * (1.0 + abs(S))


def extremal_path(
    lag,
    lam0,
    T: float,
    N: int,
    end=None,
    tol: float = 1e-8,
    max_iter: int = 20000,
    t0: float = 0.0,
    initial: DiscretePath | None = None,
) -> ExtremalResult:
    """Minimise the discrete action from ``lam0`` with the end fixed at ``end`` or free.

    L-BFGS runs on increments ``d_k = lam_{k+1} - lam_k``, which spreads a
    change at an early knot along the rest of the path.  The gradient is exact
    when ``lag`` provides ``value_and_grad`` and finite-difference otherwise.
    The search starts from the straight line or, when it has lower action,
    from :func:`minimal_residual_path` bent linearly onto the end point;
    ``initial_action`` always refers to the straight line.  With an exact
    gradient a damped Newton iteration on the banded Hessian runs first and
    L-BFGS only takes over if it stalls.
    Stops once the gradient norm is at most ``tol * (1 + |S|)``; if that is
    never reached the best path is returned with ``converged=False``.
    """
    lam0 = np.atleast_1d(np.asarray(lam0, dtype=float))
    m = lam0.size
    mode = "fixed-start-free-end" if end is None else "fixed-both"
    if initial is None:
        target = lam0 if end is None else np.atleast_1d(np.asarray(end, dtype=float))
        initial = DiscretePath.straight(lam0, target, t0, t0 + T, N)
    initial_action = path_action(lag, initial)
    exact = hasattr(lag, "value_and_grad")
    start = initial
    if exact and hasattr(lag, "fisher"):
        # warm start: follow the minimal-residual flow, then bend it onto the end
        warm = minimal_residual_path(lag, lam0, T, N, t0)
        if warm is not None:
            if end is not None:
                frac = np.linspace(0.0, 1.0, N + 1)[:, None]
                warm = DiscretePath(t0, t0 + T, warm.knots + frac * (initial.knots[-1] - warm.knots[-1]))
            if path_action(lag, warm) < initial_action:
                start = warm
    knots0 = start.knots.copy()
    lam_end = knots0[-1].copy()
    nfree = N if end is None else N - 1

    def gradient(p: DiscretePath) -> np.ndarray:
        if exact:
            return analytic_action_gradient(lag, p, mode)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return action_gradient(lag, p, mode)

    if nfree == 0:
        return ExtremalResult(initial, initial_action, True, 0.0, 0, initial_action, "no free knots")

    def unpack(z):
        inc = z.reshape(nfree, m)
        knots = np.empty((N + 1, m))
        knots[0] = lam0
        knots[1 : nfree + 1] = lam0 + np.cumsum(inc, axis=0)
        if end is not None:
            knots[N] = lam_end
        return DiscretePath(t0, t0 + T, knots)

    def fun(z):
        p = unpack(z)
        S = path_action(lag, p)
        if not np.isfinite(S):
            return math.inf, np.zeros_like(z)
        g = gradient(p)
        # d S / d inc_j = sum_{k > j} d S / d lam_k
        g_inc = np.cumsum(g[::-1], axis=0)[::-1]
        return S, g_inc.ravel()

    iterations = 0
    if exact:
        polished, S_new, gnorm, iterations, converged = _newton_polish(lag, start, mode, tol, 50)
        if converged:
            return ExtremalResult(polished, S_new, True, gnorm, iterations, initial_action, "newton")
        knots0 = polished.knots.copy()
        start = polished
    z = np.diff(knots0[: nfree + 1], axis=0).ravel()
    best_S, best_z = path_action(lag, start), z
    message = ""
    converged = False
    gnorm = math.inf
    while iterations < max_iter:
        res = scipy.optimize.minimize(
            fun,
            best_z,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": max_iter - iterations, "maxcor": 30, "ftol": 0.0, "gtol": 0.0},
        )
        iterations += int(res.nit)
        message = str(res.message)
        if np.isfinite(res.fun) and res.fun <= best_S:
            best_S, best_z = float(res.fun), res.x
        gnorm = float(np.linalg.norm(gradient(unpack(best_z))))
        if gnorm <= tol * (1.0 + abs(best_S)):
            converged = True
            break
        if res.nit == 0:
            break
    return ExtremalResult(unpack(best_z), best_S, converged, gnorm, iterations, initial_action, message)


# ---------------------------------------------------------------------------
# MCMC


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 4
    samples_per_chain: int = 1000
    burn_in: int = 500
    thin: int = 10
    proposal_scale: float = 0.1
    seed: int = 0
    endpoint_mode: str = "fixed-start-free-end"
    adapt_every: int = 25
    target_acceptance: tuple[float, float] = (0.3, 0.5)

    def __post_init__(self):
        if self.chains < 1 or self.samples_per_chain < 1 or self.thin < 1 or self.burn_in < 0:
            raise ValueError("chains, samples_per_chain and thin must be positive; burn_in >= 0")
        if not (math.isfinite(self.proposal_scale) and self.proposal_scale > 0):
            raise ValueError("proposal_scale must be positive and finite")
        if self.endpoint_mode not in ENDPOINT_MODES:
            raise ValueError(f"endpoint_mode must be one of {ENDPOINT_MODES}")
        if self.burn_in >= self.burn_in + self.samples_per_chain * self.thin:
            raise ValueError("burn_in must be shorter than the run")

    @property
    def total_sweeps(self) -> int:
        return self.burn_in + self.samples_per_chain * self.thin


@dataclass
class McmcResult:
    times: np.ndarray
    paths: np.ndarray  # (chains, samples, N+1, m)
    actions: np.ndarray  # (chains, samples)
    acceptance: np.ndarray  # per chain, post burn-in
    scales: np.ndarray  # frozen proposal scale per chain
    warnings: list[str] = field(default_factory=list)

    @property
    def endpoints(self) -> np.ndarray:
        """Endpoint draws flattened in chain order, shape ``(chains*samples, m)``."""
        return self.paths[:, :, -1, :].reshape(-1, self.paths.shape[-1])

    @property
    def acceptance_rate(self) -> float:
        return float(self.acceptance.mean())


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Private generator of one chain; independent of how many chains run."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(chain,)))


def metropolis_accept(delta_s, u) -> np.ndarray:
    """Accept when ``u < exp(-delta_s)``; infinite action changes always reject."""
    delta_s = np.asarray(delta_s, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        prob = np.where(np.isfinite(delta_s), np.exp(-np.minimum(delta_s, 700.0)), 0.0)
    prob = np.where(np.isnan(delta_s), 0.0, prob)
    return u < np.minimum(prob, 1.0)


def acceptance_probability(s_old: float, s_new: float) -> float:
    if not math.isfinite(s_new):
        return 0.0
    return min(1.0, math.exp(-(s_new - s_old)))


_BLOCK = 64


def _run_chains(lag, cfg: McmcConfig, chain_ids: Sequence[int], init_knots: np.ndarray, dt: float):
    C = len(chain_ids)
    N = init_knots.shape[0] - 1
    m = init_knots.shape[1]
    free = list(_free_slice(N, cfg.endpoint_mode))
    nf = len(free)
    rngs = [chain_rng(cfg.seed, c) for c in chain_ids]
    knots = np.broadcast_to(init_knots, (C, N + 1, m)).copy()
    seg = segment_terms(lag, knots, dt)
    if not np.all(np.isfinite(seg)):
        raise ValueError("initial path has infinite action")
    scale = np.full(C, float(cfg.proposal_scale))
    total = cfg.total_sweeps
    paths = np.empty((C, cfg.samples_per_chain, N + 1, m))
    actions = np.empty((C, cfg.samples_per_chain))
    acc_window = np.zeros(C)
    acc_post = np.zeros(C)
    noise = uni = None
    for sweep in range(total):
        b = sweep % _BLOCK
        if b == 0:
            span = min(_BLOCK, total - sweep)
            noise = np.stack([r.standard_normal((span, nf, m)) for r in rngs])
            uni = np.stack([r.random((span, nf)) for r in rngs])
        for f, k in enumerate(free):
            prop = knots[:, k, :] + scale[:, None] * noise[:, b, f, :]
            lo = k - 1
            hi = min(k + 1, N)
            local = knots[:, lo : hi + 1, :].copy()
            local[:, 1, :] = prop
            new_seg = segment_terms(lag, local, dt)
            old = seg[:, lo:hi].sum(axis=1)
            dS = new_seg.sum(axis=1) - old
            ok = metropolis_accept(dS, uni[:, b, f])
            knots[ok, k, :] = prop[ok]
            seg[ok, lo:hi] = new_seg[ok]
            if sweep < cfg.burn_in:
                acc_window += ok
            else:
                acc_post += ok
        if sweep < cfg.burn_in and (sweep + 1) % cfg.adapt_every == 0:
            rate = acc_window / (cfg.adapt_every * nf)
            lo_t, hi_t = cfg.target_acceptance
            scale = np.where(rate < lo_t, scale / 1.25, np.where(rate > hi_t, scale * 1.25, scale))
            acc_window[:] = 0
        if sweep >= cfg.burn_in and (sweep - cfg.burn_in + 1) % cfg.thin == 0:
            s = (sweep - cfg.burn_in + 1) // cfg.thin - 1
            paths[:, s] = knots
            actions[:, s] = segment_terms(lag, knots, dt).sum(axis=1)
    post = (total - cfg.burn_in) * nf
    return paths, actions, acc_post / post, scale


def mcmc_sample(
    lag,
    cfg: McmcConfig,
    lam0,
    N: int,
    T: float,
    end=None,
    threads: int = 1,
    t0: float = 0.0,
    initial: DiscretePath | None = None,
) -> McmcResult:
    """Single-knot Metropolis over the free knots of a discretised path.

    Each chain owns a generator derived from ``(cfg.seed, chain index)``;
    proposals are spherical Gaussians whose scale adapts only during
    burn-in.  ``threads`` splits the chains into contiguous groups; the
    output does not depend on it.
    """
    lam0 = np.atleast_1d(np.asarray(lam0, dtype=float))
    if cfg.endpoint_mode == "fixed-both" and end is None:
        raise ValueError("fixed-both mode needs an end point")
    if initial is None:
        target = lam0 if end is None else np.atleast_1d(np.asarray(end, dtype=float))
        initial = DiscretePath.straight(lam0, target, t0, t0 + T, N)
    init = initial.knots
    dt = initial.dt
    ids = list(range(cfg.chains))
    threads = max(1, min(int(threads), cfg.chains))
    groups = [g.tolist() for g in np.array_split(np.array(ids), threads)]
    if threads == 1:
        parts = [_run_chains(lag, cfg, groups[0], init, dt)]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda g: _run_chains(lag, cfg, g, init, dt), groups))
    paths = np.concatenate([p[0] for p in parts])
    actions = np.concatenate([p[1] for p in parts])
    acc = np.concatenate([p[2] for p in parts])
    scales = np.concatenate([p[3] for p in parts])
    notes = []
    rate = float(acc.mean())
    if not 0.05 <= rate <= 0.95:
        notes.append(f"acceptance rate {rate:.3f} outside [0.05, 0.95]")
        warnings.warn(notes[-1], RuntimeWarning)
    return McmcResult(initial.times, paths, actions, acc, scales, notes)


def write_mcmc_csv(result: McmcResult, path, header_comment: str | None = None) -> None:
    """Columns: chain, step, S, lambda components at the endpoint."""
    chains, samples = result.actions.shape
    m = result.paths.shape[-1]
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "step", "S"] + [f"lam{i}" for i in range(m)])
        for c in range(chains):
            for s in range(samples):
                w.writerow(
                    [c, s, repr(float(result.actions[c, s]))]
                    + [repr(float(v)) for v in result.paths[c, s, -1]]
                )


# ---------------------------------------------------------------------------
# consistency distribution


@dataclass(frozen=True)
class ConsistencyDistribution:
    edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray
    mode: float
    mean: float

    @property
    def centres(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def consistency_distribution(draws, bins: int | Sequence[float] = 50, range=None) -> ConsistencyDistribution:
    """Normalised histogram of scalar endpoint draws."""
    x = np.asarray(draws, dtype=float).reshape(-1)
    if x.size < 1000:
        raise ValueError(f"need at least 1000 draws, got {x.size}")
    counts, edges = np.histogram(x, bins=bins, range=range)
    widths = np.diff(edges)
    density = counts / (counts.sum() * widths)
    k = int(np.argmax(density))
    return ConsistencyDistribution(
        edges, counts, density, float(0.5 * (edges[k] + edges[k + 1])), float(x.mean())
    )
