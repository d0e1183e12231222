"""Command-line experiment runner.

    pathclosure <validate|extremal|mcmc|ensemble|ilscan|reconcile> --config run.toml --out results/

Every output file starts with the SHA-256 of the parsed configuration, and
nothing time- or host-dependent is written to disk, so rerunning a config
reproduces its files byte for byte.  Wall time goes to stdout.
"""

from __future__ import annotations

import argparse
import csv
import math
import platform
import sys as _sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, ExperimentConfig, _get, _vector, build_family, build_system, natural_point
from .dynsys import apply_L, apply_Lstar
from .lagrangian import (
    ClosureLagrangian,
    ResidualContext,
    lagrangian_direct,
    mean_residual,
    reconcile,
)
from .oracle import ensemble_evolve, information_loss_direct
from .pathspace import McmcConfig, consistency_distribution, extremal_path, mcmc_sample, write_mcmc_csv
from .polymoment import GaussianMoments, Polynomial, gaussian_expectation
from .trialdensity import NonNormalizable, TrialFamily, to_gaussian

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_NUMERIC = 4
EXIT_VALIDATION = 5

COMMANDS = ("validate", "extremal", "mcmc", "ensemble", "ilscan", "reconcile")


class ValidationFailed(RuntimeError):
    pass


def _num(x) -> str:
    return repr(float(x))


class Run:
    """Shared state for one subcommand: parsed config, system, family, output directory."""

    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int = 1):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.sys = build_system(cfg)
        self.family = build_family(cfg, self.sys)
        if self.family.n != self.sys.n:
            raise ConfigError("[family] dimension does not match [system]")
        self.files: list[str] = []

    @property
    def header(self) -> str:
        return f"config_sha256={self.cfg.digest}"

    def csv(self, name: str, columns, rows) -> None:
        path = self.out / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.header}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            w.writerows(rows)
        self.files.append(name)

    def summary(self, command: str, fields: dict) -> None:
        lines = [
            f"# {self.header}",
            f"command = {command}",
            f"package = {__version__}",
            f"numpy = {np.__version__}",
            f"scipy = {scipy.__version__}",
            f"python = {platform.python_version()}",
            f"system = {self.sys.name}",
            f"state_dim = {self.sys.n}",
            f"family_dim = {self.family.m}",
        ]
        seeds = {
            name: block["seed"]
            for name, block in self.cfg.raw.items()
            if isinstance(block, dict) and "seed" in block
        }
        lines.append("seeds = " + ", ".join(f"{k}:{v}" for k, v in sorted(seeds.items())))
        lines += [f"{k} = {v}" for k, v in fields.items()]
        lines.append(f"files = {', '.join(self.files)}")
        lines.append(f"config = {self.cfg.canonical()}")
        (self.out / f"{command}_summary.txt").write_text("\n".join(lines) + "\n")

    def start(self, block: dict, where: str) -> np.ndarray:
        lam0 = natural_point(block, where, self.family, "")
        if lam0 is None:
            raise ConfigError(f"[{where}] needs 'lam' or 'mean' for the starting point")
        return lam0


def _path_block(run: Run) -> tuple[dict, np.ndarray, float, int, np.ndarray | None]:
    block = run.cfg.block("path")
    lam0 = run.start(block, "path")
    T = _get(block, "T", "path", float)
    N = _get(block, "N", "path", int)
    if N < 1 or not T > 0:
        raise ConfigError("[path] needs N >= 1 and T > 0")
    end = natural_point(block, "path", run.family, "end_")
    return block, lam0, T, N, end


def run_extremal(run: Run) -> dict:
    block, lam0, T, N, end = _path_block(run)
    opts = run.cfg.block("extremal", required=False)
    lag = ClosureLagrangian(run.sys, run.family)
    res = extremal_path(
        lag,
        lam0,
        T,
        N,
        end=end,
        tol=_get(opts, "tol", "extremal", float, 1e-8),
        max_iter=_get(opts, "max_iter", "extremal", int, 20000),
    )
    means = _q_means(run.family, res.path.knots)
    m = run.family.m
    cols = ["t"] + [f"lam{i}" for i in range(m)] + [f"q{i}" for i in range(m)]
    rows = [
        [_num(t)] + [_num(v) for v in res.path.knots[k]] + [_num(v) for v in means[k]]
        for k, t in enumerate(res.path.times)
    ]
    run.csv("extremal.csv", cols, rows)
    fields = {
        "S_cl": _num(res.action),
        "initial_action": _num(res.initial_action),
        "converged": res.converged,
        "grad_norm": _num(res.grad_norm),
        "iterations": res.iterations,
        "endpoint_mode": "fixed-start-free-end" if end is None else "fixed-both",
    }
    run.summary("extremal", fields)
    return fields


def _q_means(family: TrialFamily, knots: np.ndarray) -> np.ndarray:
    """``<Q_i>`` at each knot by the exact moment route."""
    mean, cov, ok = family.moments(knots)
    out = np.full((len(knots), family.m), np.nan)
    for k in np.nonzero(ok)[0]:
        g = GaussianMoments(mean[k], cov[k])
        out[k] = [gaussian_expectation(q, g) for q in family.Q]
    return out


def run_mcmc(run: Run) -> dict:
    block, lam0, T, N, end = _path_block(run)
    mb = run.cfg.block("mcmc")
    cfg = McmcConfig(
        chains=_get(mb, "chains", "mcmc", int, 4),
        samples_per_chain=_get(mb, "samples_per_chain", "mcmc", int, 1000),
        burn_in=_get(mb, "burn_in", "mcmc", int, 500),
        thin=_get(mb, "thin", "mcmc", int, 10),
        proposal_scale=_get(mb, "proposal_scale", "mcmc", float, 0.1),
        seed=_get(mb, "seed", "mcmc", int),
        endpoint_mode=_get(mb, "endpoint_mode", "mcmc", str, "fixed-start-free-end"),
    )
    lag = ClosureLagrangian(run.sys, run.family)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = mcmc_sample(lag, cfg, lam0, N, T, end=end, threads=run.threads)
    path = run.out / "mcmc.csv"
    write_mcmc_csv(res, path, run.header)
    run.files.append("mcmc.csv")
    ends = res.endpoints
    rows = []
    if len(ends) >= 1000 and cfg.endpoint_mode == "fixed-start-free-end":
        for i in range(ends.shape[1]):
            dist = consistency_distribution(ends[:, i], bins=_get(mb, "bins", "mcmc", int, 50))
            for b in range(len(dist.counts)):
                rows.append(
                    [i, _num(dist.edges[b]), _num(dist.edges[b + 1]), int(dist.counts[b]), _num(dist.density[b])]
                )
        run.csv("consistency.csv", ["component", "left", "right", "count", "density"], rows)
    fields = {
        "acceptance_rate": _num(res.acceptance_rate),
        "acceptance_per_chain": " ".join(_num(a) for a in res.acceptance),
        "proposal_scale_per_chain": " ".join(_num(s) for s in res.scales),
        "min_action": _num(res.actions.min()),
        "mean_action": _num(res.actions.mean()),
        "endpoint_mean": " ".join(_num(v) for v in ends.mean(axis=0)),
        "warnings": "; ".join(res.warnings) or "none",
    }
    run.summary("mcmc", fields)
    return fields


def run_ensemble(run: Run) -> dict:
    eb = run.cfg.block("ensemble")
    pb = run.cfg.block("path", required=False)
    lam0 = run.start(pb if pb else eb, "path" if pb else "ensemble")
    res = ensemble_evolve(
        run.sys,
        run.family.point(lam0),
        _get(eb, "count", "ensemble", int),
        _get(eb, "T", "ensemble", float),
        _get(eb, "dt", "ensemble", float),
        _get(eb, "seed", "ensemble", int),
        record_every=_get(eb, "record_every", "ensemble", int, 1),
    )
    rows = [
        [_num(t), i, _num(res.moments[k, i]), _num(res.stderr[k, i])]
        for k, t in enumerate(res.times)
        for i in range(res.moments.shape[1])
    ]
    run.csv("ensemble.csv", ["t", "q", "mean", "stderr"], rows)
    fields = {"count": res.count, "excluded": res.excluded, "final_mean": " ".join(_num(v) for v in res.moments[-1])}
    run.summary("ensemble", fields)
    return fields


def _slope(x, y) -> float:
    x, y = np.log(np.asarray(x)), np.log(np.abs(np.asarray(y)))
    return float(np.polyfit(x, y, 1)[0])


def run_ilscan(run: Run) -> dict:
    """Information loss of one trial step against ``(dt^2/2) <R^2>`` over a range of ``dt``.

    The trial path is ``lam + t lam_dot + t^2 lam_ddot / 2``; ``<R^2>`` is taken at ``t = 0``.
    """
    ib = run.cfg.block("ilscan")
    m = run.family.m
    lam = run.start(ib, "ilscan")
    lam_dot = _vector(ib, "lam_dot", "ilscan", m)
    lam_ddot = _vector(ib, "lam_ddot", "ilscan", m, np.zeros(m))
    dts = _vector(ib, "dts", "ilscan", None, np.logspace(-1, -3, 9))
    r2 = 2.0 * lagrangian_direct(ResidualContext(run.sys, run.family, lam, lam_dot))
    rows, ils, rems = [], [], []
    for dt in dts:
        nxt = lam + dt * lam_dot + 0.5 * dt * dt * lam_ddot
        il = information_loss_direct(run.sys, run.family, lam, nxt, dt)
        pred = 0.5 * dt * dt * r2
        ils.append(il)
        rems.append(il - pred)
        rows.append([_num(dt), _num(il), _num(pred), _num(il / pred if pred else math.nan), _num(il - pred)])
    run.csv("ilscan.csv", ["dt", "IL", "predicted", "ratio", "remainder"], rows)
    fields = {
        "R2": _num(r2),
        "il_slope": _num(_slope(dts, ils)),
        "remainder_slope": _num(_slope(dts, rems)) if np.all(np.abs(rems) > 0) else "nan",
        "ratio_at_smallest_dt": rows[int(np.argmin(dts))][3],
    }
    run.summary("ilscan", fields)
    return fields


def run_reconcile(run: Run) -> dict:
    rb = run.cfg.block("reconcile")
    lam = run.start(rb, "reconcile")
    lam_dot = _vector(rb, "lam_dot", "reconcile", run.family.m)
    rep = reconcile(ResidualContext(run.sys, run.family, lam, lam_dot))
    fields = {k: getattr(rep, k) for k in rep.__dataclass_fields__}
    run.csv("reconcile.csv", ["quantity", "value"], [[k, repr(v if isinstance(v, bool) else float(v))] for k, v in fields.items()])
    run.summary("reconcile", {k: (v if isinstance(v, bool) else _num(v)) for k, v in fields.items()})
    return fields


def _random_poly(rng: np.random.Generator, n: int, degree: int, terms: int) -> Polynomial:
    out = {}
    for _ in range(terms):
        e = [0] * n
        for _ in range(int(rng.integers(0, degree + 1))):
            e[int(rng.integers(n))] += 1
        out[tuple(e)] = out.get(tuple(e), 0.0) + float(rng.normal())
    return Polynomial(n, out)


def run_validate(run: Run) -> dict:
    """Residual mean, fast-vs-exact Lagrangian, adjoint identity and the Gamma check."""
    vb = run.cfg.block("validate")
    rng = np.random.default_rng(_get(vb, "seed", "validate", int))
    samples = _get(vb, "samples", "validate", int, 20)
    tol = _get(vb, "tol", "validate", float, 1e-10)
    pb = run.cfg.block("path", required=False)
    base = natural_point(pb, "path", run.family, "") if pb else None
    if base is None:
        base = natural_point(vb, "validate", run.family, "")
    if base is None:
        raise ConfigError("[validate] needs a base point ('lam' or 'mean') here or in [path]")
    spread = _get(vb, "spread", "validate", float, 0.1)
    lag = ClosureLagrangian(run.sys, run.family)
    sys, fam = run.sys, run.family
    results = []

    worst_mean = worst_fast = 0.0
    used = 0
    for _ in range(20 * samples):
        if used == samples:
            break
        lam = base + spread * rng.normal(size=fam.m) * (1.0 + np.abs(base))
        lam_dot = rng.normal(size=fam.m)
        ctx = ResidualContext(sys, fam, lam, lam_dot)
        try:
            direct = lagrangian_direct(ctx)
            mr = mean_residual(ctx)
        except NonNormalizable:
            continue
        used += 1
        worst_mean = max(worst_mean, abs(mr) / (1.0 + math.sqrt(2 * direct)))
        fast = float(lag(lam, lam_dot))
        worst_fast = max(worst_fast, abs(fast - direct) / (1.0 + abs(direct)))
    if used == 0:
        raise ValidationFailed("no normalizable sample points around the base point")
    results.append(("mean_residual", worst_mean, tol))
    results.append(("fast_vs_exact_lagrangian", worst_fast, 1e-9))

    g = to_gaussian(fam.point(base))
    worst_adj = 0.0
    for _ in range(samples):
        F = _random_poly(rng, sys.n, 3, 4)
        identity = apply_L(sys, F) + apply_Lstar(sys, F) - F * sys.divergence
        lhs = gaussian_expectation(apply_L(sys, F), g)
        rhs = -gaussian_expectation(apply_Lstar(sys, F), g) + gaussian_expectation(F * sys.divergence, g)
        coef_scale = 1.0 + max((abs(c) for _, c in apply_L(sys, F).items()), default=0.0)
        symbolic = max((abs(c) for _, c in identity.items()), default=0.0) / coef_scale
        worst_adj = max(worst_adj, symbolic, abs(lhs - rhs) / (1.0 + abs(lhs)))
    results.append(("adjoint_identity", worst_adj, 1e-10))

    gamma = sys.divergence - fam.beta * apply_Lstar(sys, fam.psi)
    expect_zero = sys.divergence.is_zero() and apply_Lstar(sys, fam.psi).is_zero()
    fields = {}
    if expect_zero:
        results.append(("gamma_identically_zero", float(len(gamma)), 0.0))
    else:
        fields["gamma_terms"] = len(gamma)

    rows = [[name, _num(value), _num(limit), str(value <= limit).lower()] for name, value, limit in results]
    run.csv("validate.csv", ["check", "value", "tolerance", "pass"], rows)
    ok = all(value <= limit for _, value, limit in results)
    fields.update({name: f"{_num(value)} (tol {_num(limit)})" for name, value, limit in results})
    fields["samples_used"] = used
    fields["all_passed"] = ok
    run.summary("validate", fields)
    if not ok:
        raise ValidationFailed(", ".join(n for n, v, lim in results if v > lim) + " failed")
    return fields


RUNNERS = {
    "validate": run_validate,
    "extremal": run_extremal,
    "mcmc": run_mcmc,
    "ensemble": run_ensemble,
    "ilscan": run_ilscan,
    "reconcile": run_reconcile,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pathclosure", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="TOML experiment file")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for MCMC chains")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = ExperimentConfig.from_file(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(cfg, out, max(1, args.threads))
        fields = RUNNERS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except ValidationFailed as exc:
        print(f"validation failed: {exc}", file=_sys.stderr)
        return EXIT_VALIDATION
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure in {args.command}: {exc}", file=_sys.stderr)
        return EXIT_NUMERIC
    for k, v in fields.items():
        print(f"{k} = {v}")
    print(f"wall_time_s = {time.perf_counter() - started:.3f}")
    return EXIT_OK


if __name__ == "__main__":
    _sys.exit(main())
