"""Experiment configuration: TOML files turned into systems, families and run blocks."""

from __future__ import annotations

import hashlib
import json
import sys as _sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

if _sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dynsys import BUILTINS, DynamicalSystem, load_system, make_builtin
from .polymoment import Polynomial
from .trialdensity import (
    TrialFamily,
    _quadratic_parts,
    fit_psi,
    fixed_covariance_family,
    gaussian_family,
    monomial_family,
)


class ConfigError(ValueError):
    """Invalid or incomplete configuration; the message names the offending field."""


SEEDED_BLOCKS = ("mcmc", "ensemble", "validate")


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def from_file(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, path.parent)

    @classmethod
    def from_text(cls, text: str, base_dir: str | Path = ".") -> ExperimentConfig:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config parse error: {exc}") from None
        cfg = cls(raw, Path(base_dir))
        cfg.check()
        return cfg

    def check(self) -> None:
        if "system" not in self.raw:
            raise ConfigError("missing [system] block")
        if "family" not in self.raw:
            raise ConfigError("missing [family] block")
        for name in SEEDED_BLOCKS:
            if name in self.raw and "seed" not in self.raw[name]:
                raise ConfigError(f"[{name}] is stochastic and needs an explicit 'seed'")
        fit = self.raw["family"].get("psi_fit")
        if fit is not None and "seed" not in fit:
            raise ConfigError("[family.psi_fit] needs an explicit 'seed'")

    def block(self, name: str, required: bool = True) -> dict:
        if name not in self.raw:
            if required:
                raise ConfigError(f"missing [{name}] block")
            return {}
        return self.raw[name]

    @property
    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of the parsed configuration."""
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))


def _get(block: dict, key: str, where: str, kind=None, default: Any = ...):
    if key not in block:
        if default is ...:
            raise ConfigError(f"[{where}] is missing '{key}'")
        return default
    value = block[key]
    if kind is not None:
        try:
            value = kind(value)
        except (TypeError, ValueError):
            raise ConfigError(f"[{where}] '{key}' has an invalid value {value!r}") from None
    return value


def _vector(block: dict, key: str, where: str, size: int | None = None, default: Any = ...):
    value = _get(block, key, where, default=default)
    if value is None:
        return None
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"[{where}] '{key}' must be numeric") from None
    if size is not None and arr.shape != (size,):
        raise ConfigError(f"[{where}] '{key}' must have length {size}, got shape {arr.shape}")
    return arr


def build_system(cfg: ExperimentConfig) -> DynamicalSystem:
    block = cfg.block("system")
    if "file" in block:
        path = cfg.base_dir / block["file"]
        try:
            return load_system(path)
        except OSError as exc:
            raise ConfigError(f"[system] cannot read drift file {path}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"[system] drift file {path}: {exc}") from None
    name = _get(block, "name", "system", str)
    if name not in BUILTINS:
        raise ConfigError(f"[system] unknown builtin {name!r}; choose from {BUILTINS} or give 'file'")
    params = {k: v for k, v in block.items() if k != "name"}
    try:
        return make_builtin(name, **params)
    except KeyError as exc:
        raise ConfigError(f"[system] builtin {name!r} needs parameter {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"[system] {exc}") from None


def _psi_from_terms(terms, n: int) -> Polynomial:
    out = {}
    for row in terms:
        if len(row) != n + 1:
            raise ConfigError(f"[family] each psi term is [coef, e1..e{n}]")
        exps = tuple(int(e) for e in row[1:])
        out[exps] = out.get(exps, 0.0) + float(row[0])
    return Polynomial(n, out)


def build_family(cfg: ExperimentConfig, sys: DynamicalSystem) -> TrialFamily:
    """Family from ``kind`` (monomials, gaussian, fixed-covariance) plus psi and beta."""
    from .oracle import equilibrium_sample

    block = cfg.block("family")
    n = sys.n
    kind = _get(block, "kind", "family", str, "monomials")
    beta = _get(block, "beta", "family", float, None)
    psi = Polynomial.zero(n)
    if "psi_fit" in block:
        fit = block["psi_fit"]
        sample = equilibrium_sample(
            sys,
            _get(fit, "burn_T", "family.psi_fit", float),
            _get(fit, "count", "family.psi_fit", int),
            _get(fit, "dt", "family.psi_fit", float),
            _get(fit, "seed", "family.psi_fit", int),
        )
        psi, fitted_beta = fit_psi(sample)
        beta = fitted_beta if beta is None else beta
    elif "psi_file" in block:
        psi = Polynomial.zero(n) + _read_poly(cfg.base_dir / block["psi_file"], n)
    elif "psi" in block:
        psi = _psi_from_terms(block["psi"], n)
    try:
        if kind == "gaussian":
            if not psi.is_zero() or beta:
                raise ConfigError("[family] kind 'gaussian' takes no psi")
            return gaussian_family(n)
        if kind == "fixed-covariance":
            return fixed_covariance_family(n, psi, 1.0 if beta is None else beta)
        if kind == "monomials":
            monos = _get(block, "monomials", "family")
            if any(len(e) != n for e in monos):
                raise ConfigError(f"[family] every monomial needs {n} exponents")
            return monomial_family(monos, psi, 0.0 if beta is None else beta)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[family] {exc}") from None
    raise ConfigError(f"[family] unknown kind {kind!r}; use monomials, gaussian or fixed-covariance")


def _read_poly(path: Path, n: int) -> Polynomial:
    from .polymoment import poly_from_text

    try:
        return poly_from_text(path.read_text(), n)
    except OSError as exc:
        raise ConfigError(f"cannot read polynomial file {path}: {exc}") from None


def reference_covariance(family: TrialFamily) -> np.ndarray:
    """Covariance of ``exp(-beta psi)``; the only one a fixed-covariance family reaches."""
    A, _, _ = _quadratic_parts(family.psi)
    P = 2.0 * family.beta * A
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise ConfigError("give 'cov' explicitly: the reference function is not a normalizable weight") from None
    return np.linalg.inv(P)


def natural_point(block: dict, where: str, family: TrialFamily, prefix: str) -> np.ndarray | None:
    """``<prefix>lam`` directly, or ``<prefix>mean`` (+ ``<prefix>cov``) mapped to natural parameters."""
    lam = _vector(block, f"{prefix}lam", where, family.m, None)
    if lam is not None:
        return lam
    mean = _vector(block, f"{prefix}mean", where, family.n, None)
    if mean is None:
        return None
    cov = _get(block, f"{prefix}cov", where, default=None)
    cov = reference_covariance(family) if cov is None else np.asarray(cov, dtype=float)
    try:
        return family.natural_from_moments(mean, cov)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ConfigError(f"[{where}] {prefix}mean/{prefix}cov: {exc}") from None
