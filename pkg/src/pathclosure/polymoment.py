"""Sparse multivariate polynomials and exact Gaussian moments.

Polynomials are stored as a map from exponent tuples to float coefficients.
Terms are kept in graded lexicographic order so that every reduction over
terms happens in the same sequence on every run.

Two independent routes to Gaussian expectations are provided:

* :func:`gaussian_expectation` centres the polynomial on the mean and
  evaluates each centred monomial with Isserlis' pairing recursion.
* :class:`MomentPlan` evaluates raw (non-centred) moments for a fixed set of
  monomials with Stein's recursion, vectorised over a batch of Gaussians.
  It is the workhorse for path computations.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

#: Degree reported for the zero polynomial.
ZERO_DEGREE = -1

#: Largest total degree accepted by the Isserlis evaluator.
ISSERLIS_DEGREE_CAP = 12


class DimensionError(ValueError):
    """Operands disagree on the number of variables."""


class DomainError(ValueError):
    """A covariance matrix is not positive semidefinite."""


class DegreeCapError(ValueError):
    """Polynomial degree exceeds :data:`ISSERLIS_DEGREE_CAP`."""


def _grlex_key(exps: tuple[int, ...]) -> tuple:
    return (sum(exps), tuple(-e for e in exps))


class Polynomial:
    """Immutable sparse polynomial in ``nvars`` real variables."""

    __slots__ = ("nvars", "_terms")

    def __init__(self, nvars: int, terms: Mapping[Sequence[int], float] | None = None):
        if nvars < 1:
            raise DimensionError(f"nvars must be positive, got {nvars}")
        self.nvars = int(nvars)
        clean: dict[tuple[int, ...], float] = {}
        for exps, coef in (terms or {}).items():
            key = tuple(int(e) for e in exps)
            if len(key) != self.nvars:
                raise DimensionError(
                    f"multi-index {key} has length {len(key)}, expected {self.nvars}"
                )
            if any(e < 0 for e in key):
                raise ValueError(f"negative exponent in {key}")
            clean[key] = clean.get(key, 0.0) + float(coef)
        self._terms = {k: clean[k] for k in sorted(clean, key=_grlex_key) if clean[k] != 0.0}

    # -- constructors -----------------------------------------------------
    @classmethod
    def zero(cls, nvars: int) -> Polynomial:
        return cls(nvars)

    @classmethod
    def constant(cls, nvars: int, value: float) -> Polynomial:
        return cls(nvars, {(0,) * nvars: value})

    @classmethod
    def variable(cls, nvars: int, i: int, coef: float = 1.0) -> Polynomial:
        _check_index(i, nvars)
        exps = [0] * nvars
        exps[i] = 1
        return cls(nvars, {tuple(exps): coef})

    @classmethod
    def monomial(cls, exps: Sequence[int], coef: float = 1.0) -> Polynomial:
        return cls(len(exps), {tuple(exps): coef})

    @classmethod
    def linear(cls, coefs: Sequence[float], const: float = 0.0) -> Polynomial:
        """``const + sum_i coefs[i] x_i``."""
        n = len(coefs)
        terms = {(0,) * n: const}
        for i, c in enumerate(coefs):
            e = [0] * n
            e[i] = 1
            terms[tuple(e)] = c
        return cls(n, terms)

    @classmethod
    def quadratic(cls, mat, vec=None, const: float = 0.0) -> Polynomial:
        """``x^T mat x + vec^T x + const`` (``mat`` need not be symmetric)."""
        mat = np.asarray(mat, dtype=float)
        n = mat.shape[0]
        terms: dict[tuple[int, ...], float] = {(0,) * n: const}
        for i in range(n):
            for j in range(n):
                if mat[i, j] == 0.0:
                    continue
                e = [0] * n
                e[i] += 1
                e[j] += 1
                key = tuple(e)
                terms[key] = terms.get(key, 0.0) + mat[i, j]
        if vec is not None:
            for i, c in enumerate(vec):
                e = [0] * n
                e[i] = 1
                key = tuple(e)
                terms[key] = terms.get(key, 0.0) + float(c)
        return cls(n, terms)

    # -- inspection -------------------------------------------------------
    @property
    def terms(self) -> dict[tuple[int, ...], float]:
        return dict(self._terms)

    def items(self) -> Iterator[tuple[tuple[int, ...], float]]:
        return iter(self._terms.items())

    def coefficient(self, exps: Sequence[int]) -> float:
        return self._terms.get(tuple(exps), 0.0)

    @property
    def degree(self) -> int:
        if not self._terms:
            return ZERO_DEGREE
        return max(sum(k) for k in self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def __bool__(self) -> bool:
        return bool(self._terms)

    def __len__(self) -> int:
        return len(self._terms)

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.nvars == other.nvars and self._terms == other._terms

    def __hash__(self):
        return hash((self.nvars, tuple(self._terms.items())))

    def __repr__(self) -> str:
        if not self._terms:
            return f"Polynomial({self.nvars}, 0)"
        parts = []
        for exps, c in self._terms.items():
            mono = "*".join(
                f"x{i}" if e == 1 else f"x{i}^{e}" for i, e in enumerate(exps) if e
            )
            parts.append(f"{c!r}*{mono}" if mono else repr(c))
        return f"Polynomial({self.nvars}, {' + '.join(parts)})"

    # -- arithmetic -------------------------------------------------------
    def _coerce(self, other) -> Polynomial:
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise DimensionError(f"nvars mismatch: {self.nvars} vs {other.nvars}")
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.nvars, float(other))
        raise TypeError(f"cannot combine Polynomial with {type(other).__name__}")

    def __add__(self, other) -> Polynomial:
        other = self._coerce(other)
        out = dict(self._terms)
        for k, c in other._terms.items():
            out[k] = out.get(k, 0.0) + c
        return Polynomial(self.nvars, out)

    __radd__ = __add__

    def __neg__(self) -> Polynomial:
        return Polynomial(self.nvars, {k: -c for k, c in self._terms.items()})

    def __sub__(self, other) -> Polynomial:
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> Polynomial:
        return self._coerce(other) - self

    def __mul__(self, other) -> Polynomial:
        if isinstance(other, Polynomial):
            return poly_mul(self, other)
        if isinstance(other, (int, float, np.floating, np.integer)):
            s = float(other)
            return Polynomial(self.nvars, {k: s * c for k, c in self._terms.items()})
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other) -> Polynomial:
        return self * (1.0 / float(other))

    def __pow__(self, k: int) -> Polynomial:
        if k < 0:
            raise ValueError("negative power")
        out = Polynomial.constant(self.nvars, 1.0)
        for _ in range(k):
            out = out * self
        return out

    # -- calculus and evaluation -----------------------------------------
    def partial(self, i: int) -> Polynomial:
        return poly_partial(self, i)

    def __call__(self, x) -> np.ndarray | float:
        """Evaluate at points ``x`` of shape ``(..., nvars)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.nvars:
            raise DimensionError(f"point has {x.shape[-1]} coordinates, expected {self.nvars}")
        out = np.zeros(x.shape[:-1])
        for exps, c in self._terms.items():
            term = np.full(x.shape[:-1], c)
            for i, e in enumerate(exps):
                if e:
                    term = term * x[..., i] ** e
            out = out + term
        return out if out.ndim else float(out)

    def shift(self, offset: Sequence[float]) -> Polynomial:
        """Return ``q`` with ``q(c) = p(c + offset)``."""
        offset = [float(v) for v in offset]
        if len(offset) != self.nvars:
            raise DimensionError("offset length mismatch")
        n = self.nvars
        out: dict[tuple[int, ...], float] = {}
        for exps, c in self._terms.items():
            # expand prod_i (c_i + m_i)^e_i one variable at a time
            partial_terms: dict[tuple[int, ...], float] = {(0,) * n: c}
            for i, e in enumerate(exps):
                if e == 0:
                    continue
                m = offset[i]
                expanded: dict[tuple[int, ...], float] = {}
                for key, val in partial_terms.items():
                    for k in range(e + 1):
                        w = comb(e, k) * (m ** (e - k) if e - k else 1.0)
                        if w == 0.0:
                            continue
                        nk = list(key)
                        nk[i] = k
                        nk = tuple(nk)
                        expanded[nk] = expanded.get(nk, 0.0) + val * w
                partial_terms = expanded
            for key, val in partial_terms.items():
                out[key] = out.get(key, 0.0) + val
        return Polynomial(n, out)

    def to_text(self) -> str:
        return poly_to_text(self)


def _check_index(i: int, nvars: int) -> None:
    if not 0 <= i < nvars:
        raise IndexError(f"variable index {i} out of range for {nvars} variables")


def poly_mul(p: Polynomial, q: Polynomial) -> Polynomial:
    """Exact product of two polynomials."""
    if p.nvars != q.nvars:
        raise DimensionError(f"nvars mismatch: {p.nvars} vs {q.nvars}")
    out: dict[tuple[int, ...], float] = {}
    qitems = list(q.items())
    for a, ca in p.items():
        for b, cb in qitems:
            key = tuple(x + y for x, y in zip(a, b))
            out[key] = out.get(key, 0.0) + ca * cb
    return Polynomial(p.nvars, out)


def poly_partial(p: Polynomial, i: int) -> Polynomial:
    """Exact partial derivative with respect to variable ``i``."""
    _check_index(i, p.nvars)
    out = {}
    for exps, c in p.items():
        e = exps[i]
        if e:
            key = exps[:i] + (e - 1,) + exps[i + 1 :]
            out[key] = c * e
    return Polynomial(p.nvars, out)


def poly_sum(polys: Iterable[Polynomial], nvars: int) -> Polynomial:
    out: dict[tuple[int, ...], float] = {}
    for p in polys:
        if p.nvars != nvars:
            raise DimensionError("nvars mismatch in sum")
        for k, c in p.items():
            out[k] = out.get(k, 0.0) + c
    return Polynomial(nvars, out)


# ---------------------------------------------------------------------------
# text format


def poly_to_text(p: Polynomial) -> str:
    """One term per line: ``coefficient e1 e2 ... en``."""
    if p.is_zero():
        return " ".join(["0.0"] + ["0"] * p.nvars) + "\n"
    lines = [" ".join([repr(c)] + [str(e) for e in exps]) for exps, c in p.items()]
    return "\n".join(lines) + "\n"


def poly_from_text(text: str, nvars: int | None = None) -> Polynomial:
    """Parse the format written by :func:`poly_to_text`.

    Blank lines and ``#`` comments are ignored.
    """
    terms: dict[tuple[int, ...], float] = {}
    width = nvars
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        try:
            coef = float(fields[0])
            exps = tuple(int(f) for f in fields[1:])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: cannot parse term {raw!r}") from exc
        if width is None:
            width = len(exps)
        if len(exps) != width:
            raise DimensionError(f"line {lineno}: expected {width} exponents, got {len(exps)}")
        terms[exps] = terms.get(exps, 0.0) + coef
    if width is None:
        raise ValueError("empty polynomial text and no nvars given")
    return Polynomial(width, terms)


def polys_to_text(polys: Sequence[Polynomial]) -> str:
    """Blocks separated by blank lines, one block per polynomial."""
    return "\n".join(poly_to_text(p) for p in polys)


def polys_from_text(text: str) -> list[Polynomial]:
    blocks: list[list[str]] = [[]]
    for raw in text.splitlines():
        if raw.split("#", 1)[0].strip():
            blocks[-1].append(raw)
        elif blocks[-1]:
            blocks.append([])
    blocks = [b for b in blocks if b]
    if not blocks:
        raise ValueError("no polynomial blocks found")
    polys = [poly_from_text("\n".join(b)) for b in blocks]
    n = polys[0].nvars
    if any(p.nvars != n for p in polys):
        raise DimensionError("blocks disagree on number of variables")
    return polys


# ---------------------------------------------------------------------------
# Gaussian moments


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.covariance, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(f"covariance shape {cov.shape} does not match mean {mean.size}")
        cov = 0.5 * (cov + cov.T)
        scale = np.linalg.norm(cov, 2) if cov.size else 0.0
        if cov.size and np.linalg.eigvalsh(cov).min() < -1e-12 * scale:
            raise DomainError("covariance is not positive semidefinite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _centered_moment(alpha: tuple[int, ...], cov: np.ndarray, memo: dict) -> float:
    # Isserlis: pair the first factor with every remaining factor
    if alpha in memo:
        return memo[alpha]
    total = sum(alpha)
    if total == 0:
        return 1.0
    if total % 2:
        memo[alpha] = 0.0
        return 0.0
    i = next(k for k, e in enumerate(alpha) if e)
    rest = list(alpha)
    rest[i] -= 1
    acc = 0.0
    for j, e in enumerate(rest):
        if e == 0:
            continue
        sub = rest.copy()
        sub[j] -= 1
        acc += e * cov[i, j] * _centered_moment(tuple(sub), cov, memo)
    memo[alpha] = acc
    return acc


def gaussian_expectation(p: Polynomial, g: GaussianMoments) -> float:
    """Exact ``E[p(x)]`` for ``x ~ N(g.mean, g.covariance)``."""
    if p.nvars != g.dim:
        raise DimensionError(f"polynomial has {p.nvars} variables, Gaussian has {g.dim}")
    if p.degree > ISSERLIS_DEGREE_CAP:
        raise DegreeCapError(f"degree {p.degree} exceeds cap {ISSERLIS_DEGREE_CAP}")
    centred = p.shift(g.mean)
    memo: dict = {}
    total = 0.0
    for alpha, c in centred.items():
        if sum(alpha) % 2:
            continue
        total += c * _centered_moment(alpha, g.covariance, memo)
    return total


def gaussian_product_expectation(p: Polynomial, q: Polynomial, g: GaussianMoments) -> float:
    """``E[p q]``, centring each factor before multiplying.

    Equal to ``gaussian_expectation(p * q, g)`` but cheaper when the factors
    are sparse, since the shift is applied before the degree doubles.
    """
    if p.nvars != g.dim or q.nvars != g.dim:
        raise DimensionError("polynomial and Gaussian dimensions differ")
    if p.degree + q.degree > ISSERLIS_DEGREE_CAP:
        raise DegreeCapError(f"degree {p.degree + q.degree} exceeds cap {ISSERLIS_DEGREE_CAP}")
    pc = p.shift(g.mean)
    qc = pc if q is p else q.shift(g.mean)
    memo: dict = {}
    total = 0.0
    for alpha, c in (pc * qc).items():
        if sum(alpha) % 2:
            continue
        total += c * _centered_moment(alpha, g.covariance, memo)
    return total


def gaussian_covariance(p: Polynomial, q: Polynomial, g: GaussianMoments) -> float:
    """``E[pq] - E[p]E[q]`` under the Gaussian ``g``."""
    return gaussian_product_expectation(p, q, g) - gaussian_expectation(p, g) * gaussian_expectation(q, g)


class MomentPlan:
    """Batched raw Gaussian moments ``E[x^alpha]`` for a fixed monomial set.

    Uses Stein's recursion ``E[x_i f] = m_i E[f] + sum_j S_ij E[d_j f]``,
    which needs no centring.  The recursion schedule is compiled once; each
    call to :meth:`evaluate` is pure numpy and vectorised over leading axes.
    Reductions run over a fixed small axis, so results for one Gaussian do not
    depend on what else is in the batch.
    """

    def __init__(self, monomials: Iterable[Sequence[int]], nvars: int):
        self.nvars = n = int(nvars)
        targets = [tuple(int(e) for e in m) for m in monomials]
        for t in targets:
            if len(t) != n:
                raise DimensionError(f"monomial {t} does not have {n} entries")
        closure: set[tuple[int, ...]] = set()
        stack = list(targets)
        while stack:
            a = stack.pop()
            if a in closure:
                continue
            closure.add(a)
            if sum(a) == 0:
                continue
            i = next(k for k, e in enumerate(a) if e)
            r = list(a)
            r[i] -= 1
            stack.append(tuple(r))
            for j, e in enumerate(r):
                if e:
                    s = r.copy()
                    s[j] -= 1
                    stack.append(tuple(s))
        order = sorted(closure, key=_grlex_key)
        # slot 0 holds the constant 0 used for absent branches
        self.index = {a: k + 1 for k, a in enumerate(order)}
        self.size = len(order) + 1
        self.max_degree = max((sum(a) for a in order), default=0)
        self.levels = []
        for d in range(1, self.max_degree + 1):
            level = [a for a in order if sum(a) == d]
            if not level:
                continue
            slots = np.array([self.index[a] for a in level])
            first = np.empty(len(level), dtype=np.intp)
            p1 = np.empty(len(level), dtype=np.intp)
            p2 = np.zeros((len(level), n), dtype=np.intp)
            cnt = np.zeros((len(level), n))
            for row, a in enumerate(level):
                i = next(k for k, e in enumerate(a) if e)
                r = list(a)
                r[i] -= 1
                first[row] = i
                p1[row] = self.index[tuple(r)]
                for j, e in enumerate(r):
                    if e:
                        s = r.copy()
                        s[j] -= 1
                        p2[row, j] = self.index[tuple(s)]
                        cnt[row, j] = e
            # flatten the nonzero Stein terms: row r gets cnt * S[first_r, j] * E[p2]
            rr, jj = np.nonzero(cnt)
            rows_with = np.unique(rr)
            starts = np.searchsorted(rr, rows_with)
            self.levels.append(
                (slots, first, p1, rows_with, starts, first[rr] * n + jj, p2[rr, jj], cnt[rr, jj][:, None])
            )
        self.target_slots = np.array([self.index[t] for t in targets], dtype=np.intp)
        self.zero_slot = self.index.get((0,) * n)

    def evaluate_all(self, mean, cov) -> np.ndarray:
        """Moments for every monomial in the closure, indexed by :attr:`index`."""
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        n = self.nvars
        batch = mean.shape[:-1]
        # batch on the last axis so every gather pulls contiguous rows
        mean_t = np.ascontiguousarray(mean.reshape(-1, n).T)
        cov_t = np.ascontiguousarray(cov.reshape(-1, n * n).T)
        E = np.zeros((self.size, mean_t.shape[1]))
        if self.zero_slot is not None:
            E[self.zero_slot] = 1.0
        for slots, first, p1, rows_with, starts, cov_idx, p2, cnt in self.levels:
            val = mean_t[first] * E[p1]
            if len(cov_idx):
                terms = cov_t[cov_idx] * E[p2] * cnt
                val[rows_with] += np.add.reduceat(terms, starts, axis=0)
            E[slots] = val
        return E.T.reshape(batch + (self.size,))

    def evaluate(self, mean, cov) -> np.ndarray:
        return self.evaluate_all(mean, cov)[..., self.target_slots]

    def coefficient_vector(self, p: Polynomial) -> np.ndarray:
        """Dense coefficients of ``p`` aligned with :meth:`evaluate_all`."""
        v = np.zeros(self.size)
        for exps, c in p.items():
            v[self.index[exps]] += c
        return v
