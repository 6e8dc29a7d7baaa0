"""Offspring distributions, branching laws and the Laplace-transform toolkit.

All offspring laws live on ``{1, 2, ...}`` (no extinction).  Each law can

* evaluate its pmf and tail ``P(K >= n)``,
* compute ``E g(K)`` for smooth ``g`` (exact sums, with an integral
  remainder for the heavy-tailed family),
* draw, for an array of particle counts ``c``, the vector of sums of ``c``
  iid offspring numbers (the workhorse of the vectorized simulator).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, optimize, special

from .population import Population
from .rng import multinomial_rows
from .state_space import DepthQuotient, ExplicitSpace, StateSpace, WordTree


class BranchingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# psi and friends


def psi(t):
    """``psi(t) = exp(-t) - 1 + t``, accurate for small ``t``."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    small = np.abs(t) < 1e-3
    ts = t[small]
    # Taylor: t^2/2 - t^3/6 + t^4/24 - t^5/120
    out[small] = ts * ts * (0.5 - ts * (1.0 / 6 - ts * (1.0 / 24 - ts / 120)))
    tl = t[~small]
    out[~small] = np.expm1(-tl) + tl
    return out if out.ndim else float(out)


def _psi_over_u2_integral(x):
    """``Psi2(x) = int_0^x psi(u)/u^2 du`` (vectorized).

    Closed form: ``Psi2(x) = log x + gamma - 1 + E1(x) + (1 - exp(-x))/x``;
    series near 0.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < 1e-2
    xs = x[small]
    # psi(u)/u^2 = 1/2 - u/6 + u^2/24 - u^3/120 ...
    out[small] = xs * (0.5 - xs * (1.0 / 12 - xs * (1.0 / 72 - xs / 480)))
    xl = x[~small]
    out[~small] = np.log(xl) + np.euler_gamma - 1.0 + special.exp1(xl) - np.expm1(-xl) / xl
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# offspring laws


@dataclass(frozen=True)
class LLogL:
    value: float
    divergent: bool
    note: str = ""


@dataclass(frozen=True)
class Moments:
    mean: float
    llogl: LLogL
    truncation_error: float = 0.0


class OffspringPMF:
    """Base class.  Subclasses implement ``pmf``, ``tail``, ``expect``, ``sum_iid``."""

    kind = "abstract"
    #: largest value with positive mass (``math.inf`` for unbounded support)
    support_max: float = math.inf

    def pmf(self, k) -> np.ndarray:
        raise NotImplementedError

    def tail(self, n) -> np.ndarray:
        """``P(K >= n)`` (vectorized, ``n >= 1``)."""
        raise NotImplementedError

    def expect(self, g) -> float:
        """``E g(K)`` for a vectorized ``g``."""
        raise NotImplementedError

    @property
    def mean(self) -> float:
        raise NotImplementedError

    def llogl(self) -> LLogL:
        raise NotImplementedError

    def moments(self) -> Moments:
        return Moments(self.mean, self.llogl())

    def sum_iid(self, rng: np.random.Generator, c: np.ndarray) -> np.ndarray:
        """Sums of ``c[i]`` iid draws, for each ``i`` (``int64``)."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int | None = None):
        ones = np.ones(1 if size is None else size, dtype=np.int64)
        # sum of one draw == one draw
        out = self.sum_iid(rng, ones)
        return int(out[0]) if size is None else out

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        """Finite support ``(values, probs)``; raises for unbounded laws."""
        raise BranchingError(f"{self.kind} offspring law has unbounded support")

    def laplace(self) -> "LaplaceToolkit":
        return LaplaceToolkit(self)

    def describe(self) -> dict:
        raise NotImplementedError


def _llogl_finite_sum(values: np.ndarray, probs: np.ndarray) -> float:
    v = values.astype(float)
    return float(np.sum(probs * v * np.log(v)))


@dataclass(frozen=True)
class Delta(OffspringPMF):
    k: int
    kind = "delta"

    def __post_init__(self):
        if int(self.k) < 1:
            raise BranchingError("offspring number must be >= 1 (no extinction)")

    @property
    def support_max(self):
        return self.k

    def pmf(self, k):
        return (np.asarray(k) == self.k).astype(float)

    def tail(self, n):
        return (np.asarray(n) <= self.k).astype(float)

    def expect(self, g):
        return float(np.asarray(g(np.array([float(self.k)])))[0])

    @property
    def mean(self):
        return float(self.k)

    def llogl(self):
        return LLogL(self.k * math.log(self.k), False)

    def sum_iid(self, rng, c):
        return np.asarray(c, dtype=np.int64) * self.k

    def support(self):
        return np.array([self.k]), np.array([1.0])

    def describe(self):
        return {"kind": "delta", "k": int(self.k)}


@dataclass(frozen=True)
class Explicit(OffspringPMF):
    """Finite pmf; ``probs[i]`` is the mass of ``values[i]``."""

    values: tuple[int, ...]
    probs: tuple[float, ...]
    kind = "explicit"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int64)
        p = np.asarray(self.probs, dtype=float)
        if v.size == 0 or v.shape != p.shape:
            raise BranchingError("explicit pmf needs matching values and probabilities")
        if v.min() < 1:
            raise BranchingError("explicit pmf charges 0 offspring (no extinction allowed)")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise BranchingError(f"explicit pmf is not normalized (sum {p.sum()!r})")
        if len(set(v.tolist())) != v.size:
            raise BranchingError("explicit pmf lists a value twice")
        order = np.argsort(v)
        keep = p[order] > 0
        object.__setattr__(self, "_v", v[order][keep])
        object.__setattr__(self, "_p", p[order][keep])

    @classmethod
    def from_list(cls, pmf: Sequence[float]) -> "Explicit":
        """``pmf[i]`` is the mass of ``i + 1``."""
        return cls(tuple(range(1, len(pmf) + 1)), tuple(float(x) for x in pmf))

    @classmethod
    def from_dict(cls, pmf: dict) -> "Explicit":
        items = sorted((int(k), float(p)) for k, p in pmf.items())
        return cls(tuple(k for k, _ in items), tuple(p for _, p in items))

    @property
    def support_max(self):
        return int(self._v[-1])

    def pmf(self, k):
        k = np.asarray(k)
        idx = np.searchsorted(self._v, k)
        idx = np.minimum(idx, self._v.size - 1)
        return np.where(self._v[idx] == k, self._p[idx], 0.0)

    def tail(self, n):
        n = np.asarray(n)
        suffix = np.concatenate([np.cumsum(self._p[::-1])[::-1], [0.0]])
        return suffix[np.searchsorted(self._v, n, side="left")]

    def expect(self, g):
        return float(np.dot(self._p, g(self._v.astype(float))))

    @property
    def mean(self):
        return float(np.dot(self._p, self._v))

    def llogl(self):
        return LLogL(_llogl_finite_sum(self._v, self._p), False)

    def sum_iid(self, rng, c):
        c = np.asarray(c, dtype=np.int64)
        if self._v.size == 1:
            return c * int(self._v[0])
        P = np.broadcast_to(self._p, (c.size, self._p.size))
        return multinomial_rows(rng, c, P) @ self._v

    def support(self):
        return self._v.copy(), self._p.copy()

    def describe(self):
        return {"kind": "explicit", "pmf": {str(int(k)): float(p) for k, p in zip(self._v, self._p)}}


@dataclass(frozen=True)
class Geometric(OffspringPMF):
    """Shifted geometric on ``{1, 2, ...}``: ``pmf(k) = (1-q)^(k-1) q``."""

    q: float
    kind = "geometric"

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise BranchingError("geometric parameter must lie in (0, 1]")

    def pmf(self, k):
        k = np.asarray(k, dtype=float)
        return np.where(k >= 1, (1 - self.q) ** (k - 1) * self.q, 0.0)

    def tail(self, n):
        n = np.asarray(n, dtype=float)
        return np.where(n <= 1, 1.0, (1 - self.q) ** (n - 1))

    def _cutoff(self, rel=1e-18) -> int:
        if self.q == 1:
            return 1
        # tail (1-q)^K * K^2 below rel
        K = 16
        while (1 - self.q) ** K * K * K > rel:
            K *= 2
        return K

    def expect(self, g):
        k = np.arange(1, self._cutoff() + 1, dtype=float)
        return float(np.dot(self.pmf(k), g(k)))

    @property
    def mean(self):
        return 1.0 / self.q

    def llogl(self):
        # direct summation; remainder bounded by the geometric tail of k^2
        K = self._cutoff(1e-14)
        k = np.arange(1, K + 1, dtype=float)
        val = float(np.dot(self.pmf(k), k * np.log(k)))
        return LLogL(val, False, f"summed to k={K}; ratio test gives convergence")

    def sum_iid(self, rng, c):
        c = np.asarray(c, dtype=np.int64)
        if self.q == 1:
            return c.copy()
        out = c.copy()
        live = c > 0
        out[live] += rng.negative_binomial(c[live], self.q)
        return out

    def describe(self):
        return {"kind": "geometric", "q": float(self.q)}


class HeavyTail(OffspringPMF):
    """Atom at 1 plus a ``k^-2 (log k)^-2`` tail on ``[k0, k_max]``.

    ``pmf(1) = w``, ``pmf(k) = (1-w) c k^-2 (log k)^-2`` for
    ``k0 <= k <= k_max``; ``w`` is tuned so that the (truncated) law has
    the requested mean.  The untruncated family has finite mean and
    divergent ``sum pi(k) k log k`` (comparison with ``sum 1/(k log k)``).

    Sums run exactly over ``k < K_TABLE``; the remainder is an integral
    over ``[K_TABLE - 1/2, k_max + 1/2]`` (midpoint rule, error
    ``O(K_TABLE^-4)``).
    """

    kind = "heavy_tail"
    K_TABLE = 1 << 16
    #: values below this are drawn by multinomial, above by rejection
    K_SMALL = 16

    def __init__(self, mean: float = 2.0, k0: int = 2, k_max: int = 1 << 32):
        if k0 < 2:
            raise BranchingError("heavy tail needs k0 >= 2 (log k must be positive)")
        if k_max <= k0 + 1:
            raise BranchingError("k_max must exceed k0")
        self.target_mean = float(mean)
        self.k0 = int(k0)
        self.k_max = int(k_max)
        self.support_max = self.k_max
        self._K = max(min(self.K_TABLE, self.k_max + 1), self.k0)
        ks = np.arange(self.k0, self._K, dtype=float)
        self._table_k = ks
        self._table_f = 1.0 / (ks * ks * np.log(ks) ** 2)
        Z = self._tail_expect_unnorm(lambda t: np.ones_like(t))
        mu = self._tail_expect_unnorm(lambda t: t) / Z
        if mu <= self.target_mean:
            raise BranchingError(f"heavy tail from k0={k0} has mean {mu:.4g} <= requested {mean}")
        if self.target_mean < 1:
            raise BranchingError("mean must be >= 1")
        self.c = 1.0 / Z
        self.tail_mean = mu
        self.w = (mu - self.target_mean) / (mu - 1.0)

    # exact sum over the table plus integral remainder
    def _tail_expect_unnorm(self, g, upper: float | None = None) -> float:
        s = float(np.dot(self._table_f, g(self._table_k)))
        lo = self._K - 0.5
        hi = (self.k_max + 0.5) if upper is None else upper
        if self.k_max >= self._K and hi > lo:
            # substitute u = log t: t^-2 log^-2 t dt = exp(-u) u^-2 du
            f = lambda u: math.exp(-u) / (u * u) * float(g(np.array([math.exp(u)]))[0])
            a, b = math.log(lo), math.log(hi)
            val, _ = integrate.quad(f, a, b, limit=400, epsabs=0, epsrel=1e-13)
            s += val
        return s

    @staticmethod
    def _antideriv(u):
        # d/du [E1(u) - exp(-u)/u] = exp(-u)/u^2
        return special.exp1(u) - np.exp(-u) / u

    def _integral_tail(self, x, hi):
        """``int_x^hi t^-2 log^-2 t dt``."""
        return self._antideriv(np.log(hi)) - self._antideriv(np.log(x))

    def pmf(self, k):
        k = np.asarray(k, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            body = (1 - self.w) * self.c / (k * k * np.log(k) ** 2)
        out = np.where((k >= self.k0) & (k <= self.k_max), body, 0.0)
        return np.where(k == 1, self.w, out)

    def tail(self, n):
        n = np.atleast_1d(np.asarray(n, dtype=float))
        out = np.empty(n.size)
        cum = np.concatenate([np.cumsum(self._table_f[::-1])[::-1], [0.0]])
        rest = 0.0
        if self.k_max >= self._K:
            rest = float(self._integral_tail(self._K - 0.5, self.k_max + 0.5))
        for i, v in enumerate(n):
            if v <= 1:
                out[i] = 1.0
            elif v > self.k_max:
                out[i] = 0.0
            elif v < self._K:
                j = int(max(v, self.k0) - self.k0)
                out[i] = (1 - self.w) * self.c * (cum[j] + rest)
            else:
                out[i] = (1 - self.w) * self.c * float(self._integral_tail(v - 0.5, self.k_max + 0.5))
        return out

    def expect(self, g):
        return float(self.w * g(np.array([1.0]))[0] + (1 - self.w) * self.c * self._tail_expect_unnorm(g))

    @property
    def mean(self):
        return self.expect(lambda t: t)

    def llogl(self):
        val = (1 - self.w) * self.c * self._tail_expect_unnorm(lambda t: t * np.log(t))
        return LLogL(
            math.inf,
            True,
            f"untruncated series diverges (comparison with sum 1/(k log k)); "
            f"partial sum up to k_max={self.k_max} is {val:.6g}",
        )

    def moments(self):
        # mass the truncation removes from the untruncated normalisation
        cut = float(self._integral_tail(self.k_max + 0.5, math.inf)) if self.k_max < math.inf else 0.0
        return Moments(self.mean, self.llogl(), truncation_error=(1 - self.w) * self.c * cut)

    def llogl_integral(self, eps: float, C: float = 1.0, untruncated: bool = True) -> float:
        """``int_eps^C R(s)/s^2 ds`` via ``sum theta(k) k [Psi2(kC) - Psi2(k eps)]``.

        With ``untruncated=True`` the tail is the analytic ``k^-2 log^-2 k``
        series continued to infinity: after ``t = e^u`` the remainder is
        ``int D(e^u) u^-2 du`` with ``D(t) = Psi2(tC) - Psi2(t eps)``, and
        ``D -> log(C/eps)`` once ``t eps >> 1`` (closed-form tail).
        """
        D = lambda t: _psi_over_u2_integral(t * C) - _psi_over_u2_integral(t * eps)
        g = lambda t: t * D(t)
        if not untruncated:
            return self.expect(g)
        s = float(np.dot(self._table_f, g(self._table_k)))
        U = min(700.0, math.log(1.0 / eps) + 40.0) if eps > 0 else 700.0
        a = math.log(self._K - 0.5)
        f = lambda u: float(D(np.array([math.exp(u)]))[0]) / (u * u)
        pts = [p for p in (math.log(1 / C), math.log(1 / eps) if eps > 0 else None) if p and a < p < U]
        val, _ = integrate.quad(f, a, U, limit=400, points=pts or None)
        s += val
        if eps > 0:
            s += math.log(C / eps) / U
        return float(self.w * g(np.array([1.0]))[0] + (1 - self.w) * self.c * s)

    # -- sampling

    @cached_property
    def _small(self):
        ks = np.arange(1, self.K_SMALL, dtype=np.int64)
        p = self.pmf(ks.astype(float))
        p_large = max(0.0, 1.0 - p.sum())
        return ks, np.concatenate([p, [p_large]])

    def _draw_large(self, rng, n: int) -> np.ndarray:
        """``n`` iid draws of ``K`` conditioned on ``K >= K_SMALL``.

        Proposal ``q(k) ∝ 1/(k(k-1))`` on ``k >= a`` (exact inverse
        ``floor((a-1)/U) + 1``), restricted to ``k <= k_max``; acceptance
        ``h(k)/h(a)`` with ``h(k) = (1 - 1/k) / log(k)^2`` (decreasing).
        """
        a = max(self.K_SMALL, self.k0)
        ha = (1 - 1 / a) / math.log(a) ** 2
        out = np.empty(0, dtype=np.int64)
        need = n
        while need > 0:
            m = max(2 * need, 64)
            u = 1.0 - rng.random(m)  # (0, 1]
            t = np.floor((a - 1) / u) + 1
            ok = t <= self.k_max
            k = t[ok]
            acc = rng.random(k.size) * ha <= (1 - 1 / k) / np.log(k) ** 2
            got = k[acc].astype(np.int64)
            out = np.concatenate([out, got[:need]])
            need = n - out.size
        return out

    def sum_iid(self, rng, c):
        c = np.asarray(c, dtype=np.int64)
        ks, p = self._small
        counts = multinomial_rows(rng, c, np.broadcast_to(p, (c.size, p.size)))
        total = counts[:, :-1] @ ks
        n_large = counts[:, -1]
        L = int(n_large.sum())
        if L:
            draws = self._draw_large(rng, L)
            owner = np.repeat(np.arange(c.size), n_large)
            np.add.at(total, owner, draws)
        return total

    def describe(self):
        return {"kind": "heavy_tail", "mean": self.target_mean, "k0": self.k0, "k_max": self.k_max}

    def __eq__(self, other):
        return isinstance(other, HeavyTail) and self.describe() == other.describe()

    def __hash__(self):
        return hash(tuple(self.describe().items()))

    def __repr__(self):
        return f"HeavyTail(mean={self.target_mean}, k0={self.k0}, k_max={self.k_max}, w={self.w:.6g})"


def offspring_from_config(block: dict) -> OffspringPMF:
    if not isinstance(block, dict) or "kind" not in block:
        raise BranchingError("offspring block needs a 'kind'")
    kind = block["kind"]
    if kind == "delta":
        return Delta(int(block["k"]))
    if kind == "geometric":
        if "q" in block:
            return Geometric(float(block["q"]))
        return Geometric(1.0 / float(block["mean"]))
    if kind == "explicit":
        pmf = block["pmf"]
        return Explicit.from_dict(pmf) if isinstance(pmf, dict) else Explicit.from_list(pmf)
    if kind == "heavy_tail":
        return HeavyTail(float(block.get("mean", 2.0)), int(block.get("k0", 2)), int(block.get("k_max", 1 << 32)))
    raise BranchingError(f"unknown offspring kind {kind!r}")


def moments(pi: OffspringPMF) -> Moments:
    return pi.moments()


# ---------------------------------------------------------------------------
# domination order


def _is_geometric(p):
    return isinstance(p, Geometric) and p.q < 1


def dominates(pi: OffspringPMF, pi2: OffspringPMF, exact_bound: int = 1 << 12) -> bool:
    """True iff ``pi2[n, inf) <= pi[n, inf)`` for every ``n``.

    Tails are compared term by term up to ``exact_bound`` and on a
    logarithmic grid beyond, up to the joint support bound; two geometric
    tails are compared in closed form.  Heavy-tailed laws are compared as
    the (truncated) laws that are actually sampled.
    """
    tol = 1e-15
    if pi2.support_max > pi.support_max:
        return False
    if _is_geometric(pi) and _is_geometric(pi2):
        return pi2.q >= pi.q - tol
    bound = min(pi2.support_max, pi.support_max)
    if not math.isfinite(bound):
        # pi2 geometric below an unbounded pi: compare where tails are representable
        bound = 1 << 40
    bound = int(bound)
    n = np.arange(1, min(bound, exact_bound) + 1)
    if np.any(pi2.tail(n) > pi.tail(n) + tol):
        return False
    if bound > exact_bound:
        grid = np.unique(np.geomspace(exact_bound, bound, 400).astype(np.int64))
        if np.any(pi2.tail(grid) > pi.tail(grid) + tol):
            return False
    return True


class TailEnvelope(OffspringPMF):
    """Law whose tail is the pointwise maximum of its members' tails."""

    kind = "envelope"
    WIDE = 1 << 20

    def __init__(self, members: Sequence[OffspringPMF]):
        self.members = list(members)
        self.support_max = max(m.support_max for m in self.members)
        # beyond the largest short support the dominant wide member wins
        wide = [m for m in self.members if m.support_max > self.WIDE]
        short = [m.support_max for m in self.members if m.support_max <= self.WIDE]
        self._head = int(max(short)) if short else 1
        self._far = None
        # a single wide non-geometric member is kept analytically: the
        # envelope equals it beyond the head, so only the head is patched
        self._patched = False
        if wide and all(_is_geometric(g) for g in wide):
            self._far = min(wide, key=lambda g: g.q)
        elif len(wide) == 1:
            self._far, self._patched = wide[0], True
        elif wide:
            raise BranchingError("envelope of several wide non-geometric members is not supported")

    def tail(self, n):
        n = np.asarray(n)
        return np.max(np.stack([np.asarray(m.tail(n), dtype=float) for m in self.members]), axis=0)

    def pmf(self, k):
        k = np.asarray(k)
        return self.tail(k) - self.tail(k + 1)

    def _cut(self):
        if self._far is None:
            return int(self.support_max)
        return max(self._head, self._far._cutoff()) + 1

    def expect(self, g):
        if self._patched:
            k = np.arange(1, self._head + 2, dtype=float)
            return self._far.expect(g) + float(np.dot(self.pmf(k) - self._far.pmf(k), g(k)))
        k = np.arange(1, self._cut() + 1, dtype=float)
        return float(np.dot(self.pmf(k), g(k)))

    @property
    def mean(self):
        if self._patched:
            k = np.arange(1, self._head + 1, dtype=float)
            return self._far.mean + float(np.sum(self.tail(k) - self._far.tail(k)))
        k = np.arange(1, self._cut() + 1, dtype=float)
        return float(np.sum(self.tail(k)))

    def llogl(self):
        if self._patched and self._far.llogl().divergent:
            return LLogL(math.inf, True)
        return LLogL(self.expect(lambda t: t * np.log(t)), False)

    def as_explicit(self) -> Explicit | None:
        if self._far is not None:
            return None
        k = np.arange(1, int(self.support_max) + 1)
        p = self.pmf(k)
        p = p / p.sum()
        return Explicit(tuple(int(x) for x in k), tuple(float(x) for x in p))

    def sum_iid(self, rng, c):
        if self._patched:
            raise BranchingError("sampling from a patched wide envelope is not supported")
        k = np.arange(1, self._cut() + 1)
        p = self.pmf(k)
        p = p / p.sum()
        return multinomial_rows(rng, np.asarray(c), np.broadcast_to(p, (len(c), p.size))) @ k

    def describe(self):
        return {"kind": "envelope", "members": [m.describe() for m in self.members]}


@dataclass(frozen=True)
class EnvelopeResult:
    pmf: OffspringPMF | None
    mean: float
    llogl_finite: bool
    ok: bool
    reason: str = ""


def envelope(family: Iterable[OffspringPMF], max_members: int = 10_000, mean_bound: float = 1e6) -> EnvelopeResult:
    """Smallest law dominating every member (pointwise supremum of tails).

    ``family`` may be any iterable.  It fails (``ok=False``) when a member
    mean exceeds ``mean_bound`` -- the sup-tail is then not summable at the
    configured scale -- or when the iterable is not exhausted after
    ``max_members`` members, since summability cannot be certified.
    If one member dominates all others it is returned itself.
    """
    members: list[OffspringPMF] = []
    it = iter(family)
    for m in it:
        if len(members) >= max_members:
            return EnvelopeResult(None, math.inf, False, False, f"family not exhausted after {max_members} members")
        if not math.isfinite(m.mean) or m.mean > mean_bound:
            return EnvelopeResult(None, math.inf, False, False, "sup-tail not summable: member means unbounded")
        members.append(m)
    if not members:
        raise BranchingError("envelope of an empty family")
    top = max(members, key=lambda m: m.mean)
    if all(m is top or dominates(top, m) for m in members):
        env: OffspringPMF = top
    else:
        try:
            env = TailEnvelope(members)
        except BranchingError as e:
            return EnvelopeResult(None, math.inf, False, False, str(e))
        ex = env.as_explicit()
        env = ex if ex is not None else env
    mean = env.mean
    if mean > mean_bound:
        return EnvelopeResult(None, math.inf, False, False, "sup-tail not summable: envelope mean unbounded")
    return EnvelopeResult(env, mean, not env.llogl().divergent, True, "")


# ---------------------------------------------------------------------------
# Laplace toolkit


@dataclass
class RemainderValues:
    G: float
    R: float
    s0: float


class LaplaceToolkit:
    """``G(s) = E exp(-sK)``, ``R(s) = G(s) - 1 + mean * s = E psi(sK)``.

    ``R`` is evaluated as ``E psi(sK)`` to avoid cancellation near 0.
    ``s0 = min(1/rho, s*)`` where ``s*`` solves ``R(s) = rho s``
    (``R(s)/s`` is nondecreasing, so the set ``{R(s) <= rho s <= 1}`` is an
    interval ``[0, s0]``); located by bisection to ``1e-9``.
    """

    def __init__(self, theta: OffspringPMF, rho: float | None = None):
        self.theta = theta
        self.mean = theta.mean
        self.rho = self.mean if rho is None else rho

    def G(self, s: float) -> float:
        self._check(s)
        return self.theta.expect(lambda k: np.exp(-s * k))

    def R(self, s: float) -> float:
        self._check(s)
        if s == 0:
            return 0.0
        return self.theta.expect(lambda k: psi(s * k))

    psi = staticmethod(psi)

    @staticmethod
    def _check(s):
        if s < 0:
            raise BranchingError("Laplace variable must be non-negative")

    @cached_property
    def s0(self) -> float:
        cap = 1.0 / self.rho
        h = lambda s: self.R(s) - self.rho * s
        if h(cap) <= 0:
            return cap
        lo, hi = 0.0, cap
        while hi - lo > 1e-9:
            mid = 0.5 * (lo + hi)
            if h(mid) <= 0:
                lo = mid
            else:
                hi = mid
        return lo

    def suite(self, s: float) -> RemainderValues:
        return RemainderValues(self.G(s), self.R(s), self.s0)

    def integral_R_over_s2(self, s: float, eps: float = 0.0) -> float:
        """``int_eps^s R(sigma)/sigma^2 d sigma`` (exact series identity)."""
        if isinstance(self.theta, HeavyTail):
            return self.theta.llogl_integral(eps, s, untruncated=False)
        return self.theta.expect(lambda k: k * (_psi_over_u2_integral(k * s) - _psi_over_u2_integral(k * eps)))

    def integral_quad(self, s: float, eps: float = 0.0) -> float:
        """The same integral by adaptive quadrature (cross-check)."""
        f = lambda sig: self.R(sig) / sig**2 if sig > 0 else 0.5 * self.theta.expect(lambda k: k * k)
        val, _ = integrate.quad(f, eps, s, limit=200, epsrel=1e-12)
        return val

    def telescoped_bound(self, s: float) -> float:
        """``exp(-s) + s / (rho log rho) * int_0^s R / sigma^2``."""
        if self.rho <= 1:
            raise BranchingError("telescoped bound needs rho > 1")
        return math.exp(-s) + s / (self.rho * math.log(self.rho)) * self.integral_R_over_s2(s)


def remainder_suite(theta: OffspringPMF, s: float) -> RemainderValues:
    return LaplaceToolkit(theta).suite(s)


# ---------------------------------------------------------------------------
# branching laws

MODES = ("independent", "vertex_coupled", "mixture")


@dataclass(frozen=True)
class Override:
    """Environment entry: distance band ``[lo, hi]`` (trees) or a state (explicit)."""

    offspring: OffspringPMF
    band: tuple[int, int] | None = None
    state: int | None = None


@dataclass(frozen=True, eq=False)
class BranchingLaw:
    """``Pi_x``: offspring number ``k ~ pi_x``, placement by ``p_x``.

    ``mode``: ``independent`` places the ``k`` children iid by ``p_x``;
    ``vertex_coupled`` sends all ``k`` to one ``y ~ p_x``; ``mixture``
    uses ``independent`` with probability ``lam`` and ``vertex_coupled``
    otherwise, per branching event.
    """

    space: StateSpace
    offspring: OffspringPMF
    mode: str = "independent"
    lam: float = 1.0
    overrides: tuple[Override, ...] = ()
    require_constant_rho: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise BranchingError(f"unknown branching mode {self.mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise BranchingError("mixture weight lambda must lie in [0, 1]")
        for o in self.overrides:
            if o.band is None and o.state is None:
                raise BranchingError("override needs a band or a state")
            if o.band is not None and not isinstance(self._tree(), WordTree):
                raise BranchingError("distance bands need a tree-like space")
        if self.require_constant_rho:
            for o in self.overrides:
                if abs(o.offspring.mean - self.offspring.mean) > 1e-12 * self.offspring.mean:
                    raise BranchingError(
                        "overrides change the branching ratio; set require_constant_rho=false to allow this"
                    )

    def _tree(self):
        sp_ = self.space
        return sp_.tree if isinstance(sp_, DepthQuotient) else sp_

    @property
    def laws(self) -> list[OffspringPMF]:
        return [self.offspring] + [o.offspring for o in self.overrides]

    @property
    def rho(self) -> float:
        means = {round(p.mean, 12) for p in self.laws}
        if len(means) > 1:
            raise BranchingError("branching ratio is not constant")
        return self.offspring.mean

    @property
    def independent_weight(self) -> float:
        return {"independent": 1.0, "vertex_coupled": 0.0}.get(self.mode, self.lam)

    def on_space(self, space: StateSpace) -> "BranchingLaw":
        return BranchingLaw(space, self.offspring, self.mode, self.lam, self.overrides, self.require_constant_rho)

    def law_index(self, sites: np.ndarray) -> np.ndarray:
        """Index into ``laws`` for each site (later overrides win)."""
        sites = np.asarray(sites, dtype=np.int64)
        idx = np.zeros(sites.size, dtype=np.int64)
        if not self.overrides:
            return idx
        L = None
        for j, o in enumerate(self.overrides, start=1):
            if o.band is not None:
                if L is None:
                    L = self.space.lengths(sites)
                idx[(L >= o.band[0]) & (L <= o.band[1])] = j
            else:
                idx[sites == o.state] = j
        return idx

    def offspring_at(self, x: int) -> OffspringPMF:
        return self.laws[int(self.law_index(np.array([x]))[0])]

    # -- derived objects

    def mean_measures(self, x: int) -> dict:
        """Barycentre ``rho_x p_x``, displacement ``p_x`` and ``rho_x``."""
        nb = self.space.neighbors(x)
        rho = self.offspring_at(x).mean
        disp: dict[int, float] = {}
        for y, p in nb:
            disp[y] = disp.get(y, 0.0) + p
        return {"barycentre": {y: rho * p for y, p in disp.items()}, "displacement": disp, "rho": rho}

    def sample_branch(self, x: int, rng: np.random.Generator) -> Population:
        """One draw from ``Pi_x`` (particle-level reference sampler)."""
        pi = self.offspring_at(x)
        k = int(pi.sample(rng))
        indep = self.mode == "independent" or (self.mode == "mixture" and rng.random() < self.lam)
        nb = self.space.neighbors(x)
        targets = np.array([y for y, _ in nb], dtype=np.int64)
        probs = np.array([p for _, p in nb])
        probs = probs / probs.sum()
        if indep:
            ys = targets[rng.choice(targets.size, size=k, p=probs)]
        else:
            ys = np.full(k, targets[rng.choice(targets.size, p=probs)], dtype=np.int64)
        return Population.from_arrays(self.space, ys, np.ones(k, dtype=np.int64))

    def enumerate_branch(self, x: int) -> list[tuple[Population, float]]:
        """Exact law of ``Pi_x`` for finite-support offspring (small cases)."""
        vals, probs = self.offspring_at(x).support()
        nb = self.space.neighbors(x)
        out: dict[Population, float] = {}
        w_ind = self.independent_weight
        for k, pk in zip(vals.tolist(), probs.tolist()):
            if w_ind > 0:
                for combo in product(range(len(nb)), repeat=k):
                    pr = pk * w_ind
                    for c in combo:
                        pr *= nb[c][1]
                    pop = Population.from_arrays(
                        self.space, np.array([nb[c][0] for c in combo], dtype=np.int64), np.ones(k, dtype=np.int64)
                    )
                    out[pop] = out.get(pop, 0.0) + pr
            if w_ind < 1:
                for y, py in nb:
                    pop = Population.delta(self.space, y, k)
                    out[pop] = out.get(pop, 0.0) + pk * (1 - w_ind) * py
        return list(out.items())

    def describe(self) -> dict:
        d = {"mode": self.mode, "offspring": self.offspring.describe()}
        if self.mode == "mixture":
            d["lambda"] = self.lam
        if self.overrides:
            d["overrides"] = [
                {**({"band": list(o.band)} if o.band else {"state": self.space.format(o.state)}), "offspring": o.offspring.describe()}
                for o in self.overrides
            ]
        return d


def sample_branch(law: BranchingLaw, x: int, rng) -> Population:
    return law.sample_branch(x, rng)


def mean_measures(law: BranchingLaw, x: int) -> dict:
    return law.mean_measures(x)


def law_from_config(block: dict, space: StateSpace) -> BranchingLaw:
    if "offspring" not in block:
        raise BranchingError("branching block is missing 'offspring'")
    mode = block.get("mode", "independent")
    if mode == "independent_bd":
        mode = "independent"
    base = offspring_from_config(block["offspring"])
    ovs = []
    for o in block.get("overrides", []):
        pi = offspring_from_config(o["offspring"])
        if "band" in o:
            lo, hi = o["band"]
            ovs.append(Override(pi, band=(int(lo), int(hi))))
        elif "state" in o:
            ovs.append(Override(pi, state=space.parse(str(o["state"]))))
        else:
            raise BranchingError("override needs 'band' or 'state'")
    return BranchingLaw(
        space,
        base,
        mode,
        float(block.get("lambda", 1.0 if mode != "vertex_coupled" else 0.0)),
        tuple(ovs),
        bool(block.get("require_constant_rho", True)),
    )
