"""Harmonic measures on the space of ends of a tree, Green and Martin kernels.

For a nearest-neighbour walk on a tree every quantity here is built from
directed first-passage probabilities ``F(x -> y)`` across edges:

* ``P_x(hit v)`` is the product of ``F`` along the geodesic ``x .. v``;
* from ``v`` with parent ``u``, the walk ends in the shadow of ``v`` with
  probability ``h(v) = 1 - a(1 - b)/(1 - ab)``, ``a = F(v->u)``,
  ``b = F(u->v)`` (sum over the excursions out of the subtree);
* ``kappa_x(shadow v)`` is ``1 - P_x(hit v)(1 - h(v))`` if ``x`` lies below
  ``v`` and ``P_x(hit v) h(v)`` otherwise;
* ``G(y, y) = 1 / (1 - sum_w p(y, w) F(w -> y))`` and
  ``G(x, y) = P_x(hit y) G(y, y)``.

Two kernel families are supported in closed form: group-invariant laws
(``p(x, x l) = mu_l``) and radial laws (parent probability ``alpha``,
children uniform, root uniform).  Independent oracles: linear solves on
finite truncations, an exact lumping of the radial chain relative to a
target vertex (with certified two-sided bounds), and the distance chain
for return probabilities.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .population import Population
from .state_space import (
    DepthQuotient,
    ExplicitSpace,
    StateSpace,
    StateSpaceError,
    TransienceError,
    WordTree,
    truncate,
)

RECURRENCE_SLACK = 1e-9


class BoundaryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# first passage


def _newton_minimal(phi, jac, n: int, tol: float = 1e-13, max_iter: int = 500) -> tuple[np.ndarray, int]:
    """Least non-negative fixed point of a monotone polynomial system.

    Newton's method started at 0 increases monotonically to the least
    fixed point for systems with non-negative coefficients.
    """
    F = np.zeros(n)
    for it in range(1, max_iter + 1):
        r = phi(F) - F
        J = jac(F)
        try:
            step = np.linalg.solve(np.eye(n) - J, r)
        except np.linalg.LinAlgError:
            step = r
        F_new = np.minimum(F + np.maximum(step, 0.0), 1.0)
        if np.max(np.abs(F_new - F)) < tol:
            return F_new, it
        F = F_new
    raise BoundaryError(f"first-passage iteration did not converge in {max_iter} steps")


class TreeFirstPassage:
    """Edge first-passage probabilities of a nearest-neighbour tree walk."""

    def __init__(self, tree: WordTree, tol: float = 1e-13, force_letters: bool = False):
        self.tree = tree
        self.tol = tol
        d = tree.d
        if tree.is_radial and not force_letters:
            a = tree.back_probability
            self.radial = True
            self.alpha = a
            # F_up = alpha + (1 - alpha) F_up^2, least root
            self.F_up = 1.0 if a >= 0.5 else (a / (1 - a) if a > 0 else 0.0)
            self._h = []  # down probabilities by depth of the start vertex
            self.iterations = 0
        else:
            self.radial = False
            if not tree.is_group_invariant:
                raise BoundaryError("kernel is neither radial nor group invariant")
            mu = tree.letter_weights()
            inv = np.asarray(tree.inverse)
            self.mu = mu

            def phi(F):
                s = mu * F[inv]  # mu_l' F_{inv l'}
                tot = s.sum()
                return mu + F * (tot - s)

            def jac(F):
                s = mu * F[inv]
                tot = s.sum()
                J = np.diag(tot - s)
                # d/dF_m of F_l * sum_{l' != l} mu_l' F_{inv l'}
                for l in range(d):
                    for lp in range(d):
                        if lp != l:
                            J[l, inv[lp]] += F[l] * mu[lp]
                return J

            self.F_letter, self.iterations = _newton_minimal(phi, jac, d, tol)
            self.alpha = None
        self.return_probability_root = self._return_prob(0)
        self.transient = self.return_probability_root < 1 - RECURRENCE_SLACK

    # radial down-probabilities h_k = P(from depth k hit a given child)
    def _down(self, k: int) -> float:
        while len(self._h) <= k:
            j = len(self._h)
            d, a, Fu = self.tree.d, self.alpha, self.F_up
            if j == 0:
                denom = 1.0 - (d - 1) / d * Fu
                self._h.append(min(1.0, (1.0 / d) / denom) if denom > 0 else 1.0)
            else:
                pc = (1 - a) / (d - 1)
                denom = 1.0 - pc * (d - 2) * Fu - a * self._h[j - 1]
                self._h.append(min(1.0, pc / denom) if denom > 0 else 1.0)
        return self._h[k]

    def edge(self, x: int, y: int) -> float:
        """``F(x -> y)`` for adjacent ``x, y``."""
        t = self.tree
        if self.radial:
            if x != 0 and t.parent(x) == y:
                return self.F_up
            if y != 0 and t.parent(y) == x:
                return self._down(t.length(x))
            raise StateSpaceError("first passage is only defined across an edge")
        for l in range(t.d):
            if t.multiply(x, l) == y:
                return float(self.F_letter[l])
        raise StateSpaceError("first passage is only defined across an edge")

    def path(self, x: int, y: int) -> list[int]:
        """Geodesic ``x = z_0, ..., z_m = y``."""
        t = self.tree
        wx, wy = t.decode(x), t.decode(y)
        c = 0
        while c < min(len(wx), len(wy)) and wx[c] == wy[c]:
            c += 1
        up = [t.encode(wx[:j]) for j in range(len(wx), c - 1, -1)]
        down = [t.encode(wy[:j]) for j in range(c + 1, len(wy) + 1)]
        return up + down

    def hit(self, x: int, y: int) -> float:
        p = self.path(x, y)
        out = 1.0
        for a, b in zip(p[:-1], p[1:]):
            out *= self.edge(a, b)
        return out

    def _return_prob(self, y: int) -> float:
        t = self.tree
        if self.radial:
            if y == 0:
                return self.F_up
            return self.alpha * self._down(t.length(y) - 1) + (1 - self.alpha) * self.F_up
        mu = self.mu
        return float(sum(mu[l] * self.F_letter[t.inverse[l]] for l in range(t.d)))

    def green_diag(self, y: int) -> float:
        u = self._return_prob(y)
        if u >= 1 - RECURRENCE_SLACK:
            raise TransienceError("walk is recurrent: Green function is infinite")
        return 1.0 / (1.0 - u)

    def green(self, x: int, y: int) -> float:
        return self.hit(x, y) * self.green_diag(y)

    def shadow_escape(self, v: int) -> float:
        """``h(v)``: probability, from ``v``, of ending in the shadow of ``v``."""
        if v == 0:
            raise BoundaryError("the root has no shadow (cylinders are anchored at v != o)")
        u = self.tree.parent(v)
        a = self.edge(v, u)
        b = self.edge(u, v)
        return 1.0 - a * (1.0 - b) / (1.0 - a * b)

    def kappa(self, x: int, v: int) -> float:
        """``kappa_x(shadow v)``."""
        self.require_transient()
        t = self.tree
        hv = self.shadow_escape(v)
        P = self.hit(x, v)
        if t.prefix(x, t.length(v)) == v and t.length(x) >= t.length(v):
            return 1.0 - P * (1.0 - hv)
        return P * hv

    def require_transient(self):
        if not self.transient:
            raise TransienceError("kernel is not transient (return probability 1)")

    # vectorized kappa over word codes / quotient classes (radial kernels)
    def kappa_array(self, lengths: np.ndarray, common: np.ndarray, v: int) -> np.ndarray:
        """``kappa_x(shadow v)`` from ``|x|`` and the common-prefix length with ``v``."""
        if not self.radial:
            raise BoundaryError("vectorized kappa needs a radial kernel")
        self.require_transient()
        D = self.tree.length(v)
        hv = self.shadow_escape(v)
        # prod_{j=i}^{D-1} h_j for each confluent depth i
        downs = np.array([self._down(j) for j in range(D)] + [1.0])
        suffix = np.cumprod(downs[::-1])[::-1]  # suffix[i] = prod_{j>=i} downs[j]
        i = np.minimum(common, D)
        k = lengths - i
        P = self.F_up ** k.astype(float) * suffix[i]
        return np.where(i == D, 1.0 - P * (1.0 - hv), P * hv)


def first_passage(space: StateSpace, x: int, y: int) -> float:
    """Probability of ever hitting ``y`` from ``x`` (``x, y`` adjacent)."""
    if isinstance(space, WordTree):
        if space.distance(x, y) != 1:
            raise StateSpaceError("first passage needs adjacent vertices")
        return fp_for(space).edge(x, y)
    if isinstance(space, ExplicitSpace):
        return _explicit_hit(space, x, y)
    raise BoundaryError(f"first passage not available on {space.kind}")


def _explicit_hit(space: ExplicitSpace, x: int, y: int) -> float:
    P = space.matrix()
    n = P.shape[0]
    others = [i for i in range(n) if i != y]
    A = np.eye(n - 1) - P[np.ix_(others, others)]
    b = P[others, y]
    # minimal solution: restrict to states that can reach y
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    if x == y:
        return float(P[y, y] + P[y, others] @ sol)
    return float(min(1.0, sol[others.index(x)]))


_FP_CACHE: dict = {}


def fp_for(tree: WordTree) -> TreeFirstPassage:
    key = tree.describe()
    fp = _FP_CACHE.get(key)
    if fp is None:
        fp = TreeFirstPassage(tree)
        _FP_CACHE[key] = fp
    return fp


# ---------------------------------------------------------------------------
# cylinders, test functions, tables


@dataclass(frozen=True)
class Cylinder:
    """Shadow of the anchor ``v != o``: ends passing through ``v``."""

    anchor: int
    depth: int

    @classmethod
    def of(cls, tree: WordTree, v: int) -> "Cylinder":
        if v == 0:
            raise BoundaryError("cylinders are anchored at a vertex other than the root")
        return cls(int(v), tree.length(v))

    def contains(self, tree: WordTree, x: int) -> bool:
        """Whether the vertex / finite word ``x`` continues through the anchor."""
        return tree.length(x) >= self.depth and tree.prefix(x, self.depth) == self.anchor


def anchors(tree: WordTree, depth: int) -> list[int]:
    """All vertices at exactly ``depth`` in increasing code order."""
    b = tree.ball(depth)
    return [int(v) for v in b if tree.length(int(v)) == depth]


@dataclass(frozen=True)
class TestFunction:
    """``phi = sum_i coeff_i 1_{C_i}`` over cylinders."""

    terms: tuple[tuple[Cylinder, float], ...]

    @classmethod
    def indicator(cls, tree: WordTree, v: int) -> "TestFunction":
        return cls(((Cylinder.of(tree, v), 1.0),))

    @classmethod
    def full_boundary(cls, tree: WordTree) -> "TestFunction":
        return cls(tuple((Cylinder.of(tree, v), 1.0) for v in anchors(tree, 1)))

    @classmethod
    def from_config(cls, tree: WordTree, spec) -> "TestFunction":
        """``[["ab", 1.0], ["c", -1.0]]`` or ``{"ab": 1.0}`` or ``"full"``."""
        if spec == "full":
            return cls.full_boundary(tree)
        items = spec.items() if isinstance(spec, dict) else spec
        return cls(tuple((Cylinder.of(tree, tree.parse(str(w))), float(c)) for w, c in items))

    @property
    def depth(self) -> int:
        return max(c.depth for c, _ in self.terms)

    @property
    def sup_norm(self) -> float:
        """``max |phi|`` (cylinders may overlap)."""
        # evaluate on every depth-D cylinder
        return max(abs(v) for v in self._cell_values().values()) if self.terms else 0.0

    def _cell_values(self) -> dict:
        tree = self._tree
        return {v: self.evaluate(tree, v) for v in anchors(tree, self.depth)}

    def bind(self, tree: WordTree) -> "TestFunction":
        object.__setattr__(self, "_tree", tree)
        return self

    def evaluate(self, tree: WordTree, end_prefix: int) -> float:
        """Value on any end whose first ``depth`` letters are ``end_prefix``."""
        if tree.length(end_prefix) < self.depth:
            raise BoundaryError("end prefix shorter than the test function's depth")
        return sum(c for cyl, c in self.terms if cyl.contains(tree, end_prefix))

    def extension_on_prefix(self, tree: WordTree, sites: np.ndarray, lengths=None, prefix_fn=None) -> np.ndarray:
        """Continuous extension to vertices: ``sum coeff 1[anchor is a prefix of x]``."""
        out = np.zeros(len(sites))
        for cyl, c in self.terms:
            pre = prefix_fn(sites, cyl.depth) if prefix_fn else tree.prefixes(sites, cyl.depth)
            L = lengths if lengths is not None else tree.lengths(sites)
            out += c * ((pre == cyl.anchor) & (L >= cyl.depth))
        return out

    def integrate(self, table: "BoundaryMeasureTable") -> float:
        if self.depth > table.depth:
            raise BoundaryError(f"test function depth {self.depth} exceeds table depth {table.depth}")
        return sum(c * table.mass[cyl.anchor] for cyl, c in self.terms)

    def describe(self, tree: WordTree) -> list:
        return [[tree.format(c.anchor), coef] for c, coef in self.terms]


@dataclass
class BoundaryMeasureTable:
    """Masses of all cylinders of depth ``1..depth``."""

    tree: WordTree
    depth: int
    mass: dict[int, float]

    @property
    def total(self) -> float:
        return float(sum(self.mass[v] for v in anchors(self.tree, 1)))

    def consistency_residual(self) -> float:
        t = self.tree
        worst = 0.0
        for D in range(1, self.depth):
            for v in anchors(t, D):
                kids = [t.multiply(v, l) for l in range(t.d)]
                kids = [k for k in kids if k > v]
                worst = max(worst, abs(self.mass[v] - sum(self.mass[k] for k in kids)))
        return worst

    def normalized(self) -> "BoundaryMeasureTable":
        tot = self.total
        return BoundaryMeasureTable(self.tree, self.depth, {v: m / tot for v, m in self.mass.items()})

    def rows(self):
        for v in sorted(self.mass, key=lambda v: (self.tree.length(v), v)):
            yield self.tree.format(v), self.tree.length(v), self.mass[v]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["anchor_word", "depth", "mass"])
        for a, d, m in self.rows():
            w.writerow([a, d, repr(float(m))])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# hitting measures


def _tree_of(space: StateSpace) -> WordTree:
    if isinstance(space, DepthQuotient):
        return space.tree
    if isinstance(space, WordTree):
        return space
    raise BoundaryError(f"boundary measures need a tree-like space, got {space.kind}")


def hitting_cylinder(space: StateSpace, x: int, c: Cylinder | int, method: str = "closed", tol: float = 1e-10) -> float:
    """``kappa_x(C)``: probability that the walk from ``x`` ends in ``C``.

    ``method``: ``closed`` (first-passage products), ``comb`` (certified
    iterative-deepening solve of the exact radial lumping) or
    ``truncation`` (iterative-deepening absorption solve on balls).
    """
    tree = _tree_of(space)
    v = c.anchor if isinstance(c, Cylinder) else int(c)
    fp = fp_for(tree)
    fp.require_transient()
    if method == "closed":
        return fp.kappa(x, v)
    if method == "comb":
        return comb_hitting(tree, x, v, tol).value
    if method == "truncation":
        return truncation_hitting(tree, x, v, tol).value
    raise BoundaryError(f"unknown method {method!r}")


@dataclass(frozen=True)
class CertifiedValue:
    value: float
    lower: float
    upper: float
    radius: int

    @property
    def width(self) -> float:
        return self.upper - self.lower


def _comb_class(tree: WordTree, x: int, v: int) -> tuple[int, int]:
    D = tree.length(v)
    wx, wv = tree.decode(x), tree.decode(v)
    c = 0
    while c < min(len(wx), D) and wx[c] == wv[c]:
        c += 1
    return c, len(wx) - c


@lru_cache(maxsize=256)
def _comb_solution(d: int, alpha: float, D: int, R: int):
    """Lower/upper harmonic values on the lumped chain relative to a depth-``D`` anchor.

    States ``(i, k)``: confluent depth ``i`` with the path ``o .. v`` and
    offset ``k`` off the path (``i = D``: below ``v``).  Offsets are cut at
    ``R`` with front values ``[1 - q^R, 1]`` below ``v`` and ``[0, q^R]``
    elsewhere, ``q = alpha / (1 - alpha)`` the probability of ever climbing
    one level.
    """
    q = alpha / (1 - alpha)
    qR = q**R
    idx = lambda i, k: i * (R + 1) + k
    n = (D + 1) * (R + 1)
    rows, cols, vals = [], [], []
    interior = np.zeros(n, dtype=bool)

    def add(s, t, p):
        rows.append(s)
        cols.append(t)
        vals.append(p)

    for i in range(D + 1):
        for k in range(R):
            s = idx(i, k)
            interior[s] = True
            if k == 0 and i < D:
                if i == 0:
                    add(s, idx(1, 0), 1.0 / d)
                    add(s, idx(0, 1), (d - 1) / d)
                else:
                    add(s, idx(i - 1, 0), alpha)
                    add(s, idx(i + 1, 0), (1 - alpha) / (d - 1))
                    add(s, idx(i, 1), (1 - alpha) * (d - 2) / (d - 1))
            elif k == 0 and i == D:
                add(s, idx(D - 1, 0), alpha)
                add(s, idx(D, 1), 1 - alpha)
            else:
                back = idx(i, k - 1)
                add(s, back, alpha)
                add(s, idx(i, k + 1), 1 - alpha)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    I = np.nonzero(interior)[0]
    Fr = np.nonzero(~interior)[0]
    A = sp.eye(I.size) - P[I][:, I]
    B = P[I][:, Fr]
    front_i = Fr // (R + 1)
    lo_front = np.where(front_i == D, 1 - qR, 0.0)
    hi_front = np.where(front_i == D, 1.0, qR)
    lu = spla.splu(A.tocsc())
    lo = np.zeros(n)
    hi = np.zeros(n)
    lo[I] = lu.solve(B @ lo_front)
    hi[I] = lu.solve(B @ hi_front)
    lo[Fr] = lo_front
    hi[Fr] = hi_front
    return lo, hi


def comb_hitting(tree: WordTree, x: int, v: int, tol: float = 1e-10, R0: int = 8, R_max: int = 4096) -> CertifiedValue:
    """Certified ``kappa_x(shadow v)`` for radial kernels by deepening ``R``."""
    if not tree.is_radial:
        raise BoundaryError("the lumped solve needs a radial kernel")
    alpha = tree.back_probability
    if alpha >= 0.5:
        raise TransienceError("radial walk with alpha >= 1/2 is not transient")
    D = tree.length(v)
    i, k = _comb_class(tree, x, v)
    R = max(R0, k + 2)
    while True:
        lo, hi = _comb_solution(tree.d, alpha, D, R)
        s = i * (R + 1) + k
        if hi[s] - lo[s] < tol:
            return CertifiedValue(0.5 * (lo[s] + hi[s]), lo[s], hi[s], R)
        if R >= R_max:
            raise BoundaryError(f"sandwich width {hi[s] - lo[s]:.3g} above tolerance at R={R}")
        R *= 2


def truncation_hitting(
    tree: WordTree, x: int, v: int, tol: float = 1e-10, R0: int = 3, max_vertices: int = 400_000
) -> CertifiedValue:
    """Absorption solve on balls with front values ``1_shadow``, deepened until
    successive estimates differ by less than ``tol``.  ``lower``/``upper``
    are the last two estimates (not a certified bracket).
    """
    prev = None
    gap = float("inf")
    R = max(R0, tree.length(x) + 1, tree.length(v) + 1)
    D = tree.length(v)
    while True:
        try:
            tr = truncate(tree, R - 1, 1, max_vertices=max_vertices)
        except StateSpaceError:
            if prev is None:
                raise
            raise BoundaryError(f"truncation solve not converged (last gap {gap:.3g}) within size bound") from None
        verts = tr.vertices
        I = np.nonzero(tr.interior)[0]
        Fr = np.nonzero(~tr.interior)[0]
        fval = ((tree.prefixes(verts[Fr], D) == v) & (tree.lengths(verts[Fr]) >= D)).astype(float)
        A = sp.eye(I.size) - tr.P[I][:, I]
        b = tr.P[I][:, Fr] @ fval
        sol = spla.spsolve(A.tocsc(), b)
        val = float(sol[np.searchsorted(verts[I], x)])
        if prev is not None:
            gap = abs(val - prev)
            if gap < tol:
                return CertifiedValue(val, min(val, prev), max(val, prev), R)
        prev = val
        R += 1


# ---------------------------------------------------------------------------
# harmonic extensions and population measures


class HarmonicExtension:
    """``f^phi(x) = <kappa_x, phi>``."""

    def __init__(self, tree: WordTree, phi: TestFunction):
        self.tree = tree
        self.phi = phi
        self.fp = fp_for(tree)
        self.fp.require_transient()

    def __call__(self, x: int) -> float:
        return sum(c * self.fp.kappa(x, cyl.anchor) for cyl, c in self.phi.terms)

    def on_space(self, space: StateSpace) -> "SiteKappa":
        return SiteKappa(space, self.phi)

    def mean_value_residual(self, x: int) -> float:
        f = self(x)
        return abs(f - sum(p * self(y) for y, p in self.tree.neighbors(x)))


def harmonic_extension(tree: WordTree, phi: TestFunction) -> HarmonicExtension:
    return HarmonicExtension(tree, phi)


class SiteKappa:
    """Vectorized ``x -> <kappa_x, phi>`` on tree codes or quotient classes.

    Picklable; used as a per-step functional by the simulator.
    """

    def __init__(self, space: StateSpace, phi: TestFunction):
        self.space = space
        self.tree = _tree_of(space)
        self.phi = phi
        if isinstance(space, DepthQuotient) and phi.depth > space.depth:
            raise BoundaryError(f"test function depth {phi.depth} exceeds quotient depth {space.depth}")

    def _lengths_prefix(self, sites):
        sp_ = self.space
        if isinstance(sp_, DepthQuotient):
            return sp_.lengths(sites), (lambda s, n: sp_.prefixes(s, n))
        return self.tree.lengths(sites), (lambda s, n: self.tree.prefixes(s, n))

    def _term(self, fp, sites, L, pre, cyl) -> np.ndarray:
        v, D = cyl.anchor, cyl.depth
        common = np.zeros(sites.size, dtype=np.int64)
        for j in range(1, D + 1):
            common += pre(sites, j) == self.tree.prefix(v, j)
        return fp.kappa_array(L, common, v)

    def __call__(self, sites: np.ndarray) -> np.ndarray:
        sites = np.asarray(sites, dtype=np.int64)
        fp = fp_for(self.tree)
        if not fp.radial:
            if isinstance(self.space, DepthQuotient):
                raise BoundaryError("quotient classes need a radial kernel")
            return np.array([sum(c * fp.kappa(int(x), cyl.anchor) for cyl, c in self.phi.terms) for x in sites])
        L, pre = self._lengths_prefix(sites)
        out = np.zeros(sites.size)
        for cyl, c in self.phi.terms:
            out += c * self._term(fp, sites, L, pre, cyl)
        return out

    def extension(self, sites: np.ndarray) -> np.ndarray:
        """Continuous extension ``phi~`` of ``phi`` to vertices.

        ``phi~(x) = sum c 1[anchor is a prefix of x]`` once ``x`` is at least
        as deep as the anchor; above it, ``kappa_x`` of the cylinder.  This
        agrees with ``phi`` at the boundary and equals 1 when ``phi = 1``.
        """
        sites = np.asarray(sites, dtype=np.int64)
        L, pre = self._lengths_prefix(sites)
        fp = fp_for(self.tree)
        out = np.zeros(sites.size)
        for cyl, c in self.phi.terms:
            deep = L >= cyl.depth
            val = np.zeros(sites.size)
            if np.any(deep):
                val[deep] = pre(sites[deep], cyl.depth) == cyl.anchor
            if np.any(~deep):
                short = sites[~deep]
                if fp.radial:
                    val[~deep] = self._term(fp, short, L[~deep], pre, cyl)
                else:
                    val[~deep] = [fp.kappa(int(x), cyl.anchor) for x in short]
            out += c * val
        return out


def kappa_population(m: Population, depth: int, normalized: bool = False, max_depth: int = 12) -> BoundaryMeasureTable:
    """``kappa_m = sum_x m(x) kappa_x`` as a cylinder table up to ``depth``."""
    if depth < 1:
        raise BoundaryError("table depth must be >= 1")
    if depth > max_depth:
        raise BoundaryError(f"table depth {depth} exceeds configured bound {max_depth}")
    if m.size == 0:
        raise BoundaryError("empty population")
    tree = _tree_of(m.space)
    c = m.counts.astype(float)
    mass = {}
    for D in range(1, depth + 1):
        for v in anchors(tree, D):
            f = SiteKappa(m.space, TestFunction.indicator(tree, v))
            mass[v] = float(np.dot(c, f(m.sites)))
    tab = BoundaryMeasureTable(tree, depth, mass)
    return tab.normalized() if normalized else tab


def kappa_table(tree: WordTree, x: int, depth: int, method: str = "closed", tol: float = 1e-10) -> BoundaryMeasureTable:
    """``kappa_x`` on all cylinders to ``depth``."""
    mass = {}
    for D in range(1, depth + 1):
        for v in anchors(tree, D):
            mass[v] = hitting_cylinder(tree, x, v, method, tol)
    return BoundaryMeasureTable(tree, depth, mass)


def stationarity_residual(tree: WordTree, radius: int, depth: int, method: str = "closed") -> float:
    """``max |kappa_x(C) - sum_y p(x,y) kappa_y(C)|`` over the ball and cylinders."""
    worst = 0.0
    cache: dict = {}

    def k(x, v):
        key = (x, v)
        if key not in cache:
            cache[key] = hitting_cylinder(tree, x, v, method)
        return cache[key]

    for x in tree.ball(radius):
        x = int(x)
        nb = tree.neighbors(x)
        for D in range(1, depth + 1):
            for v in anchors(tree, D):
                worst = max(worst, abs(k(x, v) - sum(p * k(y, v) for y, p in nb)))
    return worst


# ---------------------------------------------------------------------------
# Green, Martin, spectral radius


@dataclass(frozen=True)
class GreenMartin:
    G: float
    K: float


def green_martin(space: StateSpace, x: int, y: int, o: int = 0, oracle_radius: int | None = None) -> GreenMartin:
    """``G(x, y)`` and ``K_o(x, y) = G(x, y) / G(o, y)``."""
    if isinstance(space, WordTree):
        fp = fp_for(space)
        if not fp.transient:
            raise TransienceError("kernel is not transient: Green function is infinite")
        Gxy = fp.green(x, y)
        Goy = fp.green(o, y)
    elif isinstance(space, ExplicitSpace):
        R = oracle_radius or 50
        Gxy = green_truncation(space, x, y, R)
        Goy = green_truncation(space, o, y, R)
    else:
        raise BoundaryError(f"Green function not available on {space.kind}")
    return GreenMartin(Gxy, Gxy / Goy)


def green_truncation(space: StateSpace, x: int, y: int, R: int, max_vertices: int = 2_000_000) -> float:
    """Oracle: ``G_R(x, y)`` from ``(I - P_int) g = delta_y`` on a truncation.

    Radial tree kernels are solved on the exact depth lumping (so ``R`` can
    be large); other spaces on the radius-``R`` ball.  ``G_R`` increases to
    ``G`` as ``R`` grows.
    """
    if isinstance(space, WordTree) and space.is_radial:
        D = max(space.length(x), space.length(y))
        Q = DepthQuotient(space, D)
        hx, hy = int(Q.project([x])[0]), int(Q.project([y])[0])
        # classes with length <= R
        nodes = [L * Q.M + p for L in range(R + 1) for p in range(Q.M) if (L <= D and space.length(p) == L) or (L > D and space.length(p) == D)]
        nodes = np.array(sorted(nodes), dtype=np.int64)
        interior = Q.lengths(nodes) < R
        T, Pr = Q.kernel_rows(nodes[interior])
        n = nodes.size
        Ii = np.nonzero(interior)[0]
        pos = np.searchsorted(nodes, T.ravel())
        ok = Pr.ravel() > 0
        rows = np.repeat(Ii, T.shape[1])[ok]
        P = sp.csr_matrix((Pr.ravel()[ok], (rows, pos[ok])), shape=(n, n))
    else:
        tr = truncate(space, R - 1, 1, max_vertices=max_vertices)
        nodes, interior, P = tr.vertices, tr.interior, tr.P
        hx, hy = x, y
    I = np.nonzero(interior)[0]
    A = (sp.eye(I.size) - P[I][:, I]).tocsc()
    # column of G at y: (I - P) g = delta_y  -> solve transposed for row x
    e = np.zeros(I.size)
    iy = int(np.searchsorted(nodes[I], hy))
    e[iy] = 1.0
    # G(x, y) = [(I - P)^{-1}]_{x y}: solve (I - P) g = e_y for g(.) = G(., y)
    g = spla.spsolve(A, e)
    return float(g[int(np.searchsorted(nodes[I], hx))])


@dataclass(frozen=True)
class SpectralRadius:
    estimate: float
    lower: float
    upper: float
    n_max: int


def return_probabilities(tree: WordTree, n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """``log p^(2n)(o, o)`` for ``n = 0..n_max`` via the distance chain."""
    if not tree.is_radial:
        raise BoundaryError("spectral radius via the distance chain needs a radial kernel")
    a = tree.back_probability
    if a == 0:
        raise BoundaryError("zero return probability: the walk never comes back")
    L = n_max + 2
    vec = np.zeros(L + 1)
    vec[0] = 1.0
    logscale = 0.0
    logs = [0.0]
    for step in range(1, 2 * n_max + 1):
        new = np.zeros_like(vec)
        new[1] += vec[0]
        new[:-1] += a * vec[1:]
        new[0] -= 0.0
        new[2:] += (1 - a) * vec[1:-1]
        vec = new
        s = vec.max()
        vec /= s
        logscale += math.log(s)
        if step % 2 == 0:
            logs.append(logscale + math.log(vec[0]) if vec[0] > 0 else -math.inf)
    return np.arange(n_max + 1), np.array(logs)


def spectral_radius(space: StateSpace, n_max: int = 2000, tol: float | None = None) -> SpectralRadius:
    """``r(P) = limsup p^(n)(o,o)^(1/n)``.

    ``estimate = p^(2n)(o,o)^(1/(2n))`` at ``n = n_max`` (a lower bound by
    supermultiplicativity).  ``lower = sqrt(p^(2n) / p^(2n-2))``, nondecreasing
    in ``n`` for reversible chains, is the sharper rigorous lower bound;
    ``upper`` corrects it for the ``n^(-3/2)`` polynomial factor of trees
    (extrapolation, not certified).
    """
    if n_max < 2:
        raise BoundaryError("n_max must be at least 2")
    if isinstance(space, ExplicitSpace):
        P = space.matrix()
        v = np.zeros(P.shape[0])
        v[0] = 1.0
        logs = [0.0]
        ls = 0.0
        for step in range(1, 2 * n_max + 1):
            v = v @ P
            s = v.max()
            v = v / s
            ls += math.log(s)
            if step % 2 == 0:
                logs.append(ls + math.log(v[0]) if v[0] > 0 else -math.inf)
        logs = np.array(logs)
        poly = 0.0
    elif isinstance(space, WordTree):
        _, logs = return_probabilities(space, n_max)
        poly = 1.5
    else:
        raise BoundaryError("spectral radius needs a tree or an explicit finite kernel")
    if not np.isfinite(logs[-1]) or not np.isfinite(logs[-2]):
        raise BoundaryError("zero return probability: the walk never comes back")
    n = n_max
    est = math.exp(logs[-1] / (2 * n))
    ratio = math.exp(0.5 * (logs[-1] - logs[-2]))
    lower = max(est, ratio)
    upper = ratio / math.sqrt(max(1e-300, (1 - 1.0 / n) ** poly)) if poly else ratio
    upper = max(upper, lower)
    if tol is not None and upper - lower > tol:
        raise BoundaryError(f"n_max={n_max} brackets r only to {upper - lower:.3g} > {tol}")
    return SpectralRadius(est, lower, upper, n_max)


# ---------------------------------------------------------------------------
# kernel table


@dataclass
class KernelTable:
    tree: WordTree
    radius: int
    first_passage: dict[tuple[int, int], float]
    green: dict[tuple[int, int], float]
    spectral: SpectralRadius | None
    transient: bool

    def to_rows(self):
        t = self.tree
        for (x, y), F in sorted(self.first_passage.items()):
            yield {"x": t.format(x), "y": t.format(y), "F": F, "G": self.green.get((x, y), math.nan)}


def kernel_table(tree: WordTree, radius: int = 2, n_max: int = 2000, origin: int = 0) -> KernelTable:
    fp = fp_for(tree)
    F, G = {}, {}
    ball = [int(x) for x in tree.ball(radius)]
    for x in ball:
        for y, _ in tree.neighbors(x):
            if tree.length(y) <= radius:
                F[(x, y)] = fp.edge(x, y)
    if fp.transient:
        for y in ball:
            G[(origin, y)] = fp.green(origin, y)
            if y != origin:
                G[(y, origin)] = fp.green(y, origin)
    spec = None
    try:
        spec = spectral_radius(tree, n_max)
    except BoundaryError:
        pass
    return KernelTable(tree, radius, F, G, spec, fp.transient)
