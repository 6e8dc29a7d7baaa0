"""Countable state spaces with finite-support transition kernels.

Tree-like spaces (homogeneous trees T_d, free groups F_k) store vertices as
reduced words packed into a single integer with bijective base-``d``
numeration: the empty word is 0 and ``code(w + [l]) = d * code(w) + l + 1``.
The code doubles as the interned vertex handle, so populations of millions
of particles are plain ``int64`` arrays and iteration order is the numeric
order of handles.

A homogeneous tree T_d is the Cayley graph of the free product of ``d``
copies of Z/2 (every letter is its own inverse); the free group F_k uses
``2k`` letters where letter ``2i`` is the generator ``a_i`` and ``2i + 1``
its inverse.  One word machinery serves both.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import scipy.sparse as sp

ROOT = 0
_INT64_MAX = np.iinfo(np.int64).max
_ROOT_NAME = "-"


class StateSpaceError(ValueError):
    """Malformed vertex, kernel or space for the requested operation."""


class TransienceError(StateSpaceError):
    """Operation needs a transient kernel and the configured one is not."""


# ---------------------------------------------------------------------------
# word codes


def _length_offsets(d: int, max_len: int) -> list[int]:
    # offsets[L] = number of words over a d-letter alphabet of length < L
    out = [0]
    for L in range(max_len + 2):
        out.append(out[-1] + d**L)
    return out


def max_word_length(d: int) -> int:
    """Longest word whose code still fits a signed 64-bit handle."""
    L = 0
    while True:
        # largest code of length L+1 is d * (d**(L+1) - 1) / (d - 1)
        top = d * (d ** (L + 1) - 1) // (d - 1) if d > 1 else L + 1
        if top > _INT64_MAX:
            return L
        L += 1


class StateSpace:
    """Common interface.

    Subclasses provide ``neighbors`` (the finite support of ``p_x``) and
    ``kernel_rows`` (the same, vectorized and padded, for the simulator).
    """

    kind = "abstract"
    root = ROOT
    transient_hint = True

    def neighbors(self, x: int) -> list[tuple[int, float]]:
        raise NotImplementedError

    def kernel_rows(self, sites: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Targets and probabilities of ``p_x`` for each site, shape ``(S, k)``.

        Padding entries carry probability 0.
        """
        raise NotImplementedError

    def sample_step(self, x: int, rng: np.random.Generator) -> int:
        nbrs = self.neighbors(x)
        u = rng.random()
        acc = 0.0
        for y, p in nbrs:
            acc += p
            if u < acc:
                return y
        return nbrs[-1][0]

    def format(self, x: int) -> str:
        raise NotImplementedError

    def parse(self, s: str) -> int:
        raise NotImplementedError

    def validate(self, x: int) -> None:
        if not isinstance(x, (int, np.integer)) or x < 0:
            raise StateSpaceError(f"malformed vertex handle {x!r} for {self.describe()}")

    def describe(self) -> str:
        return self.kind

    def same_space(self, other: "StateSpace") -> bool:
        return self.describe() == other.describe()


# ---------------------------------------------------------------------------
# trees and free groups


@dataclass(frozen=True, eq=False)
class WordTree(StateSpace):
    """Regular tree of words over ``d`` letters with an involution ``inv``.

    Parameters
    ----------
    d : int
        Alphabet size (= vertex degree).
    inverse : tuple of int
        ``inverse[l]`` is the letter cancelling ``l``.
    weights : tuple of float or None
        Group-invariant step law: ``p(x, x l) = weights[l]``.
    toward_root : float or None
        Radial law: probability ``toward_root`` to the parent, the rest
        split evenly among children; uniform at the root.  Exactly one of
        ``weights`` and ``toward_root`` is set.
    """

    d: int
    inverse: tuple[int, ...]
    weights: tuple[float, ...] | None = None
    toward_root: float | None = None
    exact_weights: tuple[Fraction, ...] | None = field(default=None, compare=False)
    kind: str = "tree"

    def __post_init__(self):
        if self.d < 2:
            raise StateSpaceError("degree must be at least 2")
        if (self.weights is None) == (self.toward_root is None):
            raise StateSpaceError("exactly one of weights / toward_root must be given")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if len(w) != self.d or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise StateSpaceError("letter weights must be a probability vector of length d")
        else:
            a = self.toward_root
            if not 0.0 <= a <= 1.0:
                raise StateSpaceError("toward_root must lie in [0, 1]")
        object.__setattr__(self, "_max_len", max_word_length(self.d))
        object.__setattr__(self, "_offsets", np.array(_length_offsets(self.d, self._max_len)[: self._max_len + 2], dtype=np.int64))
        inv = np.asarray(self.inverse, dtype=np.int64)
        object.__setattr__(self, "_inv", inv)

    # -- kernel classification

    @property
    def is_group_invariant(self) -> bool:
        return self.weights is not None or (self.toward_root is not None and abs(self.toward_root - 1.0 / self.d) < 1e-15)

    @property
    def is_radial(self) -> bool:
        """Kernel invariant under the stabiliser of the root (back prob constant)."""
        if self.toward_root is not None:
            return True
        w = np.asarray(self.weights)
        return bool(np.all(np.abs(w - 1.0 / self.d) < 1e-15))

    @property
    def back_probability(self) -> float:
        if self.toward_root is not None:
            return self.toward_root
        if self.is_radial:
            return 1.0 / self.d
        raise StateSpaceError("kernel is not radial")

    def letter_weights(self) -> np.ndarray:
        if self.weights is not None:
            return np.asarray(self.weights, dtype=float)
        if self.is_group_invariant:
            return np.full(self.d, 1.0 / self.d)
        raise StateSpaceError("kernel is not group invariant")

    @property
    def max_length(self) -> int:
        return self._max_len

    def describe(self) -> str:
        law = f"weights={self.weights}" if self.weights is not None else f"toward_root={self.toward_root}"
        return f"{self.kind}(d={self.d}, {law})"

    # -- word codes (scalar)

    def encode(self, letters: Sequence[int]) -> int:
        c = 0
        prev = None
        for l in letters:
            l = int(l)
            if not 0 <= l < self.d:
                raise StateSpaceError(f"letter {l} out of range for alphabet of size {self.d}")
            if prev is not None and self.inverse[prev] == l:
                raise StateSpaceError("word is not reduced")
            c = c * self.d + l + 1
            prev = l
        if len(letters) > self._max_len:
            raise StateSpaceError(f"word longer than {self._max_len} letters does not fit a 64-bit handle")
        return c

    def decode(self, x: int) -> list[int]:
        self.validate(x)
        out = []
        x = int(x)
        while x:
            x, r = divmod(x - 1, self.d)
            out.append(r)
        return out[::-1]

    def length(self, x: int) -> int:
        return int(np.searchsorted(self._offsets, int(x), side="right") - 1)

    def reduce(self, letters: Sequence[int]) -> list[int]:
        """Free reduction of an arbitrary letter string."""
        out: list[int] = []
        for l in letters:
            l = int(l)
            if out and self.inverse[out[-1]] == l:
                out.pop()
            else:
                out.append(l)
        return out

    def multiply(self, x: int, letter: int) -> int:
        if x != 0 and self.inverse[(int(x) - 1) % self.d] == letter:
            return (int(x) - 1) // self.d
        return int(x) * self.d + letter + 1

    def parent(self, x: int) -> int:
        if x == 0:
            raise StateSpaceError("the root has no parent")
        return (int(x) - 1) // self.d

    def last_letter(self, x: int) -> int:
        if x == 0:
            raise StateSpaceError("the root has no last letter")
        return (int(x) - 1) % self.d

    def prefix(self, x: int, n: int) -> int:
        for _ in range(self.length(x) - n):
            x = (int(x) - 1) // self.d
        return int(x)

    def validate(self, x: int) -> None:
        super().validate(x)
        if int(x) > _INT64_MAX:
            raise StateSpaceError("vertex handle overflows 64 bits")

    # -- word codes (vectorized)

    def lengths(self, codes: np.ndarray) -> np.ndarray:
        return np.searchsorted(self._offsets, codes, side="right") - 1

    def prefixes(self, codes: np.ndarray, n: int) -> np.ndarray:
        """First ``n`` letters of each word (the word itself when shorter)."""
        codes = np.asarray(codes, dtype=np.int64)
        L = self.lengths(codes)
        k = np.maximum(L - n, 0)
        # strip k trailing letters: (c - (d^k - 1)/(d - 1)) // d^k
        pw = np.power(np.int64(self.d), k.astype(np.int64))
        return (codes - self._offsets[k]) // pw

    # -- kernel

    def neighbors(self, x: int) -> list[tuple[int, float]]:
        self.validate(x)
        x = int(x)
        if self.length(x) >= self._max_len:
            raise StateSpaceError("vertex too deep: children overflow 64-bit handles")
        probs = self._letter_probs_scalar(x)
        return [(self.multiply(x, l), float(probs[l])) for l in range(self.d) if probs[l] > 0]

    def _letter_probs_scalar(self, x: int) -> np.ndarray:
        if self.weights is not None:
            return np.asarray(self.weights, dtype=float)
        if x == 0:
            return np.full(self.d, 1.0 / self.d)
        a = self.toward_root
        p = np.full(self.d, (1.0 - a) / (self.d - 1))
        p[self.inverse[self.last_letter(x)]] = a
        return p

    def kernel_rows(self, sites: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sites = np.asarray(sites, dtype=np.int64)
        S = sites.size
        d = self.d
        if S and self.lengths(sites[-1:])[0] >= self._max_len:
            raise StateSpaceError("population reached the maximal representable word length")
        letters = np.arange(d, dtype=np.int64)
        nonroot = sites > 0
        last = np.where(nonroot, (sites - 1) % d, -1)
        back = np.where(nonroot, self._inv[np.maximum(last, 0)], -1)
        is_back = (letters[None, :] == back[:, None]) & nonroot[:, None]
        parent = np.where(nonroot, (sites - 1) // d, 0)
        targets = np.where(is_back, parent[:, None], sites[:, None] * d + letters[None, :] + 1)
        if self.weights is not None:
            probs = np.broadcast_to(np.asarray(self.weights, dtype=float), (S, d)).copy()
        else:
            a = self.toward_root
            probs = np.where(is_back, a, (1.0 - a) / (d - 1))
            probs[~nonroot] = 1.0 / d
        return targets, probs

    # -- metric

    def distance(self, x: int, y: int) -> int:
        wx, wy = self.decode(x), self.decode(y)
        c = 0
        while c < min(len(wx), len(wy)) and wx[c] == wy[c]:
            c += 1
        return len(wx) + len(wy) - 2 * c

    # -- names

    def letter_name(self, l: int) -> str:
        return chr(ord("a") + l)

    def format(self, x: int) -> str:
        w = self.decode(x)
        return "".join(self.letter_name(l) for l in w) if w else _ROOT_NAME

    def parse(self, s: str) -> int:
        s = s.strip()
        if s in (_ROOT_NAME, "", "o", "e"):
            return 0
        letters = []
        for ch in s:
            letters.append(self._parse_letter(ch))
        return self.encode(letters)

    def _parse_letter(self, ch: str) -> int:
        l = ord(ch) - ord("a")
        if not 0 <= l < self.d:
            raise StateSpaceError(f"unknown letter {ch!r} for T_{self.d}")
        return l

    def ball(self, radius: int) -> np.ndarray:
        """All codes within ``radius`` of the root, in increasing order."""
        out = [0]
        frontier = [0]
        for _ in range(radius):
            nxt = []
            for x in frontier:
                for l in range(self.d):
                    y = self.multiply(x, l)
                    if y > x:
                        nxt.append(y)
            out.extend(nxt)
            frontier = nxt
        return np.array(sorted(out), dtype=np.int64)

    def sphere_size(self, n: int) -> int:
        return 1 if n == 0 else self.d * (self.d - 1) ** (n - 1)


def homogeneous_tree(degree: int, step_law="simple") -> WordTree:
    """T_d with a nearest-neighbour step law.

    ``step_law`` is ``"simple"``, a list of ``d`` letter weights, or
    ``{"toward_root": a}`` for the radial law.
    """
    inv = tuple(range(degree))
    weights, toward, exact = _parse_step_law(step_law, degree)
    return WordTree(degree, inv, weights, toward, exact, kind="tree")


@dataclass(frozen=True, eq=False)
class FreeGroup(WordTree):
    kind: str = "free_group"

    @property
    def rank(self) -> int:
        return self.d // 2

    def letter_name(self, l: int) -> str:
        g = chr(ord("a") + l // 2)
        return g if l % 2 == 0 else g.upper()

    def _parse_letter(self, ch: str) -> int:
        g = ord(ch.lower()) - ord("a")
        if not 0 <= g < self.d // 2:
            raise StateSpaceError(f"unknown generator {ch!r} for F_{self.d // 2}")
        return 2 * g + (1 if ch.isupper() else 0)

    def parse(self, s: str) -> int:
        # accept "ab^-1" / "ab⁻¹" besides "aB"
        s = s.replace("⁻¹", "^-1")
        letters: list[int] = []
        i = 0
        s = s.strip()
        if s in (_ROOT_NAME, "", "e"):
            return 0
        while i < len(s):
            l = self._parse_letter(s[i])
            i += 1
            if s.startswith("^-1", i):
                l ^= 1
                i += 3
            letters.append(l)
        return self.encode(self.reduce(letters))


def free_group(rank: int, step_law="simple") -> FreeGroup:
    d = 2 * rank
    inv = tuple(l ^ 1 for l in range(d))
    weights, toward, exact = _parse_step_law(step_law, d)
    return FreeGroup(d, inv, weights, toward, exact)


def _parse_step_law(step_law, d):
    if step_law == "simple" or step_law is None:
        return tuple([1.0 / d] * d), None, tuple([Fraction(1, d)] * d)
    if isinstance(step_law, dict):
        if "toward_root" not in step_law:
            raise StateSpaceError("radial step law needs a 'toward_root' probability")
        return None, float(step_law["toward_root"]), None
    w = [float(v) for v in step_law]
    if len(w) != d:
        raise StateSpaceError(f"step_law needs {d} weights, got {len(w)}")
    exact = None
    if all(isinstance(v, (int, Fraction)) or (isinstance(v, str)) for v in step_law):
        exact = tuple(Fraction(v) for v in step_law)
    return tuple(w), None, exact


# ---------------------------------------------------------------------------
# exact quotient of a radial tree walk


@dataclass(frozen=True, eq=False)
class DepthQuotient(StateSpace):
    """Lumping ``x -> (first D letters of x, |x|)`` of a radial tree walk.

    For kernels invariant under the root stabiliser this projection is
    itself a Markov chain, and a branching chain with position-independent
    offspring projects to a branching chain on the classes.  Everything
    measurable with respect to the classes (sizes, depth-``D`` cylinder
    functionals, occupation of vertices of depth ``<= D``) is then
    simulated exactly at a fraction of the cost.

    Handle of class ``(p, L)``: ``L * M + p`` with ``M`` the number of
    words of length ``<= D``.  For ``L <= D`` the class is the vertex ``p``.
    """

    tree: WordTree
    depth: int
    kind: str = "depth_quotient"

    def __post_init__(self):
        if not self.tree.is_radial:
            raise StateSpaceError("depth quotient requires a radial kernel")
        if self.depth < 0:
            raise StateSpaceError("quotient depth must be non-negative")
        M = int(self.tree._offsets[self.depth + 1])
        object.__setattr__(self, "_M", M)
        object.__setattr__(self, "_alpha", self.tree.back_probability)

    def describe(self) -> str:
        return f"{self.tree.describe()}/depth{self.depth}"

    @property
    def M(self) -> int:
        return self._M

    def project(self, codes) -> np.ndarray:
        """Class handles of tree vertices."""
        codes = np.asarray(codes, dtype=np.int64)
        L = self.tree.lengths(codes)
        return L * self._M + self.tree.prefixes(codes, self.depth)

    def lengths(self, h: np.ndarray) -> np.ndarray:
        return np.asarray(h, dtype=np.int64) // self._M

    def prefixes(self, h: np.ndarray, n: int) -> np.ndarray:
        if n > self.depth:
            raise StateSpaceError(f"quotient only resolves prefixes up to depth {self.depth}")
        p = np.asarray(h, dtype=np.int64) % self._M
        return self.tree.prefixes(p, n)

    def length(self, x: int) -> int:
        return int(x) // self._M

    def neighbors(self, x: int) -> list[tuple[int, float]]:
        t, p = self.kernel_rows(np.array([x], dtype=np.int64))
        return [(int(a), float(b)) for a, b in zip(t[0], p[0]) if b > 0]

    def _shallow_table(self):
        # kernel rows of the classes of depth <= D, indexed by prefix code
        tab = self.__dict__.get("_shallow")
        if tab is not None:
            return tab
        tree, D, M = self.tree, self.depth, self._M
        codes = np.arange(M, dtype=np.int64)
        ts, ps = tree.kernel_rows(codes)
        tl = tree.lengths(ts)
        handles = tl * M + np.where(tl > D, codes[:, None], ts)
        T = np.zeros_like(handles)
        P = np.zeros_like(ps)
        for i in range(M):
            acc: dict[int, float] = {}
            for t_, p_ in zip(handles[i].tolist(), ps[i].tolist()):
                acc[t_] = acc.get(t_, 0.0) + p_
            keys = sorted(acc)
            T[i, : len(keys)] = keys
            P[i, : len(keys)] = [acc[k] for k in keys]
        object.__setattr__(self, "_shallow", (T, P))
        return T, P

    def kernel_rows(self, sites: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sites = np.asarray(sites, dtype=np.int64)
        D, M, a = self.depth, self._M, self._alpha
        Tsh, Psh = self._shallow_table()
        L = sites // M
        p = sites % M
        shallow = L <= D
        targets = Tsh[p].copy()
        probs = Psh[p].copy()
        deep = ~shallow
        if np.any(deep):
            # deep classes: back to (p, L-1), forward to (p, L+1)
            targets[deep] = 0
            probs[deep] = 0.0
            targets[deep, 0] = (L[deep] - 1) * M + p[deep]
            probs[deep, 0] = a
            targets[deep, 1] = (L[deep] + 1) * M + p[deep]
            probs[deep, 1] = 1.0 - a
        return targets, probs

    def format(self, x: int) -> str:
        L, p = divmod(int(x), self._M)
        if L <= self.depth:
            return self.tree.format(p)
        return f"{self.tree.format(p)}*{L}"

    def parse(self, s: str) -> int:
        if "*" in s:
            w, L = s.split("*")
            return int(L) * self._M + self.tree.parse(w)
        v = self.tree.parse(s)
        if self.tree.length(v) > self.depth:
            raise StateSpaceError(f"{s!r} is deeper than the quotient depth {self.depth}")
        return self.tree.length(v) * self._M + v

    def vertex(self, x: int) -> int:
        """Tree vertex of a class of depth ``<= D``."""
        L, p = divmod(int(x), self._M)
        if L > self.depth:
            raise StateSpaceError("class below the quotient depth is not a single vertex")
        return p

    def distance(self, x, y):
        raise StateSpaceError("distance is not defined on a quotient space")


# ---------------------------------------------------------------------------
# explicit finite kernels


@dataclass(frozen=True, eq=False)
class ExplicitSpace(StateSpace):
    """Finite state space given by explicit kernel rows.

    ``rows[i]`` is a list of ``(j, p)`` pairs, kept exactly as configured.
    """

    states: tuple[str, ...]
    rows: tuple[tuple[tuple[int, float], ...], ...]
    kind: str = "explicit"

    def __post_init__(self):
        n = len(self.states)
        if n == 0:
            raise StateSpaceError("explicit space needs at least one state")
        if len(set(self.states)) != n:
            raise StateSpaceError("duplicate state names")
        if len(self.rows) != n:
            raise StateSpaceError("kernel needs one row per state")
        for i, row in enumerate(self.rows):
            tot = 0.0
            for j, p in row:
                if not 0 <= j < n:
                    raise StateSpaceError(f"row {self.states[i]!r} charges unknown state {j}")
                if not p > 0:
                    raise StateSpaceError(f"row {self.states[i]!r} has a non-positive entry")
                tot += p
            if abs(tot - 1.0) > 1e-12:
                raise StateSpaceError(f"row {self.states[i]!r} sums to {tot!r}, not 1")
        width = max(len(r) for r in self.rows)
        T = np.zeros((n, width), dtype=np.int64)
        P = np.zeros((n, width))
        for i, row in enumerate(self.rows):
            for k, (j, p) in enumerate(row):
                T[i, k] = j
                P[i, k] = p
        object.__setattr__(self, "_T", T)
        object.__setattr__(self, "_P", P)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.states)})

    @classmethod
    def from_matrix(cls, states: Sequence[str], matrix) -> "ExplicitSpace":
        rows = []
        for r in matrix:
            rows.append(tuple((j, float(p)) for j, p in enumerate(r) if float(p) > 0))
        return cls(tuple(states), tuple(rows))

    @classmethod
    def from_rows(cls, states: Sequence[str], rows: dict) -> "ExplicitSpace":
        idx = {s: i for i, s in enumerate(states)}
        out = []
        for s in states:
            if s not in rows:
                raise StateSpaceError(f"missing kernel row for state {s!r}")
            out.append(tuple((idx[t], float(p)) for t, p in rows[s]))
        return cls(tuple(states), tuple(out))

    @classmethod
    def singleton(cls) -> "ExplicitSpace":
        return cls(("*",), (((0, 1.0),),))

    @property
    def is_singleton(self) -> bool:
        return len(self.states) == 1

    def describe(self) -> str:
        return f"explicit(n={len(self.states)})"

    def validate(self, x: int) -> None:
        super().validate(x)
        if int(x) >= len(self.states):
            raise StateSpaceError(f"unknown state handle {x}")

    def neighbors(self, x: int) -> list[tuple[int, float]]:
        self.validate(x)
        return list(self.rows[int(x)])

    def kernel_rows(self, sites):
        sites = np.asarray(sites, dtype=np.int64)
        return self._T[sites], self._P[sites]

    def format(self, x: int) -> str:
        return self.states[int(x)]

    def parse(self, s: str) -> int:
        try:
            return self._index[s]
        except KeyError:
            raise StateSpaceError(f"unknown state {s!r}") from None

    def matrix(self) -> np.ndarray:
        n = len(self.states)
        P = np.zeros((n, n))
        for i, row in enumerate(self.rows):
            for j, p in row:
                P[i, j] += p
        return P

    def distance(self, x: int, y: int) -> int:
        self.validate(x)
        self.validate(y)
        seen = {int(x): 0}
        q = deque([int(x)])
        while q:
            u = q.popleft()
            if u == int(y):
                return seen[u]
            for v, _ in self.rows[u]:
                if v not in seen:
                    seen[v] = seen[u] + 1
                    q.append(v)
        raise StateSpaceError(f"{self.states[y]!r} is not reachable from {self.states[x]!r}")


# ---------------------------------------------------------------------------
# truncations


@dataclass
class TruncatedSpace:
    """Ball of radius ``D + D_buf`` around the root with an absorbing front.

    ``vertices`` is sorted; ``interior`` marks radius ``< D + D_buf``.
    ``P`` is the full sparse kernel on the ball with front rows zeroed;
    every interior row is a complete kernel row.
    """

    space: StateSpace
    radius: int
    vertices: np.ndarray
    dist: np.ndarray
    interior: np.ndarray
    P: sp.csr_matrix

    def index(self, x: int) -> int:
        i = int(np.searchsorted(self.vertices, x))
        if i >= self.vertices.size or self.vertices[i] != x:
            raise StateSpaceError(f"vertex {self.space.format(x)!r} outside the truncation")
        return i

    @property
    def front(self) -> np.ndarray:
        return ~self.interior

    def interior_matrix(self) -> sp.csr_matrix:
        I = np.nonzero(self.interior)[0]
        return self.P[I][:, I]

    def interior_to_front(self) -> sp.csr_matrix:
        I = np.nonzero(self.interior)[0]
        F = np.nonzero(~self.interior)[0]
        return self.P[I][:, F]

    def dense_interior(self) -> np.ndarray:
        return self.interior_matrix().toarray()


def truncate(space: StateSpace, D: int, D_buf: int = 1, max_vertices: int = 2_000_000) -> TruncatedSpace:
    if D < 1 or D_buf < 1:
        raise StateSpaceError("truncation needs D >= 1 and D_buf >= 1")
    R = D + D_buf
    if isinstance(space, WordTree):
        est = sum(space.sphere_size(k) for k in range(R + 1))
        if est > max_vertices:
            raise StateSpaceError(f"truncation of radius {R} has {est} vertices > bound {max_vertices}")
        verts = space.ball(R)
        dist = space.lengths(verts)
    elif isinstance(space, ExplicitSpace):
        seen = {space.root: 0}
        q = deque([space.root])
        while q:
            u = q.popleft()
            if seen[u] >= R:
                continue
            for v, _ in space.rows[u]:
                if v not in seen:
                    seen[v] = seen[u] + 1
                    q.append(v)
        verts = np.array(sorted(seen), dtype=np.int64)
        dist = np.array([seen[int(v)] for v in verts])
    else:
        raise StateSpaceError(f"cannot truncate a {space.kind} space")
    interior = dist < R
    n = verts.size
    rows, cols, vals = [], [], []
    I = np.nonzero(interior)[0]
    if I.size:
        T, Pr = space.kernel_rows(verts[I])
        pos = np.searchsorted(verts, T.ravel())
        pos = np.minimum(pos, n - 1)
        ok = (Pr.ravel() > 0)
        if np.any(verts[pos[ok]] != T.ravel()[ok]):
            raise StateSpaceError("kernel charges vertices outside the ball: not nearest-neighbour")
        rows = np.repeat(I, T.shape[1])[ok]
        cols = pos[ok]
        vals = Pr.ravel()[ok]
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return TruncatedSpace(space, R, verts, dist, interior, P)


def radial_chain(tree: WordTree, n_states: int) -> sp.csr_matrix:
    """Distance-from-root chain of a radial tree walk on ``0..n_states-1``.

    The last state is absorbing (its row is left empty).
    """
    a = tree.back_probability
    rows, cols, vals = [0], [1], [1.0]
    for k in range(1, n_states - 1):
        rows += [k, k]
        cols += [k - 1, k + 1]
        vals += [a, 1.0 - a]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_states, n_states))


# ---------------------------------------------------------------------------
# config


def space_from_config(block: dict) -> StateSpace:
    t = block.get("type")
    law = block.get("step_law", "simple")
    if t == "tree":
        return homogeneous_tree(int(block["degree"]), law)
    if t == "free_group":
        return free_group(int(block["rank"]), law)
    if t == "explicit":
        states = [str(s) for s in block["states"]]
        if "matrix" in block:
            return ExplicitSpace.from_matrix(states, block["matrix"])
        return ExplicitSpace.from_rows(states, {k: [tuple(e) for e in v] for k, v in block["rows"].items()})
    raise StateSpaceError(f"unknown state space type {t!r}")


def exact_probability(space: StateSpace, x: int, y: int) -> Fraction:
    """Exact rational transition probability (trees with rational laws)."""
    if not isinstance(space, WordTree) or space.exact_weights is None:
        raise StateSpaceError("exact-rational mode needs a tree with rational letter weights")
    for l in range(space.d):
        if space.multiply(x, l) == y:
            return space.exact_weights[l]
    return Fraction(0)


def log_ratio_steps(q: float, tol: float) -> int:
    """Smallest R with q**R < tol (q in (0, 1))."""
    return max(1, math.ceil(math.log(tol) / math.log(q)) + 1)
