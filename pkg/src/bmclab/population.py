"""Finite populations: non-negative integer multisets over a state space."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Mapping

import numpy as np

from .state_space import StateSpace, StateSpaceError


class PopulationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Population:
    """Sparse multiset ``m`` with sorted integer handles.

    ``sites`` is strictly increasing, ``counts`` strictly positive; both are
    ``int64``.  Instances are treated as values (arrays are not mutated).
    """

    space: StateSpace
    sites: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sites, dtype=np.int64)
        c = np.asarray(self.counts, dtype=np.int64)
        if s.shape != c.shape or s.ndim != 1:
            raise PopulationError("sites and counts must be 1-d arrays of equal length")
        if c.size and c.min() <= 0:
            raise PopulationError("counts must be positive (zero-count sites are dropped)")
        if s.size > 1 and np.any(np.diff(s) <= 0):
            raise PopulationError("sites must be strictly increasing")
        object.__setattr__(self, "sites", s)
        object.__setattr__(self, "counts", c)

    # -- constructors

    @classmethod
    def from_counts(cls, space: StateSpace, items: Mapping[int, int] | Iterable[tuple[int, int]]) -> "Population":
        pairs = items.items() if isinstance(items, Mapping) else items
        acc: dict[int, int] = {}
        for x, k in pairs:
            space.validate(x)
            if k < 0:
                raise PopulationError("negative multiplicity")
            if k:
                acc[int(x)] = acc.get(int(x), 0) + int(k)
        keys = sorted(acc)
        return cls(space, np.array(keys, dtype=np.int64), np.array([acc[k] for k in keys], dtype=np.int64))

    @classmethod
    def from_arrays(cls, space: StateSpace, sites, counts) -> "Population":
        """Aggregate unsorted, possibly repeated sites."""
        sites = np.asarray(sites, dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        keep = counts > 0
        u, inv = np.unique(sites[keep], return_inverse=True)
        tot = np.zeros(u.size, dtype=np.int64)
        np.add.at(tot, inv, counts[keep])
        return cls(space, u, tot)

    @classmethod
    def delta(cls, space: StateSpace, x: int, k: int = 1) -> "Population":
        return cls.from_counts(space, {x: k})

    @classmethod
    def empty(cls, space: StateSpace) -> "Population":
        return cls(space, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    # -- basic accessors

    @property
    def size(self) -> int:
        """``||m||``."""
        return int(self.counts.sum())

    def __len__(self) -> int:
        return int(self.sites.size)

    def __getitem__(self, x: int) -> int:
        i = np.searchsorted(self.sites, x)
        if i < self.sites.size and self.sites[i] == x:
            return int(self.counts[i])
        return 0

    def items(self):
        return zip(self.sites.tolist(), self.counts.tolist())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Population)
            and np.array_equal(self.sites, other.sites)
            and np.array_equal(self.counts, other.counts)
        )

    def __hash__(self):
        return hash((self.sites.tobytes(), self.counts.tobytes()))

    def __repr__(self) -> str:
        body = " + ".join(f"{k}*{self.space.format(x)}" for x, k in list(self.items())[:8])
        more = " + ..." if len(self) > 8 else ""
        return f"Population({body or '0'}{more})"

    # -- operations

    def empirical(self, exact: bool = False):
        """Empirical distribution ``m / ||m||`` as ``{handle: mass}``."""
        n = self.size
        if n == 0:
            raise PopulationError("empirical distribution of the empty population")
        if exact:
            return {x: Fraction(k, n) for x, k in self.items()}
        return {x: k / n for x, k in self.items()}

    def lift(self, f: Callable[[int], float] | Mapping[int, float] | None = None) -> float:
        """``<m, f> = sum_x m(x) f(x)``; ``f=None`` is the constant 1."""
        if f is None:
            return float(self.size)
        if isinstance(f, Mapping):
            try:
                vals = [f[x] for x in self.sites.tolist()]
            except KeyError as e:
                raise PopulationError(f"test function undefined at {self.space.format(e.args[0])!r}") from None
        else:
            vals = [f(x) for x in self.sites.tolist()]
        return float(np.dot(self.counts.astype(float), np.asarray(vals, dtype=float)))

    def lift_vec(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        """Vectorized lift for array-valued ``f``."""
        return float(np.dot(self.counts.astype(float), f(self.sites)))

    def merge(self, other: "Population") -> "Population":
        if not self.space.same_space(other.space):
            raise PopulationError("cannot merge populations on different state spaces")
        return Population.from_arrays(
            self.space, np.concatenate([self.sites, other.sites]), np.concatenate([self.counts, other.counts])
        )

    __add__ = merge

    def scaled(self, k: int) -> "Population":
        if k <= 0:
            raise PopulationError("scale must be positive")
        return Population(self.space, self.sites, self.counts * k)

    # -- io

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["vertex", "count"])
        for x, k in self.items():
            w.writerow([self.space.format(x), k])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, space: StateSpace, text: str) -> "Population":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.strip() for c in rows[0]] != ["vertex", "count"]:
            raise PopulationError("population CSV needs the header 'vertex,count'")
        items = []
        for r in rows[1:]:
            if not r:
                continue
            try:
                items.append((space.parse(r[0]), int(r[1])))
            except (StateSpaceError, ValueError) as e:
                raise PopulationError(f"bad population row {r!r}: {e}") from None
        return cls.from_counts(space, items)

    @classmethod
    def from_spec(cls, space: StateSpace, spec) -> "Population":
        """Config form: ``{"vertex": count, ...}`` or ``[[vertex, count], ...]``."""
        items = spec.items() if isinstance(spec, Mapping) else spec
        return cls.from_counts(space, [(space.parse(str(v)), int(k)) for v, k in items])
