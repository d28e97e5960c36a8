"""Finite metric spaces and real functions on them.

A :class:`MetricSpace` is an indexed registry of points with an exact pairwise
distance oracle.  Two modes exist:

* ``euclidean``: points are coordinate vectors in R^d, distances are computed on
  demand.  Spaces of this mode can be *extended* with new points; extension is
  copy-on-extend, so an extended space is a new object whose first ``n`` points
  are exactly the points of the original.  Measures living on the original
  remain valid on every extension.
* ``matrix``: an explicit symmetric distance table.  Fixed size.

Points are identified by index only.  Coordinates are never compared for
equality except by :meth:`MetricSpace.extend`, which merges images closer than
``merge_tol`` on purpose.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import DomainError, PreconditionError

MERGE_TOL = 1e-12
TRIANGLE_RTOL = 1e-9

_BLOCK = 512


class _Store:
    """Append-only point buffer shared by the versions of one euclidean space."""

    def __init__(self, coords, base=None):
        self.coords = coords
        self.n = coords.shape[0]
        self.base = base  # (parent store, number of inherited points) or None
        self.lock = threading.Lock()

    def append(self, new):
        need = self.n + new.shape[0]
        if need > self.coords.shape[0]:
            grown = np.empty((max(need, 2 * self.coords.shape[0], 16), self.coords.shape[1]))
            grown[: self.n] = self.coords[: self.n]
            self.coords = grown
        self.coords[self.n : need] = new
        self.n = need


class MetricSpace:
    """Finite metric space.  Build with :meth:`euclidean` or :meth:`from_matrix`."""

    __slots__ = ("mode", "dim", "n", "_store", "_matrix")

    def __init__(self, mode, n, store=None, matrix=None, dim=None):
        self.mode = mode
        self.n = n
        self.dim = dim
        self._store = store
        self._matrix = matrix

    # -- construction -------------------------------------------------------------

    @classmethod
    def euclidean(cls, points) -> MetricSpace:
        pts = np.array(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[1] < 1:
            raise DomainError(f"euclidean points must form an (n, d) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DomainError("euclidean points must be finite")
        return cls("euclidean", pts.shape[0], store=_Store(pts.copy()), dim=pts.shape[1])

    @classmethod
    def from_matrix(cls, dist, validate: bool = True) -> MetricSpace:
        d = np.array(dist, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise DomainError(f"distance matrix must be square, got shape {d.shape}")
        d.setflags(write=False)
        space = cls("matrix", d.shape[0], matrix=d)
        if validate:
            problems = validate_space(space)
            if problems:
                raise DomainError("invalid distance matrix: " + "; ".join(problems[:5]))
        return space

    # -- access ---------------------------------------------------------------------

    def __len__(self):
        return self.n

    def __repr__(self):
        if self.mode == "euclidean":
            return f"MetricSpace(euclidean, dim={self.dim}, n={self.n})"
        return f"MetricSpace(matrix, n={self.n})"

    @property
    def coords(self) -> np.ndarray:
        if self.mode != "euclidean":
            raise DomainError("matrix-mode spaces have no coordinates")
        view = self._store.coords[: self.n]
        view.setflags(write=False)
        return view

    @property
    def matrix(self) -> np.ndarray:
        if self.mode != "matrix":
            raise DomainError("euclidean spaces have no materialized matrix")
        return self._matrix

    def check_index(self, i) -> int:
        if isinstance(i, (bool, np.bool_)) or not isinstance(i, (int, np.integer)):
            raise DomainError(f"point index must be an integer, got {i!r}")
        if not 0 <= i < self.n:
            raise DomainError(f"point index {i} out of range for space of {self.n} points")
        return int(i)

    def check_indices(self, idx) -> np.ndarray:
        arr = np.asarray(idx)
        if arr.size == 0:
            return arr.astype(np.intp).reshape(-1)
        if not np.issubdtype(arr.dtype, np.integer):
            raise DomainError("point indices must be integers")
        arr = arr.astype(np.intp).reshape(-1)
        if arr.min() < 0 or arr.max() >= self.n:
            raise DomainError(f"point index out of range for space of {self.n} points")
        return arr

    def dist(self, i, j) -> float:
        i, j = self.check_index(i), self.check_index(j)
        if self.mode == "matrix":
            return float(self._matrix[i, j])
        c = self._store.coords
        if self.dim == 1:
            return abs(float(c[i, 0]) - float(c[j, 0]))
        return math.dist(c[i], c[j])

    def pairwise(self, rows, cols) -> np.ndarray:
        """Distance table between two index lists."""
        rows, cols = self.check_indices(rows), self.check_indices(cols)
        if self.mode == "matrix":
            return self._matrix[np.ix_(rows, cols)]
        c = self._store.coords
        if self.dim == 1:
            return np.abs(c[rows, 0][:, None] - c[cols, 0][None, :])
        return cdist(c[rows], c[cols])

    def distances_from(self, a) -> np.ndarray:
        return self.pairwise([a], np.arange(self.n))[0]

    def diameter(self, points=None) -> float:
        pts = np.arange(self.n) if points is None else self.check_indices(points)
        best = 0.0
        for start in range(0, len(pts), _BLOCK):
            block = self.pairwise(pts[start : start + _BLOCK], pts)
            if block.size:
                best = max(best, float(block.max()))
        return best

    # -- lineage ------------------------------------------------------------------------

    def _inherited(self, store) -> int:
        s, m = self._store, self.n
        while s is not store:
            if s.base is None:
                return -1
            s, m = s.base[0], min(m, s.base[1])
        return m

    def extends(self, other: MetricSpace) -> bool:
        """True when every point of ``other`` is, with the same index, a point of ``self``."""
        if other is self:
            return True
        if self.mode != other.mode:
            return False
        if self.mode == "matrix":
            return self._matrix is other._matrix
        return other.n <= self._inherited(other._store)

    def extend(self, points, merge_tol: float = MERGE_TOL):
        """Return ``(space, indices)`` where ``space`` contains ``points``.

        Points within ``merge_tol`` of an existing point (or of an earlier new
        point) are identified with it instead of being appended.  ``self`` is
        never modified.
        """
        if self.mode != "euclidean":
            raise DomainError("matrix-mode spaces cannot be extended with new points")
        pts = np.array(points, dtype=float)
        if pts.ndim == 1 and self.dim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[1] != self.dim:
            raise DomainError(f"points of shape {pts.shape} do not fit dimension {self.dim}")
        if not np.all(np.isfinite(pts)):
            raise DomainError("image points must be finite")
        k = pts.shape[0]
        out = np.full(k, -1, dtype=np.intp)
        if k == 0:
            return self, out
        existing = self._store.coords[: self.n]
        if self.n:
            dd, ii = cKDTree(existing).query(pts, k=1)
            hit = dd <= merge_tol
            out[hit] = ii[hit]
        fresh = np.flatnonzero(out < 0)
        if fresh.size == 0:
            return self, out

        # group the remaining new points: exact duplicates first, then near ones
        first = {}
        owner = np.empty(fresh.size, dtype=np.intp)
        for pos, r in enumerate(fresh):
            owner[pos] = first.setdefault(pts[r].tobytes(), pos)
        reps = np.unique(owner)
        if merge_tol > 0 and reps.size > 1:
            parent = {int(r): int(r) for r in reps}

            def root(x):
                while parent[x] != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x

            for a, b in cKDTree(pts[fresh[reps]]).query_pairs(merge_tol):
                ra, rb = root(int(reps[a])), root(int(reps[b]))
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
            owner = np.array([root(int(o)) for o in owner], dtype=np.intp)
            reps = np.unique(owner)
        new_index = {int(r): self.n + t for t, r in enumerate(reps)}
        out[fresh] = [new_index[int(o)] for o in owner]
        new_pts = pts[fresh[reps]]

        store = self._store
        with store.lock:
            if store.n == self.n:
                store.append(new_pts)
            else:
                store = _Store(np.concatenate([store.coords[: self.n], new_pts]), base=(store, self.n))
        return MetricSpace("euclidean", self.n + len(reps), store=store, dim=self.dim), out

    def locate(self, x, tol: float = MERGE_TOL) -> int | None:
        """Index of the point nearest to coordinates ``x`` if within ``tol``, else None."""
        if self.mode != "euclidean":
            raise DomainError("matrix-mode spaces have no coordinates")
        x = np.asarray(x, dtype=float).reshape(1, -1)
        if x.shape[1] != self.dim:
            raise DomainError(f"coordinates of dimension {x.shape[1]} in a space of dimension {self.dim}")
        d = cdist(x, self.coords)[0]
        best = int(np.argmin(d))
        return best if d[best] <= tol else None

    def restrict(self, points) -> MetricSpace:
        """Fresh space holding only ``points`` (re-indexed 0..k-1, no lineage)."""
        pts = self.check_indices(points)
        if self.mode == "euclidean":
            return MetricSpace.euclidean(self.coords[pts])
        return MetricSpace.from_matrix(self._matrix[np.ix_(pts, pts)], validate=False)


def common_space(*spaces: MetricSpace) -> MetricSpace:
    """The largest of ``spaces`` if it extends all others, else DomainError."""
    best = max(spaces, key=lambda s: s.n)
    for s in spaces:
        if not best.extends(s):
            raise DomainError("objects live on unrelated metric spaces")
    return best


def validate_space(space: MetricSpace, rtol: float = TRIANGLE_RTOL, limit: int = 20) -> list[str]:
    """List the violated metric axioms (empty list means valid)."""
    if space.mode == "euclidean":
        return []
    d = space.matrix
    n = d.shape[0]
    problems = []
    if not np.all(np.isfinite(d)):
        problems.append("non-finite distances")
        return problems
    for i in np.flatnonzero(np.diag(d) != 0)[:limit]:
        problems.append(f"dist({i},{i}) = {d[i, i]!r} != 0")
    for i, j in np.argwhere(np.triu(d != d.T, 1))[:limit]:
        problems.append(f"asymmetric: dist({i},{j}) = {d[i, j]!r}, dist({j},{i}) = {d[j, i]!r}")
    off = ~np.eye(n, dtype=bool)
    for i, j in np.argwhere(off & (d <= 0))[:limit]:
        problems.append(f"dist({i},{j}) = {d[i, j]!r} is not positive")
    for j in range(n):
        via = d[:, j][:, None] + d[j, :][None, :]
        bad = np.argwhere(d > via * (1 + rtol))
        for i, k in bad:
            if len(problems) >= limit:
                return problems
            problems.append(
                f"triangle: dist({i},{k}) = {d[i, k]!r} > dist({i},{j}) + dist({j},{k}) = {via[i, k]!r}"
            )
    return problems


@dataclass(frozen=True, eq=False)
class LipFunction:
    """Real function on point indices with a declared Lipschitz bound.

    ``values[i]`` is the value at point ``i``; NaN (or an index past the end)
    means undefined there.
    """

    values: np.ndarray
    lip_bound: float = math.inf

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if not self.lip_bound >= 0:
            raise DomainError(f"lip_bound must be nonnegative, got {self.lip_bound}")
        object.__setattr__(self, "lip_bound", float(self.lip_bound))

    @classmethod
    def from_mapping(cls, mapping: Mapping[int, float], n: int, lip_bound: float = math.inf):
        vals = np.full(n, np.nan)
        for i, v in mapping.items():
            if not 0 <= i < n:
                raise DomainError(f"point index {i} out of range for {n} points")
            vals[i] = v
        return cls(vals, lip_bound)

    def __call__(self, i) -> float:
        return float(self.at([i])[0])

    def at(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.intp).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.values.size):
            raise DomainError("function undefined at some requested point")
        out = self.values[idx]
        if np.isnan(out).any():
            bad = idx[np.isnan(out)][0]
            raise DomainError(f"function undefined at point {bad}")
        return out

    @property
    def domain(self) -> np.ndarray:
        return np.flatnonzero(~np.isnan(self.values))

    def as_mapping(self) -> dict[int, float]:
        return {int(i): float(self.values[i]) for i in self.domain}


def _points(space, points):
    return np.arange(space.n) if points is None else space.check_indices(points)


def lip_witness(f: LipFunction, space: MetricSpace, points=None) -> tuple[float, int, int]:
    """``(alpha, i, j)`` with alpha the exact Lipschitz quotient maximum and (i, j) attaining it.

    For a single point the result is ``(0.0, i, i)``.
    """
    pts = _points(space, points)
    if pts.size == 0:
        raise DomainError("empty point set")
    vals = f.at(pts)
    best = (0.0, int(pts[0]), int(pts[0]))
    for start in range(0, pts.size, _BLOCK):
        rows = slice(start, start + _BLOCK)
        d = space.pairwise(pts[rows], pts)
        diff = np.abs(vals[rows][:, None] - vals[None, :])
        q = np.divide(diff, d, out=np.zeros_like(diff), where=d > 0)
        r, c = np.unravel_index(np.argmax(q), q.shape)
        if q[r, c] > best[0]:
            best = (float(q[r, c]), int(pts[start + r]), int(pts[c]))
    return best


def lip_constant(f: LipFunction, space: MetricSpace, points=None) -> float:
    """max |f(i) - f(j)| / dist(i, j) over distinct points (0 for one point)."""
    return lip_witness(f, space, points)[0]


def lipschitz_excess(f: LipFunction, space: MetricSpace, bound: float = 1.0, points=None) -> float:
    """max over pairs of |f(i) - f(j)| - bound * dist(i, j); <= 0 iff f is bound-Lipschitz."""
    pts = _points(space, points)
    vals = f.at(pts)
    worst = 0.0
    for start in range(0, pts.size, _BLOCK):
        rows = slice(start, start + _BLOCK)
        d = space.pairwise(pts[rows], pts)
        worst = max(worst, float((np.abs(vals[rows][:, None] - vals[None, :]) - bound * d).max()))
    return worst


def distance_function(space: MetricSpace, a: int) -> LipFunction:
    """The 1-Lipschitz function x -> dist(a, x)."""
    return LipFunction(space.distances_from(space.check_index(a)), 1.0)


def envelope(f: LipFunction, n: float, space: MetricSpace) -> LipFunction:
    """Least n-Lipschitz majorant: x -> max_t f(t) - n * dist(x, t)."""
    if not n > 0:
        raise DomainError(f"envelope slope must be positive, got {n}")
    pts = np.arange(space.n)
    vals = f.at(pts)
    out = np.empty(space.n)
    for start in range(0, space.n, _BLOCK):
        rows = pts[start : start + _BLOCK]
        out[rows] = (vals[None, :] - n * space.pairwise(rows, pts)).max(axis=1)
    return LipFunction(out, float(n))


def mcshane_extend(
    partial: Mapping[int, float], space: MetricSpace, points=None, tol: float = 1e-9
) -> LipFunction:
    """Largest 1-Lipschitz extension x -> min_a partial(a) + dist(x, a).

    ``partial`` must be 1-Lipschitz on its domain (up to ``tol`` relative to
    ``max(1, dist)``); the offending pair is reported otherwise.  The result is
    evaluated on ``points`` (default: the whole space) plus the domain itself,
    and equals ``partial`` exactly there.
    """
    if not partial:
        raise PreconditionError("partial function must be defined on a nonempty set")
    keys = space.check_indices(sorted(partial))
    vals = np.array([partial[int(k)] for k in keys], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise DomainError("partial function values must be finite")
    for start in range(0, keys.size, _BLOCK):
        rows = slice(start, start + _BLOCK)
        d = space.pairwise(keys[rows], keys)
        excess = np.abs(vals[rows][:, None] - vals[None, :]) - d - tol * np.maximum(1.0, d)
        if excess.max() > 0:
            r, c = np.unravel_index(np.argmax(excess), excess.shape)
            i, j = int(keys[start + r]), int(keys[c])
            raise PreconditionError(
                f"partial function is not 1-Lipschitz: |f({i}) - f({j})| = "
                f"{abs(vals[start + r] - vals[c])!r} > dist = {d[r, c]!r}"
            )
    pts = _points(space, points)
    out = np.full(space.n, np.nan)
    for start in range(0, pts.size, _BLOCK):
        rows = pts[start : start + _BLOCK]
        out[rows] = (vals[None, :] + space.pairwise(rows, keys)).min(axis=1)
    out[keys] = vals
    return LipFunction(out, 1.0)


# -- JSON ---------------------------------------------------------------------------------


def space_to_json(space: MetricSpace) -> dict:
    if space.mode == "euclidean":
        return {"mode": "euclidean", "points": space.coords.tolist()}
    return {"mode": "matrix", "n": space.n, "dist": space.matrix.tolist()}


def space_from_json(obj: Mapping) -> MetricSpace:
    if not isinstance(obj, Mapping):
        raise DomainError("space descriptor must be a JSON object")
    mode = obj.get("mode")
    if mode == "euclidean":
        if "points" not in obj:
            raise DomainError("space descriptor: missing field 'points'")
        pts = obj["points"]
        if not isinstance(pts, Sequence) or not pts:
            raise DomainError("space descriptor: 'points' must be a nonempty list")
        lens = {len(p) if isinstance(p, Sequence) else -1 for p in pts}
        if len(lens) != 1 or lens == {-1}:
            raise DomainError("space descriptor: every point must be a list of equal length")
        return MetricSpace.euclidean(pts)
    if mode == "matrix":
        if "dist" not in obj:
            raise DomainError("space descriptor: missing field 'dist'")
        space = MetricSpace.from_matrix(obj["dist"])
        if "n" in obj and obj["n"] != space.n:
            raise DomainError(f"space descriptor: 'n' = {obj['n']} but matrix has {space.n} rows")
        return space
    raise DomainError(f"space descriptor: unknown mode {mode!r} (expected 'euclidean' or 'matrix')")
