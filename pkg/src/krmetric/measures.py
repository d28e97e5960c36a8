"""Finitely supported measures over a :class:`~krmetric.metric_core.MetricSpace`."""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DomainError, PreconditionError
from .metric_core import (
    MERGE_TOL,
    LipFunction,
    MetricSpace,
    common_space,
    distance_function,
    space_from_json,
    space_to_json,
)

MASS_TOL = 1e-12


class DiscreteMeasure:
    """Nonnegative weighted atoms on distinct points of a metric space.

    Atoms are kept sorted by point index; zero weights are dropped and
    repeated indices are summed.  Instances are immutable.
    """

    __slots__ = ("space", "indices", "weights", "mass")

    def __init__(self, space: MetricSpace, indices, weights):
        idx = space.check_indices(indices)
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape != idx.shape:
            raise DomainError(f"{idx.size} atom indices but {w.size} weights")
        if not np.all(np.isfinite(w)) or (w < 0).any():
            raise DomainError("atom weights must be finite and nonnegative")
        keep = w > 0
        idx, w = idx[keep], w[keep]
        uniq, inv = np.unique(idx, return_inverse=True)
        if uniq.size != idx.size:
            summed = np.zeros(uniq.size)
            np.add.at(summed, inv, w)
            w = summed
        else:
            w = w[np.argsort(idx, kind="stable")]
        uniq.setflags(write=False)
        w.setflags(write=False)
        self.space = space
        self.indices = uniq
        self.weights = w
        self.mass = math.fsum(w)

    @classmethod
    def from_atoms(cls, space: MetricSpace, atoms: Iterable[tuple[int, float]]):
        atoms = list(atoms)
        return cls(space, [a for a, _ in atoms], [w for _, w in atoms])

    def __repr__(self):
        return f"DiscreteMeasure({len(self)} atoms, mass={self.mass!r})"

    def __len__(self):
        return self.indices.size

    @property
    def atoms(self) -> list[tuple[int, float]]:
        return [(int(i), float(w)) for i, w in zip(self.indices, self.weights)]

    @property
    def is_probability(self) -> bool:
        return abs(self.mass - 1.0) <= MASS_TOL

    def on(self, space: MetricSpace) -> DiscreteMeasure:
        """The same measure viewed on an extension of its space."""
        if space is self.space:
            return self
        if not space.extends(self.space):
            raise DomainError("target space does not extend the measure's space")
        return DiscreteMeasure(space, self.indices, self.weights)

    def normalized(self) -> DiscreteMeasure:
        if self.mass <= 0:
            raise DomainError("cannot normalize the zero measure")
        return DiscreteMeasure(self.space, self.indices, self.weights / self.mass)

    def same_as(self, other: DiscreteMeasure, atol: float = 0.0) -> bool:
        """Equal atom sets and weights (within ``atol``) on compatible spaces."""
        common_space(self.space, other.space)
        return np.array_equal(self.indices, other.indices) and bool(
            np.all(np.abs(self.weights - other.weights) <= atol)
        )

    def compact(self) -> DiscreteMeasure:
        """Copy of the measure on a fresh space holding only its atoms."""
        return DiscreteMeasure(self.space.restrict(self.indices), np.arange(len(self)), self.weights)

    def mass_where(self, mask_over_space: np.ndarray) -> float:
        return math.fsum(self.weights[np.asarray(mask_over_space)[self.indices]])


def dirac(x: int, space: MetricSpace) -> DiscreteMeasure:
    return DiscreteMeasure(space, [space.check_index(x)], [1.0])


def integrate(mu: DiscreteMeasure, f) -> float:
    """sum over atoms of weight * f(point); ``f`` is a LipFunction or a value array."""
    values = f.values if isinstance(f, LipFunction) else np.asarray(f, dtype=float)
    if mu.indices.size and mu.indices.max() >= values.size:
        raise DomainError(f"function undefined at atom {int(mu.indices.max())}")
    vals = values[mu.indices]
    if np.isnan(vals).any():
        raise DomainError(f"function undefined at atom {int(mu.indices[np.isnan(vals)][0])}")
    return math.fsum(mu.weights * vals)


def first_moment(mu: DiscreteMeasure, a: int) -> float:
    """Integral of x -> dist(a, x); finite moments characterize membership in M(X)."""
    if len(mu) == 0:
        raise DomainError("first moment of the empty measure")
    return integrate(mu, distance_function(mu.space, a))


def pushforward(mu: DiscreteMeasure, mapping, merge_tol: float = MERGE_TOL) -> DiscreteMeasure:
    """Image measure under ``mapping``; colliding images have their weights summed.

    On a euclidean space ``mapping`` takes a ``(k, d)`` coordinate array to a
    ``(k, d)`` array of images, which are registered in (an extension of) the
    space.  On a matrix space ``mapping`` sends point indices to point indices
    (a callable or a mapping).
    """
    space = mu.space
    if space.mode == "euclidean":
        if not callable(mapping):
            raise DomainError("euclidean pushforward needs a callable on coordinates")
        images = np.asarray(mapping(space.coords[mu.indices]), dtype=float)
        if images.ndim == 1 and space.dim == 1:
            images = images.reshape(-1, 1)
        if images.shape != (len(mu), space.dim):
            raise DomainError(f"map produced images of shape {images.shape}, expected {(len(mu), space.dim)}")
        space, idx = space.extend(images, merge_tol)
    else:
        lookup = mapping.__getitem__ if isinstance(mapping, Mapping) else mapping
        try:
            idx = [lookup(int(i)) for i in mu.indices]
        except (KeyError, IndexError) as exc:
            raise DomainError(f"index map undefined at an atom: {exc}") from None
    return DiscreteMeasure(space, idx, mu.weights)


def mixture(components: Iterable[tuple[float, DiscreteMeasure]]) -> DiscreteMeasure:
    """sum_i p_i mu_i, merging atoms on the same point."""
    components = list(components)
    if not components:
        raise DomainError("mixture of no components")
    space = common_space(*(mu.space for _, mu in components))
    idx, w = [], []
    for p, mu in components:
        if not (math.isfinite(p) and p >= 0):
            raise DomainError(f"mixture coefficient must be finite and nonnegative, got {p}")
        idx.append(mu.indices)
        w.append(p * mu.weights)
    return DiscreteMeasure(space, np.concatenate(idx), np.concatenate(w))


def coarsen(mu: DiscreteMeasure, cap: int) -> tuple[DiscreteMeasure, float]:
    """Reduce ``mu`` to at most ``cap`` atoms; return it with a bound on the H-distance moved.

    Representatives are chosen by greedy farthest-point selection, starting at
    the heaviest atom (lowest index on ties); every atom is then moved to its
    nearest representative.  Moving weight w over distance r costs w * r, and
    the sum of those costs bounds the transport distance between input and
    output.
    """
    if not isinstance(cap, (int, np.integer)) or cap < 1:
        raise DomainError(f"cap must be a positive integer, got {cap!r}")
    k = len(mu)
    if k <= cap:
        return mu, 0.0
    space, idx, w = mu.space, mu.indices, mu.weights
    chosen = [int(np.argmax(w))]
    nearest = space.pairwise(idx[chosen], idx)[0]
    owner = np.zeros(k, dtype=np.intp)
    for r in range(1, cap):
        far = int(np.argmax(nearest))
        chosen.append(far)
        d = space.pairwise([idx[far]], idx)[0]
        closer = d < nearest
        owner[closer] = r
        nearest = np.where(closer, d, nearest)
    bound = math.fsum(w * nearest)
    merged = np.zeros(cap)
    np.add.at(merged, owner, w)
    return DiscreteMeasure(space, idx[chosen], merged), bound


def require_probability(mu: DiscreteMeasure, what: str = "measure"):
    if not mu.is_probability:
        raise PreconditionError(f"{what} must have mass 1 (got {mu.mass!r})")


# -- JSON ---------------------------------------------------------------------------------


def measure_to_json(mu: DiscreteMeasure, space_ref=None) -> dict:
    return {
        "space": space_to_json(mu.space) if space_ref is None else space_ref,
        "atoms": [[i, w] for i, w in mu.atoms],
    }


def measure_from_json(obj: Mapping, resolve_space: Callable[[object], MetricSpace] | None = None):
    """Parse ``{"space": <descriptor or reference>, "atoms": [[index, weight], ...]}``.

    ``resolve_space`` turns a non-object ``space`` entry (e.g. a file name) into
    a space; an already built :class:`MetricSpace` is used as is.
    """
    if not isinstance(obj, Mapping):
        raise DomainError("measure descriptor must be a JSON object")
    for field in ("space", "atoms"):
        if field not in obj:
            raise DomainError(f"measure descriptor: missing field {field!r}")
    ref = obj["space"]
    if isinstance(ref, MetricSpace):
        space = ref
    elif isinstance(ref, Mapping):
        space = space_from_json(ref)
    elif resolve_space is not None:
        space = resolve_space(ref)
    else:
        raise DomainError(f"measure descriptor: cannot resolve space reference {ref!r}")
    atoms = obj["atoms"]
    if not isinstance(atoms, list):
        raise DomainError("measure descriptor: 'atoms' must be a list")
    for pos, atom in enumerate(atoms):
        if not (isinstance(atom, (list, tuple)) and len(atom) == 2 and isinstance(atom[0], int)):
            raise DomainError(f"measure descriptor: atoms[{pos}] must be [index, weight]")
    return DiscreteMeasure.from_atoms(space, atoms)
