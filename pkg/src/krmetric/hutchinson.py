"""Contraction systems, the Markov operator nu -> sum_i p_i S_i#nu, and its invariant measure.

For a system with Lipschitz constants s_i and probabilities p_i the operator is
a contraction in H with modulus c = sum_i p_i s_i.  Iterating it from any start
converges to the unique invariant measure, and after each step

    H(nu_n, nu*) <= (c * H(nu_{n-1}, nu_n) + e_n) / (1 - c)

where e_n bounds the distance moved by coarsening at step n.  This is the
a-posteriori bound reported by :func:`iterate_invariant`.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, PreconditionError
from .measures import DiscreteMeasure, coarsen, dirac, mixture, pushforward, require_probability
from .metric_core import MetricSpace
from .transport import kr_distance

log = logging.getLogger(__name__)

PROB_TOL = 1e-12
LIP_MARGIN = 1e-12
STEP_LIMIT = 10_000
DEFAULT_CAP = 4096


class ContractionMap:
    """Contraction of R^d with a declared Lipschitz constant ``lip < 1``.

    Use :meth:`affine`, :meth:`similarity` or :meth:`from_function`.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], lip: float, fixed_point, kind: str = "function", **params):
        if not 0 <= lip < 1:
            raise DomainError(f"contraction constant must lie in [0, 1), got {lip}")
        self.fn = fn
        self.lip = float(lip)
        self.kind = kind
        self.params = params
        self.fixed_point = np.asarray(fixed_point, dtype=float).reshape(-1)
        self.dim = self.fixed_point.size
        residual = float(np.linalg.norm(self(self.fixed_point[None, :])[0] - self.fixed_point))
        if residual > 1e-9:
            raise DomainError(f"supplied fixed point is moved by {residual!r}")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.asarray(self.fn(x.reshape(-1, self.dim)), dtype=float).reshape(-1, self.dim)

    def __repr__(self):
        return f"ContractionMap({self.kind}, lip={self.lip}, fixed_point={self.fixed_point.tolist()})"

    @classmethod
    def affine(cls, A, b, lip: float | None = None) -> ContractionMap:
        """x -> A x + b; ``lip`` defaults to the spectral norm of A."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float).reshape(-1)
        d = b.size
        if A.shape != (d, d):
            raise DomainError(f"A has shape {A.shape}, expected ({d}, {d})")
        norm = float(np.linalg.norm(A, 2))
        if lip is None:
            lip = norm
        elif norm > lip + 1e-12:
            raise DomainError(f"declared lip {lip} is below the spectral norm {norm} of A")
        fixed = np.linalg.solve(np.eye(d) - A, b)
        return cls(lambda x: x @ A.T + b, lip, fixed, kind="affine", A=A, b=b)

    @classmethod
    def similarity(cls, ratio: float, fix, rotation=None) -> ContractionMap:
        """x -> ratio * Q (x - fix) + fix with Q orthogonal (identity by default)."""
        fix = np.asarray(fix, dtype=float).reshape(-1)
        d = fix.size
        Q = np.eye(d) if rotation is None else np.asarray(rotation, dtype=float)
        if Q.shape != (d, d) or not np.allclose(Q.T @ Q, np.eye(d), atol=1e-12):
            raise DomainError("rotation part of a similarity must be an orthogonal matrix")
        r = float(ratio)
        if rotation is None:
            fn = lambda x: r * (x - fix) + fix
        else:
            fn = lambda x: r * (x - fix) @ Q.T + fix
        return cls(fn, abs(r), fix, kind="similarity", ratio=r, fix=fix, rotation=Q)

    @classmethod
    def from_function(cls, fn, lip: float, fixed_point=None, dim: int | None = None, tol: float = 1e-13):
        """Arbitrary contraction given pointwise; the fixed point is found by iteration if absent."""
        if fixed_point is None:
            if dim is None:
                raise DomainError("need dim to locate the fixed point")
            if not 0 <= lip < 1:
                raise DomainError(f"contraction constant must lie in [0, 1), got {lip}")
            x = np.zeros((1, dim))
            for _ in range(100_000):
                y = np.asarray(fn(x), dtype=float).reshape(1, dim)
                step = float(np.linalg.norm(y - x))
                x = y
                if step * lip / (1 - lip) <= tol:
                    break
            fixed_point = x[0]
        return cls(fn, lip, fixed_point)

    def measured_lip(self, points) -> float:
        """Largest quotient |S x - S y| / |x - y| over the given sample points."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        img = self(pts)
        best = 0.0
        for i in range(len(pts) - 1):
            dx = np.linalg.norm(pts[i + 1 :] - pts[i], axis=1)
            dy = np.linalg.norm(img[i + 1 :] - img[i], axis=1)
            ok = dx > 0
            if ok.any():
                best = max(best, float((dy[ok] / dx[ok]).max()))
        return best

    def to_json(self):
        if self.kind == "similarity" and np.array_equal(self.params["rotation"], np.eye(self.dim)):
            return {"ratio": self.params["ratio"], "fix": self.params["fix"].tolist()}
        if self.kind == "affine":
            return {"A": self.params["A"].tolist(), "b": self.params["b"].tolist(), "lip": self.lip}
        if self.kind == "similarity":
            Q, r, fix = self.params["rotation"], self.params["ratio"], self.params["fix"]
            A = r * Q
            return {"A": A.tolist(), "b": (fix - A @ fix).tolist(), "lip": self.lip}
        raise DomainError("function-defined maps have no JSON form")


class ContractionSystem:
    """Ordered maps with a probability vector."""

    def __init__(self, maps: Sequence[ContractionMap], probs):
        maps = list(maps)
        p = np.asarray(probs, dtype=float).reshape(-1)
        if not maps:
            raise DomainError("a contraction system needs at least one map")
        if p.size != len(maps):
            raise DomainError(f"{len(maps)} maps but {p.size} probabilities")
        if (p < 0).any() or not np.all(np.isfinite(p)):
            raise DomainError("probabilities must be finite and nonnegative")
        if abs(math.fsum(p) - 1) > PROB_TOL:
            raise DomainError(f"probabilities sum to {math.fsum(p)!r}, not 1")
        if max(m.lip for m in maps) >= 1 - LIP_MARGIN:
            raise DomainError("every contraction constant must be < 1")
        dims = {m.dim for m in maps}
        if len(dims) != 1:
            raise DomainError(f"maps act on different dimensions {sorted(dims)}")
        self.maps = maps
        self.probs = p
        self.dim = dims.pop()

    def __len__(self):
        return len(self.maps)

    @property
    def contraction_factor(self) -> float:
        return math.fsum(p * m.lip for p, m in zip(self.probs, self.maps))

    @property
    def moment_sum(self) -> float:
        x1 = self.maps[0].fixed_point
        return math.fsum(p * float(np.linalg.norm(m.fixed_point - x1)) for p, m in zip(self.probs, self.maps))

    def to_json(self) -> dict:
        return {"maps": [m.to_json() for m in self.maps], "p": self.probs.tolist()}


def markov_step(nu: DiscreteMeasure, sys: ContractionSystem) -> DiscreteMeasure:
    """T(nu) = sum_i p_i nu S_i^{-1}, i.e. the mixture of the pushforwards."""
    require_probability(nu, "nu")
    if nu.space.mode != "euclidean" or nu.space.dim != sys.dim:
        raise DomainError(f"system acts on R^{sys.dim} but the measure lives on {nu.space!r}")
    parts = []
    current = nu
    for p, S in zip(sys.probs, sys.maps):
        if p == 0:
            continue
        image = pushforward(current, S)
        parts.append((p, image))
        current = nu.on(image.space)
    return mixture(parts)


@dataclass
class IterationReport:
    iterate: DiscreteMeasure
    steps: int
    last_step_distance: float
    a_posteriori_bound: float
    coarsening_bound: float
    contraction_factor: float
    converged: bool
    coarsening_total: float = 0.0
    step_distances: list = field(default_factory=list)

    def to_json(self) -> dict:
        sp = self.iterate.space
        return {
            "converged": self.converged,
            "steps": self.steps,
            "last_step_distance": self.last_step_distance,
            "a_posteriori_bound": self.a_posteriori_bound,
            "coarsening_bound": self.coarsening_bound,
            "coarsening_total": self.coarsening_total,
            "contraction_factor": self.contraction_factor,
            "step_distances": list(self.step_distances),
            "iterate": {
                "points": sp.coords[self.iterate.indices].tolist(),
                "weights": self.iterate.weights.tolist(),
            },
        }


def step_limit_from_env(default: int = STEP_LIMIT) -> int:
    raw = os.environ.get("KR_STEP_LIMIT")
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError:
        raise DomainError(f"KR_STEP_LIMIT must be an integer, got {raw!r}") from None
    if value < 1:
        raise DomainError(f"KR_STEP_LIMIT must be positive, got {value}")
    return value


def iterate_invariant(
    sys: ContractionSystem,
    nu0: DiscreteMeasure | None = None,
    tol: float = 1e-6,
    cap: int = DEFAULT_CAP,
    max_steps: int | None = None,
    min_steps: int = 0,
    callback: Callable[[int, DiscreteMeasure, float], None] | None = None,
) -> IterationReport:
    """Iterate nu <- coarsen(T nu, cap) until the certified bound drops to ``tol``.

    Stops after ``max_steps`` (default: ``KR_STEP_LIMIT`` or 10 000) with
    ``converged=False``.  ``min_steps`` forces a minimum number of steps.
    The default start is the Dirac measure at the fixed point of the first map.
    """
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    if not isinstance(cap, (int, np.integer)) or cap < 1:
        raise DomainError(f"cap must be a positive integer, got {cap!r}")
    if max_steps is None:
        max_steps = step_limit_from_env()
    c = sys.contraction_factor
    if not c < 1:
        raise PreconditionError(f"contraction factor {c} is not < 1")
    if nu0 is None:
        space = MetricSpace.euclidean([sys.maps[0].fixed_point])
        nu = dirac(0, space)
    else:
        require_probability(nu0, "nu0")
        nu = nu0

    distances = []
    total = 0.0
    last = math.inf
    err = 0.0
    bound = math.inf
    steps = 0
    while steps < max_steps:
        nxt, err = coarsen(markov_step(nu, sys), cap)
        last = kr_distance(nu, nxt).value
        steps += 1
        total += err
        distances.append(last)
        bound = (c * last + err) / (1 - c)
        # a fresh space per iterate keeps memory bounded
        nu = nxt.compact()
        if callback is not None:
            callback(steps, nu, bound)
        log.debug("step %d: H=%.3e bound=%.3e atoms=%d", steps, last, bound, len(nu))
        if bound <= tol and steps >= min_steps:
            break
    return IterationReport(
        iterate=nu,
        steps=steps,
        last_step_distance=last,
        a_posteriori_bound=bound,
        coarsening_bound=err,
        contraction_factor=c,
        converged=bound <= tol,
        coarsening_total=total,
        step_distances=distances,
    )


@dataclass(frozen=True)
class TailReport:
    tail_mass: float
    tail_moment: float | None  # sum_{i>N} p_i dist(x_1, x_i), None when unknown
    exhausted: bool
    head_moment: float  # sum_{i<=N} p_i dist(x_1, x_i) before renormalization


def truncate_countable(
    family: Iterable[tuple[ContractionMap, float]],
    N: int,
    tail_mass: float | Callable[[int], float] | None = None,
    tail_moment: float | Callable[[int], float] | None = None,
) -> tuple[ContractionSystem, TailReport]:
    """First ``N`` maps of a countable family with renormalized probabilities.

    ``tail_mass`` and ``tail_moment`` are caller-declared closed forms (numbers
    or functions of N) for sum_{i>N} p_i and sum_{i>N} p_i dist(x_1, x_i).
    Without ``tail_mass`` the tail is taken as 1 - sum_{i<=N} p_i.
    """
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise DomainError(f"N must be a positive integer, got {N!r}")
    it = iter(family)
    head = list(itertools.islice(it, N))
    exhausted = next(it, None) is None
    if not head:
        raise DomainError("empty family")
    maps = [m for m, _ in head]
    p = np.array([q for _, q in head], dtype=float)
    if (p < 0).any():
        raise DomainError("probabilities must be nonnegative")
    if callable(tail_mass):
        tail_mass = tail_mass(N)
    if callable(tail_moment):
        tail_moment = tail_moment(N)
    if exhausted:
        tail_mass, tail_moment = 0.0, 0.0
    elif tail_mass is None:
        tail_mass = 1.0 - math.fsum(p)
    if not exhausted and not tail_mass > 0:
        raise PreconditionError(f"family continues past N={N} but the declared tail mass is {tail_mass!r}")
    if tail_moment is not None and tail_moment < 0:
        raise PreconditionError(f"tail moment bound must be nonnegative, got {tail_moment!r}")
    x1 = maps[0].fixed_point
    head_moment = math.fsum(q * float(np.linalg.norm(m.fixed_point - x1)) for m, q in zip(maps, p))
    total = math.fsum(p)
    if not total > 0:
        raise DomainError("truncated probabilities sum to zero")
    sys = ContractionSystem(maps, p / total)
    return sys, TailReport(float(tail_mass), tail_moment, exhausted, head_moment)


def operator_gap(sysA: ContractionSystem, sysB: ContractionSystem, nu: DiscreteMeasure) -> float:
    """H(T_A nu, T_B nu), computed exactly."""
    a = markov_step(nu, sysA)
    b = markov_step(nu.on(a.space), sysB)
    return kr_distance(a, b).value


# -- built-in systems -----------------------------------------------------------------------


def bernoulli_system() -> ContractionSystem:
    """x/2 and x/2 + 1/2 with equal weights; invariant measure is Lebesgue on [0, 1]."""
    return ContractionSystem([ContractionMap.similarity(0.5, [0.0]), ContractionMap.similarity(0.5, [1.0])], [0.5, 0.5])


def cantor_system() -> ContractionSystem:
    """x/3 and x/3 + 2/3 with equal weights; invariant measure is the Cantor measure."""
    return ContractionSystem([ContractionMap.similarity(1 / 3, [0.0]), ContractionMap.similarity(1 / 3, [1.0])], [0.5, 0.5])


def basis_family(dim: int):
    """S_i(x) = (x - e_i)/2 + e_i with p_i = 2^-i, i = 1..dim, in R^dim (a finite prefix)."""
    for i in range(1, dim + 1):
        e = np.zeros(dim)
        e[i - 1] = 1.0
        yield ContractionMap.similarity(0.5, e), 2.0**-i


def basis_tail_mass(N: int) -> float:
    return 2.0**-N


def basis_tail_moment(N: int) -> float:
    # sum_{i>N} 2^-i |e_1 - e_i| = sqrt(2) 2^-N for N >= 1
    return math.sqrt(2) * 2.0**-N


def basis_system(N: int, dim: int | None = None) -> tuple[ContractionSystem, TailReport]:
    """Truncation of the countable family at N maps, embedded in R^dim (dim >= N)."""
    dim = N if dim is None else dim
    if dim < N:
        raise DomainError(f"dimension {dim} cannot hold {N} basis vectors")

    def family():
        for i in itertools.count(1):
            e = np.zeros(dim)
            if i <= dim:
                e[i - 1] = 1.0
                yield ContractionMap.similarity(0.5, e), 2.0**-i
            else:
                return

    sys, tail = truncate_countable(family(), N, basis_tail_mass, basis_tail_moment)
    if tail.exhausted:
        # the R^dim embedding ran out of basis vectors, but the family itself is infinite
        tail = TailReport(basis_tail_mass(N), basis_tail_moment(N), False, tail.head_moment)
    return sys, tail


# -- JSON ---------------------------------------------------------------------------------


def system_from_json(obj: Mapping) -> ContractionSystem:
    """``{"maps": [{"A": [[...]], "b": [...], "lip": s} | {"ratio": r, "fix": [...]}], "p": [...]}``."""
    if not isinstance(obj, Mapping):
        raise DomainError("system descriptor must be a JSON object")
    for key in ("maps", "p"):
        if key not in obj:
            raise DomainError(f"system descriptor: missing field {key!r}")
    maps = []
    for pos, spec in enumerate(obj["maps"]):
        if not isinstance(spec, Mapping):
            raise DomainError(f"system descriptor: maps[{pos}] must be an object")
        try:
            if "ratio" in spec:
                maps.append(ContractionMap.similarity(spec["ratio"], spec["fix"]))
            elif "A" in spec:
                maps.append(ContractionMap.affine(spec["A"], spec["b"], spec.get("lip")))
            else:
                raise DomainError("needs either 'ratio'/'fix' or 'A'/'b'")
        except (KeyError, ValueError, np.linalg.LinAlgError) as exc:
            raise DomainError(f"system descriptor: maps[{pos}]: {exc}") from None
    return ContractionSystem(maps, obj["p"])
