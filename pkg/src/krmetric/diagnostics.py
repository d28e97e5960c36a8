"""Measure sequences and the constructive tightness / witness machinery.

Everything here works on lazily generated sequences of finitely supported
probability measures whose points are registered, in order, in one growing
euclidean space.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, PreconditionError, PremiseError
from .measures import DiscreteMeasure, integrate
from .metric_core import LipFunction, MetricSpace, common_space, lip_constant
from .transport import kr_distance

MASS_TOL = 1e-12


class MeasureSequence:
    """Deterministic lazily materialized family n -> nu_n.

    ``build(n, point)`` returns ``(indices, weights)`` for nu_n, where
    ``point(k)`` registers the k-th scenario point (via ``positions(k)``) in
    the shared space and returns its index.  Points are registered on first
    use only, so the space grows with the largest index requested.
    """

    def __init__(self, name: str, positions: Callable[[int], Sequence[float]], build, start: int = 1, check=None):
        self.name = name
        self.start = start
        self._positions = positions
        self._build = build
        self._check = check
        self._point_index: dict[int, int] = {}
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.space: MetricSpace | None = None
        self.horizon = start - 1

    def point(self, k: int) -> int:
        if k not in self._point_index:
            x = np.asarray(self._positions(k), dtype=float).reshape(1, -1)
            if self.space is None:
                self.space = MetricSpace.euclidean(x)
                idx = 0
            else:
                self.space, (idx,) = self.space.extend(x)
            self._point_index[k] = int(idx)
            if self._check is not None:
                self._check(self, k)
        return self._point_index[k]

    def dist(self, k: int, l: int) -> float:
        return self.space.dist(self.point(k), self.point(l))

    def __getitem__(self, n: int) -> DiscreteMeasure:
        if n < self.start:
            raise DomainError(f"sequence {self.name!r} starts at index {self.start}")
        if n not in self._cache:
            idx, w = self._build(n, self.point)
            self._cache[n] = (np.asarray(idx, dtype=np.intp), np.asarray(w, dtype=float))
            self.horizon = max(self.horizon, n)
        idx, w = self._cache[n]
        mu = DiscreteMeasure(self.space, idx, w)
        if abs(mu.mass - 1) > MASS_TOL:
            raise PreconditionError(f"{self.name}[{n}] has mass {mu.mass!r}")
        return mu

    def materialize(self, n_max: int) -> list[DiscreteMeasure]:
        measures = [self[n] for n in range(self.start, n_max + 1)]
        return [mu.on(self.space) for mu in measures]


def _line(k):
    return [float(k)]


def assertion_1_1_sequence(positions: Callable[[int], Sequence[float]] = _line) -> MeasureSequence:
    """nu_n = 2^-n delta_{x_0} + sum_{k=1..n} 2^-k delta_{x_k}.

    ``positions`` must satisfy dist(x_0, x_k) <= k (checked as points are
    registered); the divergence dist -> infinity is the caller's claim.
    """

    def check(seq, k):
        if k > 0 and seq.dist(0, k) > k * (1 + 1e-12):
            raise PreconditionError(f"dist(x_0, x_{k}) = {seq.dist(0, k)!r} exceeds {k}")

    def build(n, point):
        idx = [point(0)] + [point(k) for k in range(1, n + 1)]
        w = [2.0**-n] + [2.0**-k for k in range(1, n + 1)]
        return idx, w

    seq = MeasureSequence("assertion-1.1", positions, build, start=1, check=check)
    seq.point(0)
    return seq


def _squares(k):
    return [float(k * k)]


def lemma_3_7_sequence(positions: Callable[[int], Sequence[float]] = _squares) -> MeasureSequence:
    """nu_n = (1/n) delta_{x_n} + (1 - 1/n) delta_{x_0} with dist(x_0, x_n) >= n^2."""

    def check(seq, k):
        if k > 0 and seq.dist(0, k) < k * k * (1 - 1e-12):
            raise PreconditionError(f"dist(x_0, x_{k}) = {seq.dist(0, k)!r} is below {k * k}")

    def build(n, point):
        return [point(n), point(0)], [1.0 / n, 1.0 - 1.0 / n]

    seq = MeasureSequence("lemma-3.7", positions, build, start=1, check=check)
    seq.point(0)
    return seq


def dirac_sequence(positions: Callable[[int], Sequence[float]], name: str = "dirac", start: int = 1) -> MeasureSequence:
    """nu_n = delta_{x_n}."""
    return MeasureSequence(name, positions, lambda n, point: ([point(n)], [1.0]), start=start)


def escaping_sequence(spacing: float = 2.0) -> MeasureSequence:
    """Dirac masses at spacing * n on the line; not tight."""
    return dirac_sequence(lambda n: [spacing * n], name="escaping")


def constant_sequence(x: Sequence[float] = (0.0,)) -> MeasureSequence:
    return dirac_sequence(lambda n: list(x), name="constant")


# -- Cauchy profile -----------------------------------------------------------------------


@dataclass
class CauchyProfile:
    ns: list[int]
    distances: dict  # (n, m) -> H(nu_n, nu_m) for n < m
    sup_tail: dict  # n -> max_{m > n} H(nu_n, nu_m)

    def rows(self):
        for (n, m), h in sorted(self.distances.items()):
            yield n, m, h


def cauchy_profile(seq: MeasureSequence, n_max: int, workers: int | None = None) -> CauchyProfile:
    """Exact H(nu_n, nu_m) for start <= n < m <= n_max and the sup over m per n."""
    if n_max <= seq.start:
        raise DomainError(f"n_max must exceed the start index {seq.start}")
    measures = dict(zip(range(seq.start, n_max + 1), seq.materialize(n_max)))
    pairs = [(n, m) for n in measures for m in measures if n < m]

    def solve(pair):
        return kr_distance(measures[pair[0]], measures[pair[1]]).value

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            values = list(pool.map(solve, pairs))
    else:
        values = [solve(p) for p in pairs]
    distances = dict(zip(pairs, values))
    sup_tail = {n: max(h for (a, _), h in distances.items() if a == n) for n in measures if n < n_max}
    return CauchyProfile(sorted(measures), distances, sup_tail)


# -- tightness cover ----------------------------------------------------------------------


@dataclass
class CoverResult:
    ok: bool
    centers: list[int]
    uncovered: list[float]  # uncovered mass per measure
    eps: float
    delta: float
    failing_index: int | None = None
    failing_mass: float | None = None
    exhaustive: bool = False  # failure was confirmed by exhaustive search


def _uncovered(masses, covered):
    return masses @ (~covered).astype(float)


def tightness_cover(
    measures: Sequence[DiscreteMeasure],
    eps: float,
    delta: float,
    budget: int | None = None,
    exhaustive_limit: int = 16,
) -> CoverResult:
    """Atom-centered closed eps-balls leaving < delta mass of every measure uncovered.

    Centers are picked greedily (largest newly covered mass summed over the
    measures still failing; lowest index on ties).  If greedy misses within
    ``budget`` and there are at most ``exhaustive_limit`` candidate atoms, all
    atom-centered covers of that size are searched before failure is reported.
    """
    if not (eps > 0 and delta > 0):
        raise DomainError("eps and delta must be positive")
    if not measures:
        return CoverResult(True, [], [], eps, delta)
    space = common_space(*(mu.space for mu in measures))
    measures = [mu.on(space) for mu in measures]
    cand = np.unique(np.concatenate([mu.indices for mu in measures]))
    pos = {int(p): t for t, p in enumerate(cand)}
    masses = np.zeros((len(measures), cand.size))
    for r, mu in enumerate(measures):
        masses[r, [pos[int(i)] for i in mu.indices]] = mu.weights
    within = space.pairwise(cand, cand) <= eps  # within[c, a]: atom a in ball around c
    limit = cand.size if budget is None else budget

    covered = np.zeros(cand.size, dtype=bool)
    chosen: list[int] = []
    unc = _uncovered(masses, covered)
    while (unc >= delta).any() and len(chosen) < limit:
        failing = unc >= delta
        gain = (masses[failing] @ (within & ~covered[None, :]).T.astype(float)).sum(axis=0)
        best = int(np.argmax(gain))
        if gain[best] <= 0:
            break
        chosen.append(best)
        covered |= within[best]
        unc = _uncovered(masses, covered)

    if not (unc >= delta).any():
        return CoverResult(True, [int(cand[c]) for c in sorted(chosen)], unc.tolist(), eps, delta)

    exhaustive = False
    if cand.size <= exhaustive_limit:
        exhaustive = True
        for size in range(0, min(limit, cand.size) + 1):
            for combo in itertools.combinations(range(cand.size), size):
                cov = within[list(combo)].any(axis=0) if combo else np.zeros(cand.size, dtype=bool)
                u = _uncovered(masses, cov)
                if not (u >= delta).any():
                    return CoverResult(True, [int(cand[c]) for c in combo], u.tolist(), eps, delta)
    worst = int(np.argmax(unc))
    return CoverResult(
        False, [int(cand[c]) for c in sorted(chosen)], unc.tolist(), eps, delta, worst, float(unc[worst]), exhaustive
    )


# -- witness construction -----------------------------------------------------------------


def _set_dist(space, points, targets):
    """dist(x, targets) for each x in points."""
    if len(targets) == 0:
        return np.full(len(points), np.inf)
    return space.pairwise(points, targets).min(axis=1)


def bump(space: MetricSpace, D, eps: float) -> LipFunction:
    """x -> max(1 - dist(x, D) * 2 / eps, 0)."""
    d = _set_dist(space, np.arange(space.n), np.asarray(D, dtype=np.intp))
    return LipFunction(np.maximum(1.0 - d * 2.0 / eps, 0.0), 2.0 / eps)


def neighborhood_mass(mu: DiscreteMeasure, A, r: float) -> float:
    """mu(A^r), A^r the union of closed r-balls around A."""
    return math.fsum(mu.weights[_set_dist(mu.space, mu.indices, np.asarray(A, dtype=np.intp)) <= r])


@dataclass
class WitnessArtifacts:
    eps: float
    delta: float
    indices: list[int]  # n_1 < n_2 < ...
    A: list[list[int]]
    D: list[list[int]]
    bumps: list[LipFunction]
    f: LipFunction
    partial: list[LipFunction]  # f_1, ..., f_K
    added: list[bool]  # whether the bump was added at step k (k >= 2)
    space: MetricSpace = field(repr=False)

    def oscillations(self, seq: MeasureSequence) -> list[float]:
        vals = [integrate(seq[n].on(self.space), self.f) for n in self.indices]
        return [abs(a - b) for a, b in zip(vals, vals[1:])]

    def to_json(self) -> dict:
        coords = self.space.coords
        return {
            "eps": self.eps,
            "delta": self.delta,
            "indices": self.indices,
            "points": coords.tolist(),
            "A": self.A,
            "D": self.D,
            "bump_added": self.added,
            "bumps": [b.values.tolist() for b in self.bumps],
            "f": self.f.values.tolist(),
            "lip_f": lip_constant(self.f, self.space),
        }


def _probe(seq, after, A, eps, delta, horizon):
    """First n > after (up to horizon) with nu_n(X minus A^eps) >= delta."""
    for n in range(max(after + 1, seq.start), horizon + 1):
        mu = seq[n]
        if mu.mass - neighborhood_mass(mu, A, eps) >= delta:
            return n, mu
    return None, None


def build_witness(seq: MeasureSequence, eps: float, delta: float, K: int, horizon: int = 200) -> WitnessArtifacts:
    """Sets A_k, D_k, bumps and an oscillating [0, 1]-valued (2/eps)-Lipschitz f.

    The non-tightness premise is probed on indices up to ``horizon``; if some
    step finds no escaping measure, :class:`PremiseError` names the covering
    atom set.  Each A_k collects every atom seen so far (finite supports make
    the neighborhood conditions exact).

    The mass left outside A_k^(eps/2) is held below delta/32, not eps/32:
    only the delta-scaled bound yields the delta/8 - 2 delta/32 = delta/16
    oscillation between consecutive chosen measures.
    """
    if not (eps > 0 and delta > 0):
        raise DomainError("eps and delta must be positive")
    if K < 1:
        raise DomainError("K must be at least 1")
    ns, A, D = [], [], []
    n1 = None
    for n in range(seq.start, horizon + 1):
        if seq[n].mass >= delta:
            n1 = n
            break
    if n1 is None:
        raise PremiseError(f"no measure of mass >= {delta} up to index {horizon}")
    mu = seq[n1]
    ns.append(n1)
    A.append(mu.indices.tolist())
    D.append(mu.indices.tolist())
    for k in range(2, K + 1):
        n, mu = _probe(seq, ns[-1], A[-1], eps, delta, horizon)
        if n is None:
            raise PremiseError(
                f"premise failed at step {k}: every nu_n with {ns[-1]} < n <= {horizon} leaves "
                f"less than {delta} outside the {eps}-neighborhood of {len(A[-1])} atoms",
                cover=A[-1],
            )
        space = mu.space
        far = _set_dist(space, mu.indices, np.asarray(A[-1], dtype=np.intp)) > eps
        Dk = mu.indices[far].tolist()
        Ak = sorted(set(A[-1]) | set(mu.indices.tolist()) | set(Dk))
        ns.append(n)
        D.append(Dk)
        A.append(Ak)

    space = seq.space
    measures = [seq[n].on(space) for n in ns]
    bumps = [bump(space, Dk, eps) for Dk in D]
    f = np.zeros(space.n)
    partial = [LipFunction(f.copy(), 2.0 / eps)]
    added = [False]
    for k in range(1, K):
        fk = partial[-1]
        drift = abs(integrate(measures[k - 1], fk) - integrate(measures[k], fk))
        if drift > delta / 8:
            added.append(False)
        else:
            f = f + bumps[k].values
            added.append(True)
        partial.append(LipFunction(f.copy(), 2.0 / eps))
    return WitnessArtifacts(eps, delta, ns, A, D, bumps, partial[-1], partial, added, space)


@dataclass
class WitnessCheck:
    checks: dict  # name -> bool
    oscillations: list[float]
    lip_f: float

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def verify_witness(w: WitnessArtifacts, seq: MeasureSequence) -> WitnessCheck:
    """Re-verify every property of a witness from its sets and the sequence alone."""
    space = common_space(w.space, seq.space)
    eps, delta = w.eps, w.delta
    K = len(w.indices)
    measures = [seq[n].on(space) for n in w.indices]
    A = [np.asarray(a, dtype=np.intp) for a in w.A]
    D = [np.asarray(d, dtype=np.intp) for d in w.D]
    allpts = np.arange(space.n)
    ch = {}
    ch["increasing indices"] = all(a < b for a, b in zip(w.indices, w.indices[1:]))
    ch["(i) A nested"] = all(set(A[i - 1]) <= set(A[i]) for i in range(1, K))
    ch["(ii) D_i in A_j for i <= j"] = all(set(D[i]) <= set(A[j]) for i in range(K) for j in range(i, K))
    # (iii) via the set distance (> eps forces disjoint eps/2 neighborhoods) and on materialized points
    sep = True
    for i in range(K):
        for j in range(i):
            if len(D[i]) and len(A[j]):
                if space.pairwise(D[i], A[j]).min() <= eps:
                    sep = False
                near_d = _set_dist(space, allpts, D[i]) <= eps / 2
                near_a = _set_dist(space, allpts, A[j]) <= eps / 2
                if (near_d & near_a).any():
                    sep = False
    ch["(iii) D_i^(eps/2) disjoint from A_j^(eps/2) for i > j"] = sep
    ch["(iv) nu_nk(D_k^(eps/4)) > delta/2"] = all(
        neighborhood_mass(measures[k], D[k], eps / 4) > delta / 2 for k in range(K)
    )
    ch["(v) nu_nk(X minus A_k^(eps/2)) < delta/32"] = all(
        measures[k].mass - neighborhood_mass(measures[k], A[k], eps / 2) < delta / 32 for k in range(K)
    )
    supports = [np.flatnonzero(b.values > 0) for b in w.bumps]
    ch["bump supports disjoint"] = all(
        not np.intersect1d(supports[i], supports[j]).size for i in range(K) for j in range(i)
    )
    expected = [np.maximum(1.0 - _set_dist(space, allpts, D[k]) * 2 / eps, 0.0) for k in range(K)]
    ch["bump formula"] = all(np.allclose(w.bumps[k].values, expected[k], rtol=0, atol=1e-12) for k in range(K))
    fvals = w.f.values
    ch["0 <= f <= 1"] = bool(np.all(fvals >= 0) and np.all(fvals <= 1))
    lip_f = lip_constant(w.f, space)
    ch["Lip f <= 2/eps"] = lip_f <= 2 / eps + 1e-9
    # recursion replayed from the bumps
    f = np.zeros(space.n)
    replay = True
    for k in range(1, K):
        drift = abs(integrate(measures[k - 1], f) - integrate(measures[k], f))
        if drift <= delta / 8:
            f = f + expected[k]
        replay &= bool(np.allclose(f, w.partial[k].values, rtol=0, atol=1e-12))
    ch["recursion replay"] = replay and bool(np.allclose(f, fvals, rtol=0, atol=1e-12))
    vals = [integrate(mu, w.f) for mu in measures]
    osc = [abs(a - b) for a, b in zip(vals, vals[1:])]
    ch["oscillation > delta/16"] = all(o > delta / 16 for o in osc)
    return WitnessCheck(ch, osc, lip_f)
