"""Command-line front end.

    krmetric dist MU.json NU.json
    krmetric invariant SYSTEM.json [--nu0 MEASURE.json] [--tol T] [--cap C]
    krmetric scenario {assertion-1.1,lemma-3.7,example-5.1,cantor,bernoulli,dirac-sweep}
    krmetric envelope FUNCTION.json --n N
    krmetric extend PARTIAL.json
    krmetric cover MEASURES.json --eps E --delta D [--budget B]
    krmetric witness [--sequence escaping] --eps E --delta D --K K

Exit status: 0 success, 1 bad input or violated precondition, 2 iteration did
not reach the requested tolerance.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import (
    assertion_1_1_sequence,
    build_witness,
    cauchy_profile,
    constant_sequence,
    escaping_sequence,
    lemma_3_7_sequence,
    tightness_cover,
)
from .errors import DomainError, KRError
from .hutchinson import (
    DEFAULT_CAP,
    basis_system,
    bernoulli_system,
    cantor_system,
    iterate_invariant,
    markov_step,
    system_from_json,
)
from .measures import DiscreteMeasure, dirac, first_moment, measure_from_json
from .metric_core import LipFunction, MetricSpace, envelope, lip_constant, mcshane_extend, space_from_json
from .transport import kr_distance, verify_certificate

COMMANDS = ("dist", "invariant", "scenario", "envelope", "extend", "cover", "witness")
SCENARIOS = ("assertion-1.1", "lemma-3.7", "example-5.1", "cantor", "bernoulli", "dirac-sweep")
SIG_DIGITS = 12


class InputError(KRError):
    pass


class NotConverged(Exception):
    def __init__(self, payload):
        self.payload = payload


@dataclass
class RunConfig:
    command: str
    inputs: list = field(default_factory=list)
    tol: float | None = None
    cap: int | None = None
    horizon: int | None = None
    seed: int = 0
    fmt: str | None = None
    out: str | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise InputError(f"unknown command {self.command!r}")
        if self.tol is not None and not self.tol > 0:
            raise InputError(f"--tol must be positive, got {self.tol}")
        if self.cap is not None and self.cap < 1:
            raise InputError(f"--cap must be at least 1, got {self.cap}")
        if self.horizon is not None and self.horizon < 1:
            raise InputError(f"--horizon must be at least 1, got {self.horizon}")
        if self.fmt not in (None, "json", "csv"):
            raise InputError(f"--format must be json or csv, got {self.fmt!r}")


# -- formatting -----------------------------------------------------------------------------


def _round(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
        return float(f"{x:.{SIG_DIGITS}g}")
    if isinstance(x, dict):
        return {str(k): _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    if isinstance(x, np.ndarray):
        return _round(x.tolist())
    return x


def dumps_json(payload) -> str:
    return json.dumps(_round(payload), sort_keys=True, indent=2) + "\n"


def dumps_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.{SIG_DIGITS}g}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


# -- loading --------------------------------------------------------------------------------


class Loader:
    """Reads JSON inputs; identical space descriptors resolve to one space object."""

    def __init__(self):
        self._spaces = {}

    def read(self, path):
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise InputError(f"{path}: cannot read ({exc.strerror})") from None
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None

    def space(self, ref, base: Path):
        if isinstance(ref, str):
            target = (base / ref).resolve()
            key = ("file", str(target))
            if key not in self._spaces:
                self._spaces[key] = self._wrap(str(target), lambda: space_from_json(self.read(target)))
            return self._spaces[key]
        key = ("inline", json.dumps(ref, sort_keys=True))
        if key not in self._spaces:
            self._spaces[key] = space_from_json(ref)
        return self._spaces[key]

    @staticmethod
    def _wrap(where, fn):
        try:
            return fn()
        except (DomainError, TypeError, ValueError) as exc:
            raise InputError(f"{where}: {exc}") from None

    def measure(self, path) -> DiscreteMeasure:
        obj = self.read(path)
        if isinstance(obj, dict) and "space" in obj:
            obj = dict(obj, space=self.space_of(obj, path))
        return self._wrap(path, lambda: measure_from_json(obj))

    def space_of(self, obj, path) -> MetricSpace:
        if not isinstance(obj, dict) or "space" not in obj:
            raise InputError(f"{path}: missing field 'space'")
        return self._wrap(path, lambda: self.space(obj["space"], Path(path).parent))


def _require(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise InputError(f"{path}: missing field {key!r}")
    return obj[key]


# -- commands -------------------------------------------------------------------------------


def _iterate_payload(report):
    payload = report.to_json()
    if not report.converged:
        raise NotConverged(payload)
    return payload


def cmd_dist(cfg, loader):
    if len(cfg.inputs) != 2:
        raise InputError("dist needs two measure files")
    mu, nu = (loader.measure(p) for p in cfg.inputs)
    cert = kr_distance(mu, nu, method=cfg.options.get("method", "auto"))
    report = verify_certificate(cert, mu, nu)
    if (cfg.fmt or "json") == "csv":
        return dumps_csv(["source", "target", "flow"], cert.plan)
    payload = cert.to_json()
    payload["check"] = {
        "marginal_residual": report.marginal_residual,
        "lipschitz_violation": report.lipschitz_violation,
        "duality_gap": report.duality_gap,
        "ok": report.ok,
    }
    return dumps_json(payload)


def cmd_invariant(cfg, loader):
    if len(cfg.inputs) != 1:
        raise InputError("invariant needs one system file")
    path = cfg.inputs[0]
    sys_ = loader._wrap(path, lambda: system_from_json(loader.read(path)))
    nu0 = loader.measure(cfg.options["nu0"]) if cfg.options.get("nu0") else None
    report = iterate_invariant(
        sys_,
        nu0,
        tol=cfg.tol or 1e-6,
        cap=cfg.cap or DEFAULT_CAP,
        max_steps=cfg.options.get("max_steps"),
    )
    return dumps_json(_iterate_payload(report))


def _scenario_sequence_csv(cfg, name):
    horizon = cfg.horizon or (16 if name == "assertion-1.1" else 10)
    if name == "lemma-3.7":
        seq = lemma_3_7_sequence()
        rows = []
        x0 = dirac(seq.point(0), seq.space)
        for n in range(1, horizon + 1):
            nu = seq[n]
            h = kr_distance(x0.on(nu.space), nu).value
            rows.append((n, h, seq.dist(0, n) / n))
        if (cfg.fmt or "csv") == "json":
            return dumps_json({"rows": [{"n": n, "H": h, "dist_over_n": r} for n, h, r in rows]})
        return dumps_csv(["n", "H", "dist_over_n"], rows)
    seq = assertion_1_1_sequence()
    prof = cauchy_profile(seq, horizon, workers=cfg.options.get("workers"))
    if (cfg.fmt or "csv") == "json":
        return dumps_json(
            {
                "distances": [[n, m, h] for n, m, h in prof.rows()],
                "sup_tail": [[n, prof.sup_tail[n]] for n in sorted(prof.sup_tail)],
            }
        )
    return dumps_csv(["n", "m", "H"], prof.rows())


def cmd_scenario(cfg, loader):
    name = cfg.options.get("name")
    if name not in SCENARIOS:
        raise InputError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    if name in ("assertion-1.1", "lemma-3.7"):
        return _scenario_sequence_csv(cfg, name)
    if name in ("cantor", "bernoulli"):
        sys_ = cantor_system() if name == "cantor" else bernoulli_system()
        start = dirac(0, MetricSpace.euclidean([[0.0]]))
        report = iterate_invariant(
            sys_, start, tol=cfg.tol or 1e-3, cap=cfg.cap or DEFAULT_CAP, max_steps=cfg.options.get("max_steps")
        )
        payload = report.to_json()
        zero = report.iterate.space.locate([0.0])
        payload["mean"] = first_moment(report.iterate, zero) if zero is not None else None
        if not report.converged:
            raise NotConverged(payload)
        return dumps_json(payload)
    if name == "example-5.1":
        return _scenario_basis(cfg)
    return _scenario_dirac_sweep(cfg)


def _scenario_basis(cfg):
    N = cfg.options.get("trunc") or 6
    dim = cfg.options.get("dim") or N
    steps = cfg.options.get("steps") or 10
    against = cfg.options.get("against") or max(1, N - 2)
    sys_, tail = basis_system(N, dim)
    start = dirac(0, MetricSpace.euclidean([np.zeros(dim)]))
    norms = []
    report = iterate_invariant(
        sys_,
        start,
        tol=cfg.tol or 1e-300,
        cap=cfg.cap or 64,
        max_steps=steps,
        callback=lambda k, nu, b: norms.append(float(np.linalg.norm(nu.space.coords[nu.indices], axis=1).max())),
    )
    nu = report.iterate
    pts = nu.space.coords[nu.indices]
    near = [float(np.linalg.norm(pts - np.eye(dim)[i], axis=1).min()) for i in range(N)]
    payload = report.to_json()
    payload.update(
        {
            "trunc": N,
            "dim": dim,
            "tail_mass": tail.tail_mass,
            "tail_moment": tail.tail_moment,
            "moment_sum": sys_.moment_sum,
            "max_norm_per_step": norms,
            "distance_to_fixed_points": near,
        }
    )
    if against != N:
        other, other_tail = basis_system(against, dim)
        a = markov_step(nu, other)
        b = markov_step(nu.on(a.space), sys_)
        gap = kr_distance(a, b).value
        diam = b.space.diameter(np.union1d(a.indices, b.indices))
        payload["operator_gap"] = {"against": against, "gap": gap, "tail_mass": other_tail.tail_mass, "diameter": diam}
    return dumps_json(payload)


def _scenario_dirac_sweep(cfg):
    rng = np.random.default_rng(cfg.seed)
    count = cfg.horizon or 500
    pts = rng.normal(size=(2 * count, 3))
    space = MetricSpace.euclidean(pts)
    rows = []
    for k in range(count):
        x, y = 2 * k, 2 * k + 1
        h = kr_distance(dirac(x, space), dirac(y, space)).value
        rows.append((k, space.dist(x, y), h, abs(h - space.dist(x, y))))
    if (cfg.fmt or "json") == "csv":
        return dumps_csv(["pair", "dist", "H", "abs_error"], rows)
    return dumps_json({"pairs": count, "seed": cfg.seed, "max_abs_error": max(r[3] for r in rows)})


def _function_input(cfg, loader, key):
    if len(cfg.inputs) != 1:
        raise InputError(f"{cfg.command} needs one input file")
    path = cfg.inputs[0]
    obj = loader.read(path)
    space = loader.space_of(obj, path)
    return path, obj, space, _require(obj, key, path)


def cmd_envelope(cfg, loader):
    path, obj, space, values = _function_input(cfg, loader, "values")
    n = cfg.options.get("n")
    if n is None:
        raise InputError("envelope needs --n")
    f = loader._wrap(path, lambda: LipFunction(values))
    if f.values.size != space.n:
        raise InputError(f"{path}: 'values' has {f.values.size} entries for {space.n} points")
    phi = envelope(f, n, space)
    return dumps_json({"values": phi.values, "lip_bound": phi.lip_bound, "lip_constant": lip_constant(phi, space)})


def cmd_extend(cfg, loader):
    path, obj, space, partial = _function_input(cfg, loader, "partial")
    if not isinstance(partial, list) or not all(isinstance(p, list) and len(p) == 2 for p in partial):
        raise InputError(f"{path}: 'partial' must be a list of [index, value] pairs")
    psi = loader._wrap(path, lambda: mcshane_extend({int(i): float(v) for i, v in partial}, space))
    return dumps_json({"values": psi.values, "lip_bound": psi.lip_bound})


def cmd_cover(cfg, loader):
    path, obj, space, raw = _function_input(cfg, loader, "measures")
    if cfg.options.get("eps") is None or cfg.options.get("delta") is None:
        raise InputError("cover needs --eps and --delta")
    measures = [
        loader._wrap(f"{path}: measures[{k}]", lambda atoms=atoms: DiscreteMeasure.from_atoms(space, atoms))
        for k, atoms in enumerate(raw)
    ]
    res = tightness_cover(measures, cfg.options["eps"], cfg.options["delta"], budget=cfg.options.get("budget"))
    return dumps_json(
        {
            "ok": res.ok,
            "centers": res.centers,
            "uncovered": res.uncovered,
            "failing_index": res.failing_index,
            "failing_mass": res.failing_mass,
            "exhaustive": res.exhaustive,
        }
    )


SEQUENCES = {
    "escaping": escaping_sequence,
    "constant": constant_sequence,
    "lemma-3.7": lemma_3_7_sequence,
    "assertion-1.1": assertion_1_1_sequence,
}


def cmd_witness(cfg, loader):
    name = cfg.options.get("sequence") or "escaping"
    if name not in SEQUENCES:
        raise InputError(f"unknown sequence {name!r}; choose from {', '.join(SEQUENCES)}")
    eps = cfg.options.get("eps") or 0.5
    delta = cfg.options.get("delta") or 0.5
    seq = SEQUENCES[name]()
    w = build_witness(seq, eps, delta, cfg.options.get("K") or 6, horizon=cfg.horizon or 200)
    payload = w.to_json()
    payload["oscillations"] = w.oscillations(seq)
    return dumps_json(payload)


HANDLERS = {
    "dist": cmd_dist,
    "invariant": cmd_invariant,
    "scenario": cmd_scenario,
    "envelope": cmd_envelope,
    "extend": cmd_extend,
    "cover": cmd_cover,
    "witness": cmd_witness,
}


def _emit(text, cfg, stdout):
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        stdout.write(text)


def run(cfg: RunConfig, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        text = HANDLERS[cfg.command](cfg, Loader())
    except NotConverged as nc:
        _emit(dumps_json(nc.payload), cfg, stdout)
        print(f"krmetric {cfg.command}: tolerance not reached within the step limit", file=stderr)
        return 2
    except (KRError, ValueError) as exc:
        print(f"krmetric {cfg.command}: error: {exc}", file=stderr)
        return 1
    _emit(text, cfg, stdout)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tol", type=float)
    common.add_argument("--cap", type=int)
    common.add_argument("--horizon", type=int)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out")
    common.add_argument("--format", dest="fmt", choices=("json", "csv"))

    parser = argparse.ArgumentParser(prog="krmetric", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dist", parents=[common], help="exact distance between two measures")
    p.add_argument("inputs", nargs=2)
    p.add_argument("--method", choices=("auto", "simplex", "line"), default="auto")

    p = sub.add_parser("invariant", parents=[common], help="certified invariant measure of a system")
    p.add_argument("inputs", nargs=1)
    p.add_argument("--nu0")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("scenario", parents=[common], help="run a built-in scenario")
    p.add_argument("name", choices=SCENARIOS)
    p.add_argument("--dim", type=int)
    p.add_argument("--trunc", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--against", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("envelope", parents=[common], help="n-Lipschitz envelope of a function")
    p.add_argument("inputs", nargs=1)
    p.add_argument("--n", type=float, required=True)

    p = sub.add_parser("extend", parents=[common], help="largest 1-Lipschitz extension")
    p.add_argument("inputs", nargs=1)

    p = sub.add_parser("cover", parents=[common], help="finite ball cover of a family of measures")
    p.add_argument("inputs", nargs=1)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--budget", type=int)

    p = sub.add_parser("witness", parents=[common], help="oscillating witness for a non-tight sequence")
    p.add_argument("--sequence", choices=tuple(SEQUENCES), default="escaping")
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--K", type=int, default=6)
    return parser


def config_from_args(args) -> RunConfig:
    ns = vars(args).copy()
    base = {k: ns.pop(k) for k in ("command", "tol", "cap", "horizon", "seed", "fmt", "out")}
    inputs = ns.pop("inputs", [])
    return RunConfig(inputs=list(inputs), options=ns, **base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except InputError as exc:
        print(f"krmetric: error: {exc}", file=sys.stderr)
        return 1
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
