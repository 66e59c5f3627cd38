"""Command-line front end.

Every subcommand writes its outputs into --out-dir together with a
manifest.json that records the scenario, all parameters, tolerances and the
seed, plus a sha256 for every artifact. JSON reports carry "report_version"
and serialize floats with 12 significant digits, so reruns with the same
manifest produce byte-identical reports. Timings live only in the manifest.

Exit codes::

    0  success (and, with --check-expected, all expected flags matched)
    1  unexpected internal error
    2  usage error (bad flags, unknown scenario, invalid measure spec)
    3  invalid scenario, config or form file (validation failed)
    4  scale error (delta outside [box diameter, scale of the class])
    5  Lyapunov construction refused (reason code in refusal.json)
    6  computed flags differ from the scenario's expected flags
    7  verification of a Lyapunov form failed
    8  Ulam measure did not converge
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .flow import birkhoff_average
from .forms import BasicOneForm, ValidationError
from .graph import (
    ConvergenceError,
    ScaleError,
    asymptotic_pairing,
    build_graph,
    chain_recurrent_set,
    save_graph,
    stationarity_residual,
    ulam_measure,
    xi_recurrent_split,
)
from .lyapunov import (
    SIGN_MARGIN,
    VANISH_TOL,
    ConstructionRefused,
    boxes_near,
    construct_lyapunov_form,
    verify_lyapunov,
)
from .plots import box_overlay, heatmap
from . import scenarios as sc_mod
from .expr import parse

REPORT_VERSION = 1

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INVALID = 0, 1, 2, 3
EXIT_SCALE, EXIT_REFUSED, EXIT_MISMATCH, EXIT_VERIFY, EXIT_CONVERGENCE = 4, 5, 6, 7, 8


class UsageError(ValueError):
    pass


def _clean(obj):
    """Round floats to 12 significant digits; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
        x = float(f"{x:.12g}")
        return 0.0 if x == 0 else x
    return obj


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=1, sort_keys=True) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunManifest:
    """Scenario reference, parameters, tolerances, artifacts with hashes, timing and versions."""

    def __init__(self, command: str, scenario: str, config_sha256: str, params: dict, tolerances: dict,
                 out_dir: Path):
        self.command, self.scenario, self.config_sha256 = command, scenario, config_sha256
        self.params, self.tolerances = params, tolerances
        self.out_dir = out_dir
        self.artifacts: list[dict] = []
        self.timing: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def write(self, name: str, content: str | bytes) -> Path:
        path = self.out_dir / name
        if isinstance(content, str):
            path.write_text(content)
        else:
            path.write_bytes(content)
        self.record(path)
        return path

    def record(self, path: Path) -> None:
        self.artifacts.append({"path": path.name, "sha256": _sha256(path), "bytes": path.stat().st_size})

    def lap(self, label: str) -> None:
        now = time.perf_counter()
        self.timing[label] = now - self._t0
        self._t0 = now

    def to_dict(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "command": self.command,
            "scenario": self.scenario,
            "config_sha256": self.config_sha256,
            "params": self.params,
            "tolerances": self.tolerances,
            "artifacts": sorted(self.artifacts, key=lambda a: a["path"]),
            "timing_seconds": self.timing,
            "versions": {"orbiflow": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
        }

    def finish(self) -> Path:
        path = self.out_dir / "manifest.json"
        path.write_text(dump_json(self.to_dict()))
        return path


def _load_scenario(args) -> tuple[sc_mod.Scenario, str]:
    if args.config:
        text = Path(args.config).read_text()
        scen = sc_mod.loads(text)
    else:
        name = args.scenario
        if name is None:
            raise UsageError("one of --scenario or --config is required")
        try:
            scen = sc_mod.builtin(name)
        except KeyError:
            raise UsageError(f"unknown scenario {name!r}; known: {', '.join(sc_mod.names())}") from None
        text = sc_mod.dumps(scen)
    return scen, hashlib.sha256(text.encode()).hexdigest()


def _params(scen: sc_mod.Scenario, args) -> dict:
    p = scen.params
    step = args.step if args.step is not None else p.step
    return {
        "resolution": args.resolution if args.resolution is not None else p.resolution,
        "T_edge": args.T if args.T is not None else p.T_edge,
        "delta": args.delta,
        "samples": args.samples if args.samples is not None else p.samples,
        "step": step,
        "seed": args.seed,
    }


def _start(command: str, args) -> tuple[sc_mod.Scenario, dict, RunManifest]:
    scen, digest = _load_scenario(args)
    params = _params(scen, args)
    out = Path(args.out_dir) if args.out_dir else Path("orbiflow-out") / scen.name / command
    out.mkdir(parents=True, exist_ok=True)
    tol = {"sign_margin": SIGN_MARGIN, "vanish_tol": VANISH_TOL}
    return scen, params, RunManifest(command, scen.name, digest, params, tol, out)


def _build(scen: sc_mod.Scenario, params: dict, man: RunManifest):
    graph = build_graph(scen.field, scen.cls, params["resolution"], params["T_edge"], delta=params["delta"],
                        samples=params["samples"], step=params["step"], seed=params["seed"])
    # the graph fills in delta and w_tol; record what was used
    man.params.update(graph.params.to_dict())
    man.tolerances["w_tol"] = graph.params.w_tol
    man.lap("build_graph")
    return graph


def _expect(man: RunManifest, computed: dict, expected: dict) -> dict:
    rows = {k: {"computed": computed[k], "expected": expected[k], "match": computed[k] == expected[k]}
            for k in computed}
    man.write("expected_check.json", dump_json({"report_version": REPORT_VERSION, "flags": rows}))
    return rows


def _components_summary(cover, nodes) -> list[dict]:
    out = []
    for comp in cover.components(nodes):
        out.append({"boxes": int(len(comp)), "center": cover.node_centers[comp].mean(axis=0)})
    return sorted(out, key=lambda c: (-c["boxes"], list(c["center"])))


def cmd_recurrence(args) -> int:
    scen, params, man = _start("recurrence", args)
    graph = _build(scen, params, man)
    R = chain_recurrent_set(graph)
    report = xi_recurrent_split(graph, R)
    man.lap("split")
    cover = graph.cover
    body = {
        "report_version": REPORT_VERSION,
        "scenario": scen.name,
        "n_boxes": cover.n_nodes,
        "n_edges": graph.n_edges,
        "box_diameter": cover.diameter,
        "recurrence": report.to_json(),
        "counts": {"R": len(report.R_boxes), "Rxi": len(report.Rxi_boxes), "Cxi": len(report.Cxi_boxes)},
        "Rxi_components": _components_summary(cover, report.Rxi_boxes),
        "Cxi_components": _components_summary(cover, report.Cxi_boxes),
    }
    man.write("recurrence.json", dump_json(body))
    if cover.dim == 2:
        layers = {"Cxi": (report.Cxi_boxes, "#1f77b4"), "Rxi": (report.Rxi_boxes, "#d62728")}
        man.write("boxes.svg", box_overlay(cover, layers, f"{scen.name}: R split at resolution {cover.resolution}"))
    cache = man.out_dir / "graph.oflg"
    save_graph(graph, cache)
    man.record(cache)
    man.record(Path(str(cache) + ".json"))
    man.lap("write")
    code = EXIT_OK
    if args.check_expected:
        rows = _expect(man, {"Cxi_closed": report.Cxi_closed, "condition_b": report.condition_b_holds},
                       {"Cxi_closed": scen.expected.Cxi_closed, "condition_b": scen.expected.condition_b})
        if not all(r["match"] for r in rows.values()):
            code = EXIT_MISMATCH
    man.finish()
    print(f"R={len(report.R_boxes)} Rxi={len(report.Rxi_boxes)} Cxi={len(report.Cxi_boxes)} "
          f"Cxi_closed={report.Cxi_closed} condition_b={report.condition_b_holds} -> {man.out_dir}")
    return code


MEASURE_HELP = ("uniform | ulam | ulam:R | ulam:Rxi | ulam:Cxi | dirac:x,y,... "
                "(Ulam measures are restricted to the named box set)")


def _point(text: str, dim: int) -> np.ndarray:
    try:
        p = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"bad point {text!r}") from None
    if p.size != dim:
        raise UsageError(f"point {text!r} must have {dim} coordinates")
    return np.mod(p, 1.0)


def parse_measure(spec: str, dim: int) -> tuple[str, object]:
    """Split a measure spec into (kind, argument); raises UsageError on anything else."""
    spec = spec.strip()
    if spec in ("uniform", "ulam"):
        return spec, None
    if spec.startswith("ulam:"):
        part = spec[5:]
        if part not in ("R", "Rxi", "Cxi"):
            raise UsageError(f"invalid measure spec {spec!r}: {MEASURE_HELP}")
        return "ulam", part
    if spec.startswith("dirac:"):
        return "dirac", _point(spec[6:], dim)
    raise UsageError(f"invalid measure spec {spec!r}: {MEASURE_HELP}")


def _measure(graph, kind: str, arg) -> tuple[np.ndarray, np.ndarray | None]:
    n = graph.n_nodes
    if kind == "uniform":
        return np.full(n, 1.0 / n), None
    if kind == "dirac":
        mu = np.zeros(n)
        mu[int(graph.cover.node_of_point(arg[None, :])[0])] = 1.0
        return mu, None
    restrict = None
    if arg is not None:
        report = xi_recurrent_split(graph)
        restrict = {"R": report.R_boxes, "Rxi": report.Rxi_boxes, "Cxi": report.Cxi_boxes}[arg]
        if len(restrict) == 0:
            raise UsageError(f"the box set {arg} is empty for this scenario")
    return ulam_measure(graph, restrict_to=restrict), restrict


def cmd_asymptotic(args) -> int:
    scen, params, man = _start("asymptotic", args)
    kind, arg = parse_measure(args.measure, scen.presentation.dim)
    man.params.update(measure=args.measure, horizon=args.horizon)
    graph = _build(scen, params, man)
    mu, restrict = _measure(graph, kind, arg)
    ulam_pairing = asymptotic_pairing(graph, mu)
    man.lap("measure")
    if args.point is not None:
        x0 = _point(args.point, scen.presentation.dim)
    elif kind == "dirac":
        x0 = arg
    else:
        x0 = graph.cover.node_centers[int(np.argmax(mu))]
    man.params["point"] = x0
    birk = birkhoff_average(scen.field, scen.form, x0, args.horizon, params["step"])
    man.lap("birkhoff")
    body = {
        "report_version": REPORT_VERSION,
        "scenario": scen.name,
        "measure": args.measure,
        "support_boxes": int(np.count_nonzero(mu > 0)),
        "stationarity_residual": stationarity_residual(graph, mu, restrict) if kind != "dirac" else None,
        "ulam_pairing": ulam_pairing,
        "trajectory": {"start": x0, "horizon": args.horizon, "step": params["step"]},
        "birkhoff_average": birk,
        "difference": birk - ulam_pairing,
        "sign": "negative" if ulam_pairing < 0 else ("zero" if ulam_pairing == 0 else "positive"),
    }
    man.write("asymptotic.json", dump_json(body))
    man.finish()
    print(f"ulam={ulam_pairing:.6g} birkhoff={birk:.6g} difference={birk - ulam_pairing:.3g} -> {man.out_dir}")
    return EXIT_OK


def _refusal(man: RunManifest, scen, exc: ConstructionRefused) -> None:
    man.write("refusal.json", dump_json({
        "report_version": REPORT_VERSION, "scenario": scen.name,
        "code": exc.code, "message": exc.message, "witness": exc.witness}))


def cmd_lyapunov(args) -> int:
    scen, params, man = _start("lyapunov", args)
    man.params["force"] = bool(args.force)
    graph = _build(scen, params, man)
    report = xi_recurrent_split(graph)
    man.lap("split")
    exists, code = False, EXIT_OK
    try:
        cert = construct_lyapunov_form(graph, report, force=args.force)
    except ConstructionRefused as exc:
        man.lap("construct")
        _refusal(man, scen, exc)
        print(f"refused: {exc.code}: {exc.message}")
        code = EXIT_REFUSED
    else:
        man.lap("construct")
        body = json.loads(cert.to_json())
        body.update(report_version=REPORT_VERSION, scenario=scen.name, passed=cert.passed)
        man.write("certificate.json", dump_json(body))
        if graph.cover.dim == 2:
            k = 64
            axis = (np.arange(k) + 0.5) / k
            mesh = np.stack([m.ravel() for m in np.meshgrid(axis, axis, indexing="ij")], axis=1)
            man.write("levels.svg", heatmap(cert.L.value(mesh).reshape(k, k), f"{scen.name}: L"))
        man.lap("write")
        exists = cert.passed
        code = EXIT_OK if cert.passed else EXIT_VERIFY
        print(f"certificate {'passed' if cert.passed else 'FAILED'} a={cert.a_used:.4g} -> {man.out_dir}")
    if args.check_expected:
        rows = _expect(man, {"lyapunov_exists": exists}, {"lyapunov_exists": scen.expected.lyapunov_exists})
        code = EXIT_OK if rows["lyapunov_exists"]["match"] else EXIT_MISMATCH
    man.finish()
    return code


def read_form_file(path, presentation) -> BasicOneForm:
    """One combinator expression per line (component i on line i); '#' starts a comment."""
    comps = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            comps.append(parse(line))
    if len(comps) != presentation.dim:
        raise ValidationError(f"form file has {len(comps)} components, expected {presentation.dim}")
    return BasicOneForm(presentation, comps, label=Path(path).name)


def _y_points(spec: str | None, scen) -> np.ndarray:
    """'scenario' uses the scenario's Y samples; otherwise a JSON list of points or a file holding one."""
    if spec is None or spec == "scenario":
        return scen.y_samples(512)
    text = Path(spec).read_text() if Path(spec).is_file() else spec
    try:
        pts = np.atleast_2d(np.array(json.loads(text), dtype=float))
    except (ValueError, TypeError):
        raise UsageError(f"bad Y spec {spec!r}: expected 'scenario', a JSON list of points or a file") from None
    if pts.size == 0:
        return np.zeros((0, scen.presentation.dim))
    if pts.shape[1] != scen.presentation.dim:
        raise UsageError("Y points have the wrong dimension")
    return np.concatenate([scen.presentation.images(p) for p in pts])


def cmd_verify(args) -> int:
    from .boxes import BoxCover

    scen, params, man = _start("verify", args)
    form = read_form_file(args.form, scen.presentation)
    form.validate()
    man.params.update(form_sha256=_sha256(Path(args.form)), y=args.y or "scenario", u_width=args.u_width)
    cover = BoxCover(scen.presentation, params["resolution"])
    ys = _y_points(args.y, scen)
    Yb = boxes_near(cover, ys)
    U = cover.fatten(Yb, args.u_width * cover.diameter) if len(Yb) else Yb
    rep = verify_lyapunov(scen.field, form, cover, Yb, U, y_samples=ys)
    man.lap("verify")
    man.write("verify.json", dump_json({"report_version": REPORT_VERSION, "scenario": scen.name,
                                        "form": form.sexprs(), "Y_boxes": len(Yb), "U_boxes": len(U),
                                        **rep.to_dict()}))
    man.finish()
    for c in rep.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_scenarios(args) -> int:
    if args.action == "list":
        for name in sc_mod.names():
            print(f"{name}: {sc_mod.builtin(name).description}")
        return EXIT_OK
    if not args.name:
        raise UsageError("scenarios show needs a name")
    try:
        sys.stdout.write(sc_mod.dumps(sc_mod.builtin(args.name)))
    except KeyError:
        raise UsageError(f"unknown scenario {args.name!r}") from None
    return EXIT_OK


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", help="builtin scenario name (see 'scenarios list')")
    p.add_argument("--config", help="scenario config file (overrides --scenario)")
    p.add_argument("--resolution", type=int, help="boxes per unit length")
    p.add_argument("--T", type=float, help="flow time per graph edge")
    p.add_argument("--delta", type=float, help="jump radius (default: just above the box diameter)")
    p.add_argument("--step", type=float, help="RK4 step")
    p.add_argument("--samples", type=int, help="seed points per box")
    p.add_argument("--seed", type=int, default=0, help="seed of the scrambled Sobol points")
    p.add_argument("--out-dir", help="output directory (default orbiflow-out/<scenario>/<command>)")
    p.add_argument("--check-expected", action="store_true",
                   help="exit 6 unless the computed flags match the scenario's expected flags")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orbiflow", description=__doc__.split("\n\n")[0],
                                     epilog="exit codes: 0 ok, 1 internal, 2 usage, 3 invalid input, 4 scale, "
                                            "5 refused, 6 expected-flag mismatch, 7 verification failed, "
                                            "8 no convergence")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("recurrence", help="chain recurrent set and its split by the class")
    _common(p)
    p.set_defaults(func=cmd_recurrence)
    p = sub.add_parser("asymptotic", help="Ulam and trajectory pairings with the class")
    _common(p)
    p.add_argument("--measure", default="ulam", help=MEASURE_HELP)
    p.add_argument("--point", help="trajectory start x,y,... (default: heaviest box of the measure)")
    p.add_argument("--horizon", type=float, default=100.0, help="trajectory length")
    p.set_defaults(func=cmd_asymptotic)
    p = sub.add_parser("lyapunov", help="construct and verify a Lyapunov 1-form")
    _common(p)
    p.add_argument("--force", action="store_true", help="attempt sign correction even if condition (b) fails")
    p.set_defaults(func=cmd_lyapunov)
    p = sub.add_parser("verify", help="check a user-supplied 1-form")
    _common(p)
    p.add_argument("--form", required=True, help="file with one combinator expression per component")
    p.add_argument("--y", help="'scenario' (default), a JSON list of points, or a file holding one")
    p.add_argument("--u-width", type=float, default=1.0, help="U = Y boxes fattened by this many diameters")
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("scenarios", help="list or show builtin scenarios")
    p.add_argument("action", choices=["list", "show"])
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_scenarios)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"orbiflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScaleError as exc:
        print(f"orbiflow: scale error: {exc}", file=sys.stderr)
        return EXIT_SCALE
    except ConvergenceError as exc:
        print(f"orbiflow: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ValidationError, ValueError, OSError) as exc:
        print(f"orbiflow: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
