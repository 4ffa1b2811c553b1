"""Command-line front end: generators, reports, pipelines and sweeps."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cliques import CliqueParams, PipelineFailure, exhaust_cliques, extract_clique, find_sheaf_rectangle
from .gen import cantor_set, cantor_tubes, random_family, sheaf_config
from .grid import DomainError, ScaleMismatch
from .incidence import TwoEndsViolation, fu_ren_check, incidences
from .sets import CellFamily, DualCellFamily, FamilyFormatError, delta_s_constant, katz_tao_constant, load_family, save_family
from .structure import NonConcentrationError, uniformize

EXIT_OK, EXIT_INVALID, EXIT_PIPELINE = 0, 2, 3

log = logging.getLogger("incidence_lab")


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _digest(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load(path: str, kind: str):
    try:
        F = load_family(path)
    except FamilyFormatError as exc:
        raise FamilyFormatError(f"{path}: {exc}") from None
    want = CellFamily if kind == "cell" else DualCellFamily
    if not isinstance(F, want):
        raise ValidationError(f"{path}: expected a {kind} family")
    return F


def _unit_range(name: str, v: float | None, required: bool = True) -> None:
    if v is None:
        if required:
            raise ValidationError(f"--{name} is required")
        return
    if not 0 < v <= 1:
        raise ValidationError(f"--{name}={v} must lie in (0, 1]")


def _params_override(raw: str | None) -> dict:
    if raw is None:
        return {}
    text = Path(raw).read_text() if os.path.exists(raw) else raw
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"--params: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ValidationError("--params must be a JSON object")
    return obj


def _clique_params(args) -> CliqueParams:
    try:
        return CliqueParams.from_json(_params_override(args.params))
    except TypeError as exc:
        raise ValidationError(f"--params: {exc}") from None


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _report(args, command: str, params: dict, inputs: list[str], result: dict) -> dict:
    return {
        "tool": "incidence-lab",
        "version": __version__,
        "command": command,
        "params": params,
        "inputs": {p: _digest(p) for p in inputs},
        "result": result,
    }


def _emit(args, report: dict, name: str = "report.json", extra: dict | None = None) -> None:
    """Write the JSON report (plus side files) under --out, or the report to stdout."""
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(_dumps(report))
        for fname, content in (extra or {}).items():
            if isinstance(content, (CellFamily, DualCellFamily)):
                save_family(content, out / fname)
            else:
                (out / fname).write_text(content)
    else:
        sys.stdout.write(_dumps(report))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    m, seed = args.m, args.seed
    if m is None or m < 1:
        raise ValidationError("--m must be a positive integer")
    if not args.out:
        raise ValidationError("gen requires --out")
    files: dict = {}
    params = {"kind": args.kind, "m": m, "seed": seed}
    if args.kind == "sheaf":
        _unit_range("s", args.s)
        _unit_range("t", args.t)
        cfg = sheaf_config(args.s, args.t, m, seed=seed, n_cliques=args.cliques)
        files = {"P.txt": cfg.P, "L.txt": cfg.L, "labels.json": cfg.dumps_labels() + "\n"}
        params.update(s=args.s, t=args.t, cliques=cfg.N)
        result = {"P_size": len(cfg.P), "L_size": len(cfg.L), "k": cfg.k, "N": cfg.N, "K_P": cfg.K_P, "K_L": cfg.K_L}
    elif args.kind == "cantor":
        if args.s is None or not 0 <= args.s <= 2:
            raise ValidationError("--s must lie in [0, 2] for cantor")
        P = cantor_set(m, args.s, args.H, seed=seed if args.shuffle else None)
        files = {"P.txt": P}
        params.update(s=args.s, H=args.H, shuffle=args.shuffle)
        result = {"P_size": len(P), "K_P": katz_tao_constant(P, args.s).best_constant}
        if args.t is not None:
            L = cantor_tubes(m, args.t, args.H, seed=seed + 1 if args.shuffle else None)
            files["L.txt"] = L
            params["t"] = args.t
            result.update(L_size=len(L), K_L=katz_tao_constant(L, args.t).best_constant)
    else:
        if args.count is None:
            raise ValidationError("random requires --count")
        P = random_family(m, args.count, seed, "cell")
        L = random_family(m, args.count, seed + 1, "dual")
        files = {"P.txt": P, "L.txt": L}
        params["count"] = args.count
        result = {"P_size": len(P), "L_size": len(L)}
    _emit(args, _report(args, "gen", params, [], result), extra=files)
    return EXIT_OK


def cmd_verify(args) -> int:
    F = load_family(args.family)
    if args.s is None or not 0 <= args.s <= 2:
        raise ValidationError("--s must lie in [0, 2]")
    kt = katz_tao_constant(F, args.s)
    ds = delta_s_constant(F, args.s)
    result = {"katz_tao": kt.to_json(), "delta_s": ds.to_json()}
    if args.C is not None:
        result["katz_tao_ok"] = kt.best_constant <= args.C
        result["delta_s_ok"] = ds.best_constant <= args.C
    rep = _report(args, "verify", {"s": args.s, "C": args.C}, [args.family], result)
    _emit(args, rep)
    return EXIT_OK


def cmd_count(args) -> int:
    P, L = _load(args.P, "cell"), _load(args.L, "dual")
    inc = incidences(P, L, method=args.method)
    print(inc.count)
    if args.out:
        rep = _report(args, "count", {"method": args.method}, [args.P, args.L],
                      {"incidences": inc.count, "P_size": len(P), "L_size": len(L)})
        _emit(args, rep, extra={"per_tube.csv": inc.per_tube_csv()})
    return EXIT_OK


def cmd_bound(args) -> int:
    _unit_range("s", args.s)
    _unit_range("t", args.t)
    P, L = _load(args.P, "cell"), _load(args.L, "dual")
    b = fu_ren_check(P, L, args.s, args.t, eps=args.eps, K_P=args.K_P, K_L=args.K_L)
    params = {"s": args.s, "t": args.t, "eps": args.eps, "K_P": args.K_P, "K_L": args.K_L}
    _emit(args, _report(args, "bound", params, [args.P, args.L], b.to_json()))
    return EXIT_OK


def _clique_result(rep, trace: bool) -> dict:
    out = rep.to_json()
    if not trace:
        out.pop("trace", None)
        if "dual_report" in out:
            out["dual_report"].pop("trace", None)
    return out


def cmd_clique(args) -> int:
    for n in ("s", "t", "u"):
        _unit_range(n, getattr(args, n))
    params = _clique_params(args)
    P, L = _load(args.P, "cell"), _load(args.L, "dual")
    rep = extract_clique(P, L, args.s, args.t, args.u, params)
    if args.trace:
        for step in rep.trace:
            log.warning("trace %s", json.dumps(step, sort_keys=True))
    resolved = {"s": args.s, "t": args.t, "u": args.u, "clique": params.to_json()}
    report = _report(args, "clique", resolved, [args.P, args.L], _clique_result(rep, args.trace))
    _emit(args, report, extra={"P_clique.txt": rep.Pprime, "L_clique.txt": rep.Lprime})
    return EXIT_OK


def cmd_sheaf(args) -> int:
    _unit_range("theta", args.theta)
    P, L = _load(args.P, "cell"), _load(args.L, "dual")
    s = 1.0 if args.s is None else args.s
    t = 1.0 if args.t is None else args.t
    r = find_sheaf_rectangle(P, L, args.theta, s, t, args.C_rect)
    params = {"theta": args.theta, "s": s, "t": t, "C_rect": args.C_rect}
    _emit(args, _report(args, "sheaf", params, [args.P, args.L], r.to_json()))
    return EXIT_OK


def cmd_exhaust(args) -> int:
    for n in ("s", "t", "u"):
        _unit_range(n, getattr(args, n))
    params = _clique_params(args)
    P, L = _load(args.P, "cell"), _load(args.L, "dual")

    def progress(i, rep, residual):
        log.info("clique %d: |P'|=%d |L'|=%d theta=%.3f residual=%d", i, len(rep.Pprime), len(rep.Lprime), rep.theta, residual)

    ex = exhaust_cliques(P, L, args.s, args.t, args.u, params, progress=progress)
    result = ex.to_json()
    if args.trace:
        result["traces"] = [c.trace for c in ex.cliques]
    resolved = {"s": args.s, "t": args.t, "u": args.u, "clique": params.to_json()}
    _emit(args, _report(args, "exhaust", resolved, [args.P, args.L], result))
    return EXIT_OK


def cmd_uniformize(args) -> int:
    P = _load(args.P, "cell")
    if args.H < 1:
        raise ValidationError("--H must be >= 1")
    U = uniformize(P, args.H)
    result = {
        "size": len(U.family),
        "source_size": U.source_size,
        "retention": U.retention,
        "counts": list(U.counts),
    }
    _emit(args, _report(args, "uniformize", {"H": args.H}, [args.P], result), extra={"uniform.txt": U.family})
    return EXIT_OK


def cmd_branching(args) -> int:
    P = _load(args.P, "cell")
    if args.H < 1:
        raise ValidationError("--H must be >= 1")
    prof = uniformize(P, args.H).profile()
    rep = _report(args, "branching", {"H": args.H}, [args.P], prof.to_json())
    if args.out:
        _emit(args, rep, extra={"branching.csv": prof.to_csv(), "decomposition.csv": prof.decomposition_csv()})
    else:
        sys.stdout.write(prof.to_csv())
        sys.stdout.write(prof.decomposition_csv())
    return EXIT_OK


def _sweep_point(task: tuple) -> tuple:
    kind, s, t, m, seed = task
    if kind == "sheaf":
        cfg = sheaf_config(s, t, m, seed=seed)
        P, L = cfg.P, cfg.L
    else:
        P = cantor_set(m, s, 1, seed=seed)
        L = cantor_tubes(m, t, 1, seed=seed + 1)
    n = incidences(P, L).count
    return (m, seed, len(P), len(L), n)


def _fit(ms: list[int], counts: list[int]) -> tuple[float, float]:
    x = np.asarray(ms, float)
    y = np.log2(np.asarray(counts, float))
    slope, icpt = np.polyfit(x, y, 1)
    return float(slope), float(icpt)


def cmd_sweep(args) -> int:
    _unit_range("s", args.s)
    _unit_range("t", args.t)
    ms = sorted(set(args.ms))
    seeds = sorted(set(args.seeds))
    if len(ms) < 2:
        raise ValidationError("sweep needs at least two values of m")
    if any(m < 4 for m in ms):
        raise ValidationError("sweep values of m must be >= 4")
    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    tasks = [(args.kind, args.s, args.t, m, seed) for m in ms for seed in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_point, tasks))
    else:
        rows = [_sweep_point(task) for task in tasks]
    rows.sort()
    lines = ["m,seed,P,L,incidences,log2_incidences"]
    for m, seed, np_, nl, n in rows:
        lines.append(f"{m},{seed},{np_},{nl},{n},{math.log2(n) if n else float('-inf'):.6f}")
    fits = ["seed,slope,intercept,points"]
    for seed in seeds:
        sel = [r for r in rows if r[1] == seed and r[4] > 0]
        if len(sel) >= 2:
            sl, ic = _fit([r[0] for r in sel], [r[4] for r in sel])
            fits.append(f"{seed},{sl:.6f},{ic:.6f},{len(sel)}")
    sel = [r for r in rows if r[4] > 0]
    slope, icpt = _fit([r[0] for r in sel], [r[4] for r in sel])
    fits.append(f"all,{slope:.6f},{icpt:.6f},{len(sel)}")
    params = {"kind": args.kind, "s": args.s, "t": args.t, "ms": ms, "seeds": seeds}
    result = {"slope": slope, "intercept": icpt, "points": len(sel)}
    csv_points = "\n".join(lines) + "\n"
    csv_fit = "\n".join(fits) + "\n"
    if args.out:
        _emit(args, _report(args, "sweep", params, [], result),
              extra={"sweep.csv": csv_points, "fit.csv": csv_fit})
    else:
        sys.stdout.write(csv_points)
        sys.stdout.write(csv_fit)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--s", type=float)
    common.add_argument("--t", type=float)
    common.add_argument("--u", type=float)
    common.add_argument("--m", type=int)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--params", help="JSON object (inline or path) of parameter overrides")
    common.add_argument("--out", help="output directory")
    common.add_argument("--trace", action="store_true")
    common.add_argument("--jobs", type=int, default=1)

    p = argparse.ArgumentParser(prog="incidence-lab", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write generated families")
    g.add_argument("kind", choices=["sheaf", "cantor", "random"])
    g.add_argument("--cliques", type=int, help="number of planted cliques (sheaf)")
    g.add_argument("--H", type=int, default=1, help="block size (cantor)")
    g.add_argument("--count", type=int, help="family size (random)")
    g.add_argument("--shuffle", action="store_true", help="seeded child choice (cantor)")
    g.set_defaults(func=cmd_gen)

    v = sub.add_parser("verify", parents=[common], help="Katz-Tao and (delta,s) constants")
    v.add_argument("family")
    v.add_argument("--C", type=float, help="constant to test against")
    v.set_defaults(func=cmd_verify)

    def pair(name, func, helptext):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("P", help="cell family file")
        sp.add_argument("L", help="tube family file")
        sp.set_defaults(func=func)
        return sp

    c = pair("count", cmd_count, "count incidences")
    c.add_argument("--method", choices=["sweep", "dual", "brute"], default="sweep")
    b = pair("bound", cmd_bound, "evaluate the Fu-Ren inequality")
    b.add_argument("--eps", type=float, default=0.05)
    b.add_argument("--K-P", dest="K_P", type=float)
    b.add_argument("--K-L", dest="K_L", type=float)
    pair("clique", cmd_clique, "extract one clique")
    sh = pair("sheaf", cmd_sheaf, "locate the sheaf rectangle of a clique")
    sh.add_argument("--theta", type=float, required=True)
    sh.add_argument("--C-rect", dest="C_rect", type=float, default=4.0)
    pair("exhaust", cmd_exhaust, "exhaust a configuration by cliques")

    for name, func, helptext in (
        ("uniformize", cmd_uniformize, "largest greedy uniform subset"),
        ("branching", cmd_branching, "branching profile and slope decomposition"),
    ):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("P")
        sp.add_argument("--H", type=int, default=1)
        sp.set_defaults(func=func)

    sw = sub.add_parser("sweep", parents=[common], help="incidence exponent fit over m and seeds")
    sw.add_argument("--kind", choices=["sheaf", "cantor"], default="sheaf")
    sw.add_argument("--ms", type=_int_list, default=[8, 10, 12])
    sw.add_argument("--seeds", type=_int_list, default=[0])
    sw.set_defaults(func=cmd_sweep)
    return p


def _setup_logging() -> None:
    level = os.environ.get("INCIDENCE_LAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FamilyFormatError as exc:
        print(f"error: malformed family: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ScaleMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValidationError, DomainError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: cannot read {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_INVALID
    except (PipelineFailure, NonConcentrationError, TwoEndsViolation) as exc:
        print(f"error: pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
