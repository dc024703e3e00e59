"""Command-line front end: ``pmp list | integrate | shadow | check | bvp``.

Exit codes are stable: 0 success, 1 check failure, 2 runtime error,
3 oscillating verdict. JSON on stdout is sorted and carries no timestamps,
so identical invocations give byte-identical output; timestamps go to the
``run.log`` sidecar in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import registry
from .bvp import build_avav_system, richardson, shoot, system_from_dict, verify_solution, write_solution_csv
from .errors import TauPmpError
from .ode import IntegratorConfig, adjoint_via_cauchy, integrate_bundle, write_bundle_csv
from .pmp import check_pmp, monotone_report, report_to_dict
from .problem import TauSequence, load_problem
from .shadow import BallSpec, run_shadow, sample_I, verdict_to_dict, write_evidence_csv

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_RUNTIME = 2
EXIT_OSCILLATING = 3

EMPTY_REGISTRY_ENV = "TAUPMP_EMPTY_REGISTRY"

# flag defaults, applied after the config file (flags > file > defaults)
DEFAULTS = {
    "tau": None,
    "ball_radius": 1e-3,
    "ball_levels": 3,
    "rtol": 1e-8,
    "atol": 1e-10,
    "eps_conv": 1e-4,
    "M_div": 1e6,
    "out": None,
    "format": "both",
    "t_end": 10.0,
    "xi": None,
    "multiplier": None,
    "index": 0,
    "known": False,
    "nu": 0.0,
    "sigma": 0.5,
    "b": 0.375,
    "K0": 1.0,
    "g": registry.AVAV_DEFAULT_WEIGHT,
    "h": registry.AVAV_DEFAULT_WEIGHT,
    "lo": None,
    "hi": None,
    "Tmax": "200",
    "tol": 1e-8,
}

log = logging.getLogger("taupmp.cli")
log.addHandler(logging.NullHandler())


class CliError(Exception):
    """Runtime failure reported with exit code 2."""


# ---------------------------------------------------------------------------
# Helpers


def _clean(obj):
    """JSON-safe copy: numpy to Python, non-finite floats to ``None``."""
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
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(payload) -> str:
    return json.dumps(_clean(payload), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _floats(text: str) -> list[float]:
    return [float(s) for s in str(text).split(",") if s.strip()]


def parse_tau(spec) -> TauSequence | None:
    """``None``, a comma list, ``geometric:t0,ratio,n`` or a list of numbers."""
    if spec is None:
        return None
    if isinstance(spec, (list, tuple)):
        return TauSequence.explicit([float(v) for v in spec])
    spec = str(spec).strip()
    if spec.startswith("geometric"):
        _, _, rest = spec.partition(":")
        args = _floats(rest) if rest else []
        t0 = args[0] if len(args) > 0 else 5.0
        ratio = args[1] if len(args) > 1 else 2.0
        n = int(args[2]) if len(args) > 2 else 6
        return TauSequence.geometric(t0, ratio, n)
    return TauSequence.explicit(_floats(spec))


def load_ref(ref: str):
    """``(problem, law, known)`` for a builtin URI or a problem file."""
    if ref.startswith("builtin:"):
        if os.environ.get(EMPTY_REGISTRY_ENV):
            raise CliError("builtin problems are disabled in this build")
        return registry.get_builtin(ref)
    p, law = load_problem(ref)
    if law is None:
        raise CliError(f"problem file {ref} declares no control law")
    return p, law, None


def _merge(args: argparse.Namespace) -> dict:
    """Flags over config file over defaults."""
    conf = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            conf = json.load(fh)
        if not isinstance(conf, dict):
            raise CliError("config file must hold a JSON object")
    out = {}
    for key, default in DEFAULTS.items():
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            out[key] = flag
        elif key in conf:
            out[key] = conf[key]
        else:
            out[key] = default
    out["problem"] = getattr(args, "problem", None) or conf.get("problem")
    return out


def _cfg(opts: dict) -> IntegratorConfig:
    return IntegratorConfig(rel_tol=float(opts["rtol"]), abs_tol=float(opts["atol"]))


def _outdir(opts: dict) -> Path | None:
    if not opts["out"]:
        return None
    d = Path(opts["out"])
    d.mkdir(parents=True, exist_ok=True)
    if not os.access(d, os.W_OK):
        raise CliError(f"output directory {d} is not writable")
    handler = logging.FileHandler(d / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return d


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_list(args) -> int:
    rows = [] if os.environ.get(EMPTY_REGISTRY_ENV) else registry.describe()
    if args.json:
        sys.stdout.write(dumps(rows))
        return EXIT_OK
    w = max([4] + [len(r["name"]) for r in rows])
    pw = max([6] + [len(r["params"]) for r in rows])
    sys.stdout.write(f"{'name':<{w}}  {'params':<{pw}}  problem\n")
    for r in rows:
        sys.stdout.write(f"{r['name']:<{w}}  {r['params']:<{pw}}  {r['problem']}\n")
    return EXIT_OK


def cmd_integrate(args) -> int:
    opts = _merge(args)
    if not opts["problem"]:
        raise CliError("no problem given")
    p, law, _ = load_ref(opts["problem"])
    out = _outdir(opts)
    xi = None if opts["xi"] is None else np.array(_floats(opts["xi"]))
    b = integrate_bundle(p, law, xi, float(opts["t_end"]), _cfg(opts))
    payload = {
        "problem": p.name,
        "t_end": b.t_end,
        "nodes": int(b.grid.size),
        "x_end": b.x_path[-1],
        "I_end": b.I_path[-1],
        "J_end": b.J_path[-1],
        "inverse_defect": b.inverse_defect(),
        "breakpoints": list(b.breakpoints),
    }
    text = dumps(payload)
    sys.stdout.write(text)
    if out is not None:
        if opts["format"] in ("json", "both"):
            _write(out / "bundle.json", text)
        if opts["format"] in ("csv", "both"):
            write_bundle_csv(b, out / "bundle.csv")
            log.info("wrote %s", out / "bundle.csv")
    return EXIT_OK


def _failed_rows(table) -> list[str]:
    # messages already start with "xi=[...]"
    return [f"integration failed for {msg}" for _, msg in sorted(table.errors.items())]


def cmd_shadow(args) -> int:
    opts = _merge(args)
    if not opts["problem"]:
        raise CliError("no problem given")
    p, law, _ = load_ref(opts["problem"])
    out = _outdir(opts)
    tau = parse_tau(opts["tau"])
    levels = int(opts["ball_levels"])
    ball = BallSpec(float(opts["ball_radius"]), levels) if levels > 0 else None
    log.info("shadow %s tau=%s", opts["problem"], None if tau is None else tau.values)
    try:
        run = run_shadow(
            p, law, tau, ball, _cfg(opts), float(opts["eps_conv"]), float(opts["M_div"])
        )
    except TauPmpError as exc:
        if isinstance(exc, (ArithmeticError, RuntimeError)):
            m = p.state_dim
            raise CliError(f"integration failed for xi={[0.0] * m} (nominal): {exc}") from exc
        raise
    failures = _failed_rows(run.verdict.evidence)
    if failures:
        for line in failures:
            log.error(line)
        raise CliError("; ".join(failures))
    payload = verdict_to_dict(run.verdict, run.multipliers)
    text = dumps(payload)
    sys.stdout.write(text)
    if out is not None:
        if opts["format"] in ("json", "both"):
            _write(out / "verdict.json", text)
            mults = payload["multipliers"]
            _write(out / "multiplier.json", dumps(mults[0] if len(mults) == 1 else mults))
        if opts["format"] in ("csv", "both"):
            write_evidence_csv(run.verdict.evidence, out / "evidence.csv")
            log.info("wrote %s", out / "evidence.csv")
    log.info("verdict %s", run.verdict.kind)
    return EXIT_OSCILLATING if run.verdict.kind == "oscillating" else EXIT_OK


def _read_multiplier(path: str, index: int) -> tuple[float, np.ndarray, list | None]:
    """``(lambda, psi0, tau)`` from a multiplier file or a shadow verdict."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    tau = None
    if isinstance(doc, dict) and "evidence_table" in doc:
        tau = doc["evidence_table"].get("tau")
    if isinstance(doc, list):
        doc = doc[index]
    elif "lambda" not in doc and "multipliers" in doc:
        doc = doc["multipliers"][index]
    try:
        lam = float(doc["lambda"])
        psi0 = np.asarray(doc["psi0"], dtype=float)
    except (KeyError, TypeError) as exc:
        raise CliError(f"multiplier file {path} needs 'lambda' and 'psi0'") from exc
    return lam, psi0, tau


def cmd_check(args) -> int:
    opts = _merge(args)
    if not opts["problem"]:
        raise CliError("no problem given")
    p, law, known = load_ref(opts["problem"])
    out = _outdir(opts)
    file_tau = None
    if opts["multiplier"]:
        lam, psi0, file_tau = _read_multiplier(opts["multiplier"], int(opts["index"]))
    elif opts["known"]:
        if known is None or known.lam is None:
            raise CliError(f"no known multiplier for {opts['problem']}")
        lam = float(known.lam)
        psi0 = known.I_star if lam > 0 else known.iota_star
        psi0 = np.asarray(psi0, dtype=float)
    else:
        raise CliError("give --multiplier FILE or --known")
    if psi0.size != p.state_dim:
        raise CliError(f"psi0 has {psi0.size} entries, the state has {p.state_dim}")
    tau = parse_tau(opts["tau"] if opts["tau"] is not None else file_tau)
    tau = tau or TauSequence.geometric()
    tv = np.asarray(tau.values)
    cfg = _cfg(opts)
    bundle = integrate_bundle(p, law, None, float(tv[-1]), cfg, nodes=tv)
    path = adjoint_via_cauchy(bundle, psi0, lam)
    rep = check_pmp(p, bundle, law, path, tau)
    table = sample_I(p, law, tv, None, cfg, nominal=bundle)
    cone = monotone_report(p, bundle, law, path, table, float(opts["M_div"]))
    payload = {"pmp": report_to_dict(rep), "cone": report_to_dict(cone)}
    text = dumps(payload)
    sys.stdout.write(text)
    if out is not None:
        _write(out / "report.json", text)
    if rep.passed():
        return EXIT_OK
    reasons = []
    if rep.normalization_defect >= 1e-9:
        reasons.append(f"normalization defect {rep.normalization_defect:.3g}")
    if rep.max_residual >= 1e-5:
        reasons.append(f"maximum condition residual {rep.max_residual:.3g}")
    if rep.adjoint_residual >= 1e-5:
        reasons.append(f"adjoint residual {rep.adjoint_residual:.3g}")
    if rep.state_residual >= 1e-5:
        reasons.append(f"state residual {rep.state_residual:.3g}")
    if not rep.tau_consistent:
        reasons.append("multiplier inconsistent with tau (partlim_1 not met)")
    msg = "check failed: " + "; ".join(reasons)
    sys.stderr.write(msg + "\n")
    log.error(msg)
    return EXIT_CHECK_FAILED


def _shot_dict(r) -> dict:
    return {
        "T_max": r.T_max,
        "unknowns": r.unknowns,
        "init_values": r.init_values,
        "terminal_residual": r.terminal_residual,
        "iterations": r.iterations,
        "converged": r.converged,
        "tol": r.tol,
        "positivity_ok": r.positivity_ok,
        "infeasible_guesses": len(r.infeasible),
    }


def cmd_bvp(args) -> int:
    opts = _merge(args)
    target = opts["problem"]
    if not target:
        raise CliError("give 'avav' or a system file")
    out = _outdir(opts)
    if target == "avav":
        params = registry.validate_avav(
            {k: opts[k] for k in ("nu", "sigma", "b", "K0", "g", "h")}
        )
        sys_ = build_avav_system(
            params["nu"], params["sigma"], params["b"], params["K0"], params["g"], params["h"]
        )
        lo = opts["lo"] if opts["lo"] is not None else "0.01"
        hi = opts["hi"] if opts["hi"] is not None else "2"
    else:
        with open(target, encoding="utf-8") as fh:
            doc = json.load(fh)
        sys_ = system_from_dict(doc)
        search = doc.get("search", {})
        lo = opts["lo"] if opts["lo"] is not None else search.get("lo")
        hi = opts["hi"] if opts["hi"] is not None else search.get("hi")
        if lo is None or hi is None:
            raise CliError("system needs a search box (--lo/--hi or 'search' in the file)")
    search = {
        "lo": _floats(lo) if isinstance(lo, str) else lo,
        "hi": _floats(hi) if isinstance(hi, str) else hi,
    }
    horizons = _floats(opts["Tmax"]) if isinstance(opts["Tmax"], str) else list(opts["Tmax"])
    tol = float(opts["tol"])
    names = [f"z{i + 1}" for i in range(sys_.dim)]
    if sys_.name == "avav":
        names = ["x", "I"]
    if len(horizons) == 1:
        res = shoot(sys_, search, horizons[0], tol)
        unknowns, best = res.unknowns, res
        payload = {"system": sys_.name, "shot": _shot_dict(res)}
    elif len(horizons) == 3:
        rr = richardson(sys_, search, horizons, tol)
        unknowns, best = rr.extrapolated, rr.raw[-1]
        payload = {
            "system": sys_.name,
            "T_values": rr.T_values,
            "raw": [_shot_dict(r) for r in rr.raw],
            "raw_unknowns": rr.raw_unknowns(),
            "extrapolated": rr.extrapolated,
            "order": rr.order,
        }
    else:
        raise CliError("--Tmax takes one horizon or three increasing horizons")
    payload["unknowns"] = unknowns
    if sys_.name == "avav":
        payload["I0"] = float(unknowns[0])
    text = dumps(payload)
    sys.stdout.write(text)
    if out is not None:
        if opts["format"] in ("json", "both"):
            _write(out / "shoot.json", text)
        if opts["format"] in ("csv", "both"):
            v = verify_solution(sys_, best, t_check=best.T_max, unknowns=unknowns)
            cols = names + (["J"] if sys_.reward_rate is not None else [])
            write_solution_csv(v["solution"], out / "solution.csv", cols)
            log.info("wrote %s", out / "solution.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="JSON file with option values (flags override it)")
    sp.add_argument("--out", help="output directory for files and run.log")
    sp.add_argument("--format", choices=("json", "csv", "both"), help="files to write (default both)")
    sp.add_argument("--rtol", type=float, help="integrator relative tolerance (default 1e-8)")
    sp.add_argument("--atol", type=float, help="integrator absolute tolerance (default 1e-10)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pmp",
        description="Tau-vanishing shadow prices for infinite-horizon optimal control.",
        epilog="Exit codes: 0 ok, 1 check failed, 2 runtime error, 3 oscillating verdict.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("list", help="list builtin problems")
    sp.add_argument("--json", action="store_true", help="machine-readable array")
    sp.set_defaults(func=cmd_list)

    problem_help = "builtin:<name>?k=v&... or a problem JSON file"

    sp = sub.add_parser("integrate", help="integrate the trajectory bundle")
    sp.add_argument("problem", nargs="?", help=problem_help)
    sp.add_argument("--t-end", dest="t_end", type=float, help="horizon (default 10)")
    sp.add_argument("--xi", help="initial perturbation, comma separated")
    _common(sp)
    sp.set_defaults(func=cmd_integrate)

    sp = sub.add_parser("shadow", help="classify the limit and build the multiplier")
    sp.add_argument("problem", nargs="?", help=problem_help)
    sp.add_argument("--tau", help="comma list or geometric:t0,ratio,n (default geometric:5,2,6)")
    sp.add_argument("--ball-radius", dest="ball_radius", type=float, help="default 1e-3")
    sp.add_argument("--ball-levels", dest="ball_levels", type=int, help="default 3; 0 disables")
    sp.add_argument("--eps-conv", dest="eps_conv", type=float, help="default 1e-4")
    sp.add_argument("--M-div", dest="M_div", type=float, help="default 1e6")
    _common(sp)
    sp.set_defaults(func=cmd_shadow)

    sp = sub.add_parser("check", help="score a multiplier against the maximum principle")
    sp.add_argument("problem", nargs="?", help=problem_help)
    sp.add_argument("--multiplier", help="JSON with lambda and psi0, or a shadow verdict")
    sp.add_argument("--index", type=int, help="multiplier index in a multi-multiplier file")
    sp.add_argument("--known", action="store_true", help="use the builtin closed-form multiplier")
    sp.add_argument("--tau", help="comma list or geometric:t0,ratio,n")
    sp.add_argument("--M-div", dest="M_div", type=float, help="default 1e6")
    _common(sp)
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("bvp", help="shoot for the unknown initial adjoint")
    sp.add_argument("problem", nargs="?", help="'avav' or a closed-system JSON file")
    sp.add_argument("--nu", type=float)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--b", type=float)
    sp.add_argument("--K0", type=float)
    sp.add_argument("--g", help="reward weight g(t) in the DSL")
    sp.add_argument("--h", help="cost weight h(t) in the DSL")
    sp.add_argument("--lo", help="search lower bound(s), comma separated")
    sp.add_argument("--hi", help="search upper bound(s), comma separated")
    sp.add_argument("--Tmax", help="one horizon, or three for extrapolation (e.g. 100,200,400)")
    sp.add_argument("--tol", type=float, help="shooting tolerance (default 1e-8)")
    _common(sp)
    sp.set_defaults(func=cmd_bvp)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, TauPmpError, OSError, ValueError, KeyError) as exc:
        msg = f"error: {type(exc).__name__}: {exc}"
        sys.stderr.write(msg + "\n")
        log.error(msg)
        return EXIT_RUNTIME
    finally:
        for h in list(log.handlers):
            if isinstance(h, logging.FileHandler):
                log.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
