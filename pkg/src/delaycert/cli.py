"""``delaycert`` command line.

Exit codes: 0 certified / succeeded, 1 not certified, 2 error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .dual_lmi import (
    XI_POLICIES,
    NoSignChange,
    ParameterizedFamily,
    assemble,
    certify,
    default_epsilon,
    margin_bisection,
)
from .operators import DelaySystem
from .oracle import spectral_abscissa
from .sdp import BACKENDS, SolverConfig, to_sdpa_sparse

SPEC_SCHEMA_ID = "delaycert.system/1"
REPORT_SCHEMA_ID = "delaycert.report/1"

EXIT_OK, EXIT_NOT_CERTIFIED, EXIT_ERROR = 0, 1, 2

_matrix = {
    "type": "array",
    "minItems": 1,
    "items": {"type": "array", "minItems": 1, "items": {"type": "number"}},
}

SPEC_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema", "n", "delays", "matrices"],
    "properties": {
        "schema": {"const": SPEC_SCHEMA_ID},
        "name": {"type": "string"},
        "n": {"type": "integer", "minimum": 1},
        "delays": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "matrices": {"type": "array", "minItems": 1, "items": _matrix},
        "family": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["delay-scale", "matrix"]},
                "parameter": {"type": "string"},
                "directions": {"type": "array", "items": _matrix},
                "lo": {"type": "number"},
                "hi": {"type": "number"},
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "degree": {"type": "integer", "minimum": 1},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "path": {"enum": ["auto", "single", "multi"]},
                "cone_degrees": {"enum": list(XI_POLICIES)},
            },
        },
    },
}


class SpecError(Exception):
    pass


# ---------------------------------------------------------------------------
# Spec loading


def _line_of(text: str, path) -> int:
    """Best-effort 1-based line of the JSON location ``path``."""
    keys = [p for p in path if isinstance(p, str)]
    if not keys:
        return 1
    lines = text.splitlines()
    start = 0
    for key in keys:
        needle = f'"{key}"'
        for k in range(start, len(lines)):
            if needle in lines[k]:
                start = k
                break
    return start + 1


def load_spec(path) -> tuple[dict, str]:
    """Parse and validate a system spec; returns ``(spec, sha256 of the raw bytes)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise SpecError(f"{path}: cannot read ({exc.strerror})") from exc
    digest = hashlib.sha256(raw).hexdigest()
    text = raw.decode("utf-8", errors="replace")
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    validator = jsonschema.Draft202012Validator(SPEC_SCHEMA)
    errors = sorted(validator.iter_errors(spec), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise SpecError(f"{path}:{_line_of(text, e.absolute_path)}: {where}: {e.message}")
    _check_consistency(spec, path, text)
    return spec, digest


def _check_consistency(spec: dict, path, text: str) -> None:
    n, delays, mats = spec["n"], spec["delays"], spec["matrices"]

    def fail(msg, *loc):
        raise SpecError(f"{path}:{_line_of(text, loc)}: {msg}")

    if len(mats) != len(delays) + 1:
        fail(f"expected {len(delays) + 1} matrices (A0..AK) for {len(delays)} delays, got {len(mats)}", "matrices")
    if any(b <= a for a, b in zip(delays, delays[1:])):
        fail("delays must be strictly ascending", "delays")
    for k, a in enumerate(mats):
        if len(a) != n or any(len(row) != n for row in a):
            fail(f"matrices[{k}] is not {n} x {n}", "matrices")
    fam = spec.get("family")
    if fam:
        if fam["kind"] == "matrix":
            dirs = fam.get("directions")
            if dirs is None or len(dirs) != len(mats):
                fail("matrix family needs one direction matrix per system matrix", "family", "directions")
            for k, a in enumerate(dirs):
                if len(a) != n or any(len(row) != n for row in a):
                    fail(f"family directions[{k}] is not {n} x {n}", "family", "directions")
        elif not delays:
            fail("delay-scale family needs at least one delay", "family")


def system_of(spec: dict) -> DelaySystem:
    return DelaySystem(spec["matrices"], spec["delays"])


def family_of(spec: dict) -> ParameterizedFamily:
    fam = spec.get("family")
    if not fam:
        raise SpecError("spec has no 'family' block")
    base = system_of(spec)
    if fam["kind"] == "delay-scale":
        return ParameterizedFamily(base, "delay-scale", name=fam.get("parameter", "lambda"))
    dirs = [np.asarray(d, dtype=float) for d in fam["directions"]]
    return ParameterizedFamily(base, "matrix", direction=dirs, name=fam.get("parameter", "lambda"))


# ---------------------------------------------------------------------------
# Report output


def _fmt(x) -> str:
    """JSON text with every float printed to 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return "null"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return '"nan"'
        if math.isinf(x):
            return '"inf"' if x > 0 else '"-inf"'
        return format(x, ".17g")
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, np.ndarray):
        return _fmt(x.tolist())
    if isinstance(x, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in x.items()) + "}"
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _emit(report: dict, out) -> None:
    text = _fmt(report) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _header(command: str, spec: dict, digest: str) -> dict:
    return {
        "schema": REPORT_SCHEMA_ID,
        "tool": {"name": "delaycert", "version": __version__},
        "command": command,
        "input_sha256": digest,
        "system": {"name": spec.get("name", ""), "n": spec["n"], "delays": spec["delays"]},
    }


def _oracle_block(sys_: DelaySystem, N: int = 32) -> dict:
    res = spectral_abscissa(sys_, N)
    return {"abscissa": res.abscissa, "converged": res.converged, "collocation": res.N,
            "stable": bool(res.converged and res.abscissa < 0)}


def _analysis_defaults(spec: dict, args) -> dict:
    a = spec.get("analysis", {})
    return {
        "degree": args.degree if getattr(args, "degree", None) is not None else a.get("degree", 2),
        "epsilon": args.epsilon if getattr(args, "epsilon", None) is not None else a.get("epsilon"),
        "tol": args.tol if getattr(args, "tol", None) is not None else a.get("tol", 1e-3),
        "path": args.path if getattr(args, "path", None) is not None else a.get("path", "auto"),
        "cone_degrees": a.get("cone_degrees"),
    }


def _config(args) -> SolverConfig:
    backend = getattr(args, "solver", None) or "clarabel"
    if backend not in BACKENDS:
        raise SpecError(f"unknown solver {backend!r}; available: {', '.join(sorted(BACKENDS))}")
    return SolverConfig(backend=backend)


def _kw(opts: dict) -> dict:
    return {"xi_policy": opts["cone_degrees"]} if opts["cone_degrees"] else {}


# ---------------------------------------------------------------------------
# Commands


def cmd_analyze(args) -> int:
    spec, digest = load_spec(args.spec)
    opts = _analysis_defaults(spec, args)
    sys_ = system_of(spec)
    if sys_.K == 0:
        raise SpecError("certification needs at least one delay")
    config = _config(args)
    eps = opts["epsilon"] if opts["epsilon"] is not None else default_epsilon(sys_)
    rep = certify(sys_, opts["degree"], eps, config, opts["path"], with_certificate=args.certificate,
                  **_kw(opts))
    oracle = _oracle_block(sys_)
    verdict = "certified-stable" if rep.feasible else "not-certified"
    report = _header("analyze", spec, digest)
    report.update({
        "verdict": verdict,
        "analysis": rep.to_dict(),
        "oracle": {**oracle, "consistent": (not rep.feasible) or oracle["stable"]},
    })
    _emit(report, args.out)
    return EXIT_OK if rep.feasible else EXIT_NOT_CERTIFIED


def cmd_margin(args) -> int:
    spec, digest = load_spec(args.spec)
    opts = _analysis_defaults(spec, args)
    fam = family_of(spec)
    fspec = spec.get("family", {})
    lo = args.lo if args.lo is not None else fspec.get("lo")
    hi = args.hi if args.hi is not None else fspec.get("hi")
    if lo is None or hi is None:
        raise SpecError("margin search needs --lo and --hi (or family.lo / family.hi)")
    config = _config(args)
    try:
        res = margin_bisection(fam, lo, hi, opts["degree"], opts["epsilon"], opts["tol"], config,
                               opts["path"], **_kw(opts))
    except NoSignChange as exc:
        raise SpecError(f"no sign change on [{lo}, {hi}]: {exc}") from exc
    report = _header("margin", spec, digest)
    report.update({
        "parameter": fam.name,
        "degree": opts["degree"],
        "tol": opts["tol"],
        "margin": res.margin,
        "bracket": list(res.bracket),
        "probes": res.log,
        "elapsed": res.elapsed,
        "oracle": _oracle_block(fam(res.margin)),
    })
    _emit(report, args.out)
    return EXIT_OK


def cmd_oracle(args) -> int:
    spec, digest = load_spec(args.spec)
    sys_ = system_of(spec)
    res = spectral_abscissa(sys_, args.collocation)
    report = _header("oracle", spec, digest)
    report["spectrum"] = res.to_dict()
    _emit(report, args.out)
    return EXIT_OK if res.converged else EXIT_ERROR


def cmd_export_sdpa(args) -> int:
    spec, digest = load_spec(args.spec)
    opts = _analysis_defaults(spec, args)
    sys_ = system_of(spec)
    if sys_.K == 0:
        raise SpecError("certification needs at least one delay")
    prog = assemble(sys_, opts["degree"], opts["epsilon"], opts["path"], **_kw(opts))
    data = to_sdpa_sparse(prog.problem, args.out)
    sys.stderr.write(f"wrote {args.out}: {data.m} constraints, blocks {list(data.block_sizes)}, "
                     f"input sha256 {digest}\n")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_ERROR


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="delaycert", description="Stability certificates for linear multi-delay systems.")
    p.add_argument("--version", action="version", version=f"delaycert {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, degree=True):
        sp.add_argument("spec", help="system specification (JSON)")
        if degree:
            sp.add_argument("--degree", "-d", type=int)
            sp.add_argument("--epsilon", type=float)
            sp.add_argument("--path", choices=["auto", "single", "multi"])
        sp.add_argument("--out", "-o")

    a = sub.add_parser("analyze", help="one feasibility test")
    common(a)
    a.add_argument("--solver", default="clarabel")
    a.add_argument("--certificate", action="store_true", help="include the operator coefficients")
    a.set_defaults(func=cmd_analyze)

    m = sub.add_parser("margin", help="bisect a family parameter")
    common(m)
    m.add_argument("--solver", default="clarabel")
    m.add_argument("--tol", type=float)
    m.add_argument("--lo", type=float)
    m.add_argument("--hi", type=float)
    m.set_defaults(func=cmd_margin)

    o = sub.add_parser("oracle", help="rightmost characteristic roots")
    common(o, degree=False)
    o.add_argument("--collocation", "-N", type=int, default=32)
    o.set_defaults(func=cmd_oracle)

    e = sub.add_parser("export-sdpa", help="write the program in SDPA sparse format")
    common(e)
    e.set_defaults(func=cmd_export_sdpa)

    s = sub.add_parser("selftest", help="run the bundled invariant checks")
    s.add_argument("--quick", action="store_true")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "export-sdpa" and not args.out:
        sys.stderr.write("error: export-sdpa requires --out\n")
        return EXIT_ERROR
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except SpecError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR
    logging.getLogger(__name__).info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
