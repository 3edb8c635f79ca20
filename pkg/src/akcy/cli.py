"""Command line entry point ``akcy``.

Exit codes: 0 success, 1 numerical failure (or a failed verification),
2 usage, configuration or file-format error. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    NORM_CONVENTION,
    decomposition_44_check,
    lemma1_check,
    sandwich_check,
    trace_identity_check,
)
from .errors import AkcyError, FormatError, IoError, NumericalFailure
from .forms import (
    anti_invariant_part,
    build_triple,
    compatible_j,
    perturbed_structure,
    standard_omega,
    standard_triple,
)
from .grid import OneForm, ScalarField, TwoForm, _codiff1, _codiff2, _d1, random_smooth, spectral
from .io import (
    RunConfig,
    config_from_dict,
    convergence_csv,
    load_field,
    parse_config,
    save_field,
    write_json,
    write_text,
)
from .lejmi import _w_arrays, dj_plus_array, harmonic_anti_dim
from .solver import continuation_solve, ma_residual, normalize_rhs, tame_to_almost_kahler

log = logging.getLogger("akcy")

# verification thresholds
VERIFY_TOL = {
    "ma_residual": 1e-8,
    "lemma_det": 1e-8,
    "lemma_lap": 1e-8,
    "bound_margin": -1e-9,
    "trace_identity": 1e-10,
    "u_membership": 1e-9,
    "decomposition": 1e-8,
    "reference_error": 1e-8,
}


# --------------------------------------------------------------------------
# building inputs from a config


def _load(path: Path, kind):
    try:
        fld = load_field(path)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not isinstance(fld, kind):
        raise FormatError(f"{path} holds a {type(fld).__name__}, expected {kind.__name__}")
    return fld


def build_structure(cfg: RunConfig):
    s = cfg.structure
    if s.kind == "standard":
        return standard_triple(cfg.grid)
    if s.kind == "perturbed":
        omega = standard_omega(cfg.grid)
        return build_triple(omega, perturbed_structure(cfg.grid, s.amplitude, s.seed, s.kmax, omega))
    omega = _load(s.path, TwoForm)
    if omega.grid != cfg.grid:
        raise FormatError(f"{s.path} is on grid {omega.grid.dims}, config says {cfg.grid.dims}")
    return build_triple(omega, compatible_j(omega))


def manufactured_pair(grid, epsilon: float, mode: int):
    """``(f, phi_ref)`` with ``f = log(1 - eps sin(k x0))`` and ``phi_ref = eps/k^2 sin(k x0)``."""
    x0 = grid.mesh()[0]
    s = np.sin(mode * x0)
    return (ScalarField(grid, np.log1p(-epsilon * s)),
            ScalarField(grid, (epsilon / mode ** 2) * s))


def build_rhs(cfg: RunConfig) -> ScalarField:
    r = cfg.rhs
    if r.kind == "zero":
        return ScalarField(cfg.grid, 0.0)
    if r.kind == "manufactured":
        return manufactured_pair(cfg.grid, r.epsilon, r.mode)[0]
    f = _load(r.path, ScalarField)
    if f.grid != cfg.grid:
        raise FormatError(f"{r.path} is on grid {f.grid.dims}, config says {cfg.grid.dims}")
    return f


def _with_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed,
                                  structure=dataclasses.replace(cfg.structure, seed=args.seed))
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output=Path(args.out))
    return cfg


def _config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    return _with_overrides(cfg, args)


def _config_summary(cfg: RunConfig) -> dict:
    return {
        "grid": {"dims": list(cfg.grid.dims), "periods": list(cfg.grid.periods)},
        "structure": dataclasses.asdict(cfg.structure),
        "rhs": dataclasses.asdict(cfg.rhs),
        "solver": dataclasses.asdict(cfg.solver),
        "seed": cfg.seed,
    }


# --------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    cfg = _config(args)
    out = cfg.output
    triple = build_structure(cfg)
    f = build_rhs(cfg)
    started = time.perf_counter()
    doc = {"command": "solve", "config": _config_summary(cfg)}
    try:
        phi, rep = continuation_solve(f, triple, cfg.solver)
    except NumericalFailure as exc:
        partial = exc.report if hasattr(exc.report, "records") else None
        records = partial.records if partial is not None else []
        write_text(out / "convergence.csv", convergence_csv(records))
        doc.update(success=False, error=type(exc).__name__, message=str(exc),
                   steps=len(records), t_reached=records[-1].t if records else 0.0,
                   rejected_steps=getattr(partial, "rejected_steps", 0),
                   records=[dataclasses.asdict(r) for r in records],
                   seconds=time.perf_counter() - started)
        write_json(out / "report.json", doc)
        print(f"akcy solve: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - started
    W = _w_arrays(phi.data, triple)
    omega1 = TwoForm(cfg.grid, triple.omega.data + dj_plus_array(phi.data, triple))
    save_field(out / "phi.akf", phi)
    save_field(out / "W.akf", OneForm(cfg.grid, W))
    save_field(out / "omega1.akf", omega1)
    save_field(out / "f.akf", normalize_rhs(f, triple))
    if cfg.structure.kind != "standard":
        save_field(out / "omega.akf", triple.omega)
    write_text(out / "convergence.csv", convergence_csv(rep.records))
    final = rep.records[-1]
    doc.update(success=rep.success, message=rep.message, steps=len(rep.records) - 1,
               rejected_steps=rep.rejected_steps, residual_linf=final.residual_linf, min_a1=final.min_a1, phi_linf=final.phi_linf,
               u_membership={"d_minus_W": rep.u_membership[0], "codiff_W": rep.u_membership[1]},
               records=[dataclasses.asdict(r) for r in rep.records], seconds=elapsed)
    write_json(out / "report.json", doc)
    print(f"solve: {rep.message}; residual {final.residual_linf:.3e}, min a1 {final.min_a1:.6g}, "
          f"{len(rep.records) - 1} steps, {elapsed:.2f} s", file=sys.stderr)
    return 0 if rep.success else 1


def verify_solution(phi: ScalarField, f: ScalarField, triple, phi_ref: ScalarField | None = None) -> dict:
    """Run every diagnostic on a solved state; returns ``{name: (value, passed)}``."""
    grid = triple.grid
    sp = spectral(grid)
    omega1 = TwoForm(grid, triple.omega.data + dj_plus_array(phi.data, triple))
    checks = {}
    res = float(np.abs(ma_residual(phi, f, triple).data).max())
    checks["ma_residual"] = (res, res <= VERIFY_TOL["ma_residual"])
    lem = lemma1_check(triple.omega, omega1, f, triple)
    checks["lemma_det"] = (lem.residual_det, lem.residual_det <= VERIFY_TOL["lemma_det"])
    checks["lemma_norm"] = (lem.residual_norm, lem.residual_norm <= VERIFY_TOL["lemma_det"])
    checks["lemma_lap"] = (lem.residual_lap, lem.residual_lap <= VERIFY_TOL["lemma_lap"])
    checks["lap_phi0_below_2"] = (lem.lap_max, lem.lap_max < 2)
    checks["bound_margin"] = (lem.bound_margin, lem.bound_margin >= VERIFY_TOL["bound_margin"])
    sw = sandwich_check(triple.omega, omega1, triple)
    checks["sandwich_lower"] = (sw.lower_margin, sw.lower_ok)
    checks["sandwich_upper"] = (sw.upper_margin, sw.upper_ok)
    tr = trace_identity_check(triple, omega1)
    worst = max(tr.eigen_discrepancy, tr.matrix_discrepancy)
    checks["trace_identity"] = (worst, worst <= VERIFY_TOL["trace_identity"])
    W = _w_arrays(phi.data, triple)
    dm = float(np.abs(anti_invariant_part(_d1(sp, W), triple.J)).max())
    cd = float(np.abs(_codiff1(sp, W, triple.metric)).max())
    checks["d_minus_W"] = (dm, dm <= VERIFY_TOL["u_membership"])
    checks["codiff_W"] = (cd, cd <= VERIFY_TOL["u_membership"])
    dec = decomposition_44_check(phi, omega1, triple)
    dworst = max(dec.decomposition_residual, dec.coclosed_residual,
                 dec.wedge_residual, dec.elliptic_residual)
    checks["decomposition"] = (dworst, dworst <= VERIFY_TOL["decomposition"])
    if phi_ref is not None:
        d = phi.data - phi_ref.data
        err = float(np.abs(d - d.mean()).max())
        checks["reference_error"] = (err, err <= VERIFY_TOL["reference_error"])
    return checks


def cmd_verify(args) -> int:
    cfg = _config(args)
    out = cfg.output
    src = Path(args.solution) if args.solution else out
    triple = build_structure(cfg)
    phi = _load(src / "phi.akf", ScalarField)
    f = _load(src / "f.akf", ScalarField) if (src / "f.akf").exists() else normalize_rhs(build_rhs(cfg), triple)
    if phi.grid != cfg.grid or f.grid != cfg.grid:
        raise FormatError("saved fields do not match the configured grid")
    ref = None
    ref_path = Path(args.reference) if args.reference else src / "phi_ref.akf"
    if ref_path.exists():
        ref = _load(ref_path, ScalarField)
    checks = verify_solution(phi, f, triple, ref)
    ok = all(p for _, p in checks.values())
    for name, (value, passed) in checks.items():
        print(f"{'PASS' if passed else 'FAIL'} {name} = {value:.3e}")
    write_json(out / "verify.json", {
        "command": "verify", "all_pass": ok, "norm_convention": NORM_CONVENTION,
        "checks": {k: {"value": v, "pass": p, "tol": VERIFY_TOL.get(k)} for k, (v, p) in checks.items()},
    })
    if not ok:
        print("akcy verify: some checks failed", file=sys.stderr)
    return 0 if ok else 1


def cmd_manufacture(args) -> int:
    cfg = _config(args)
    eps = cfg.rhs.epsilon if args.epsilon is None else args.epsilon
    mode = cfg.rhs.mode if args.mode is None else args.mode
    # re-run validation on the overridden values
    config_from_dict({"grid": {"dims": list(cfg.grid.dims), "periods": list(cfg.grid.periods)},
                      "rhs": {"kind": "manufactured", "epsilon": float(eps), "mode": mode}})
    out = cfg.output
    f, ref = manufactured_pair(cfg.grid, eps, mode)
    save_field(out / "f.akf", f)
    save_field(out / "phi_ref.akf", ref)
    dims = ", ".join(str(n) for n in cfg.grid.dims)
    periods = ", ".join(repr(p) for p in cfg.grid.periods)
    s = cfg.solver
    write_text(out / "config.toml", "\n".join([
        "[grid]", f"dims = [{dims}]", f"periods = [{periods}]", "",
        "[structure]", 'kind = "standard"', "",
        "[rhs]", 'kind = "file"', 'path = "f.akf"', "",
        "[solver]", f"newton_tol = {s.newton_tol!r}", f"newton_max = {s.newton_max}",
        f"krylov_tol = {s.krylov_tol!r}", f"t_step_init = {s.t_step_init!r}",
        f"t_step_min = {s.t_step_min!r}", f"positivity_margin = {s.positivity_margin!r}",
        f"dealias = {'true' if s.dealias else 'false'}", "",
        "[output]", 'dir = "."', "",
    ]))
    print(f"manufactured eps = {eps}, mode = {mode} in {out}", file=sys.stderr)
    return 0


def demo_taming_form(triple, amplitude: float, seed: int) -> TwoForm:
    """``omega + d d^* xi`` for a smooth anti-invariant ``xi``, scaled so the
    perturbation has sup norm ``amplitude`` (small amplitudes keep it taming)."""
    grid = triple.grid
    sp = spectral(grid)
    xi = anti_invariant_part(random_smooth(grid, np.random.default_rng(seed), kmax=1, ncomp=6), triple.J)
    dalpha = _d1(sp, _codiff2(sp, xi, triple.metric))
    dalpha *= amplitude / max(float(np.abs(dalpha).max()), 1e-300)
    return TwoForm(grid, triple.omega.data + dalpha)


def cmd_tame(args) -> int:
    cfg = _config(args)
    out = cfg.output
    triple = build_structure(cfg)
    path = Path(args.omega) if args.omega else cfg.tame.omega_path
    Omega = _load(path, TwoForm) if path else demo_taming_form(triple, cfg.tame.amplitude, cfg.seed)
    if Omega.grid != cfg.grid:
        raise FormatError("taming form does not match the configured grid")
    omega, rep = tame_to_almost_kahler(Omega, triple.J, background=triple)
    save_field(out / "omega_tamed.akf", omega)
    save_field(out / "alpha.akf", rep.alpha)
    doc = {"command": "tame", "kappa_linf": rep.kappa_linf, "anti_invariant": rep.anti_invariant,
           "closed_defect": rep.closed_defect, "min_eigenvalue": rep.min_eigenvalue,
           "lejmi_iterations": rep.solve.iterations, "lejmi_residual": rep.solve.final_residual}
    if not path:
        doc["recovery_error"] = float(np.abs(omega.data - triple.omega.data).max())
    write_json(out / "tame.json", doc)
    print(f"tame: anti-invariant part {rep.anti_invariant:.3e}, min eigenvalue {rep.min_eigenvalue:.6g}",
          file=sys.stderr)
    return 0


def cmd_spectrum(args) -> int:
    cfg = _config(args)
    triple = build_structure(cfg)
    spec = harmonic_anti_dim(triple, n_eigs=args.n_eigs)
    print(f"dim ker P = {spec.dim}")
    print("eigenvalues: " + " ".join(f"{v:.6e}" for v in spec.eigenvalues))
    print(f"threshold = {spec.threshold:.3e}, gap = {spec.gap:.3e}")
    if args.out is not None or args.config:
        write_json(cfg.output / "spectrum.json", {
            "command": "spectrum", "dim": spec.dim, "eigenvalues": list(spec.eigenvalues),
            "threshold": spec.threshold, "gap": spec.gap})
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="seed for all randomized structures")
    common.add_argument("--out", help="output directory (overrides [output] dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="akcy", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"akcy {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="continuation solve")
    v = sub.add_parser("verify", parents=[common], help="diagnostics on a saved solution")
    v.add_argument("--solution", help="directory holding phi.akf and f.akf (default: output dir)")
    v.add_argument("--reference", help="reference potential to compare against")
    m = sub.add_parser("manufacture", parents=[common], help="write an analytic test case")
    m.add_argument("--epsilon", type=float)
    m.add_argument("--mode", type=int)
    t = sub.add_parser("tame", parents=[common], help="extract an almost Kahler form from a taming form")
    t.add_argument("--omega", help="field file with the taming 2-form")
    s = sub.add_parser("spectrum", parents=[common], help="dimension of the harmonic anti-invariant space")
    s.add_argument("--n-eigs", type=int, default=6)
    return p


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "manufacture": cmd_manufacture,
            "tame": cmd_tame, "spectrum": cmd_spectrum}


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except NumericalFailure as exc:
        print(f"akcy {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (AkcyError, OSError, ValueError) as exc:
        print(f"akcy {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))
