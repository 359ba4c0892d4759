"""Command line interface: ``thinflow {check-ops,run3d,run2d,converge,report}``.

Errors are written to stderr as one JSON object; usage and configuration
errors exit with status 2, runtime failures with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("thinflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def _grid_triple(s: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(x) for x in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected nx,ny,nz, got {s!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected nx,ny,nz, got {s!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="thinflow", description="Thin-domain stochastic Navier-Stokes laboratory")
    p.add_argument("--version", action="version", version=f"thinflow {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("check-ops", help="verify the averaging identities and inequalities")
    c.add_argument("--grid", type=_grid_triple, default=(16, 16, 8), help="nx,ny,nz")
    c.add_argument("--eps", type=float, action="append", help="thickness (repeatable)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-fields", type=int, default=100)
    c.add_argument("--tolerance", type=float, default=1e-12)
    c.add_argument("--out", type=Path, default=Path("check_ops.json"))

    for name, helptext in (("run3d", "integrate one thin-domain sample"),
                           ("run2d", "integrate one 2D sample")):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("--config", type=Path, required=True)
        if name == "run3d":
            r.add_argument("--eps", type=float, required=True)
        r.add_argument("--seed", type=int, default=0)
        r.add_argument("--out", type=Path, required=True)
        r.add_argument("--dump-every", type=int, default=0,
                       help="steps between field dumps (0: initial and final only)")

    v = sub.add_parser("converge", help="run the coupled ensemble over the thickness ladder")
    v.add_argument("--config", type=Path, required=True)
    v.add_argument("--out", type=Path, default=Path("."))

    rp = sub.add_parser("report", help="re-emit a report.json as JSON or CSV")
    rp.add_argument("--in", dest="inp", type=Path, required=True)
    rp.add_argument("--format", choices=("json", "csv"), default="csv")
    rp.add_argument("--out", type=Path, default=None)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_check_ops(a) -> int:
    from .avgops import ladyzhenskaya_trend, lemma_suite, poincare_suite
    from .grid import make_grid3d

    nx, ny, nz = a.grid
    eps_list = a.eps or [0.25]
    rng = np.random.default_rng(a.seed)
    reports = []
    for eps in eps_list:
        g = make_grid3d(nx, ny, nz, 1.0, 1.0, eps)
        reports += lemma_suite(g, rng, a.n_fields, a.tolerance)
        reports += poincare_suite(g, rng, a.n_fields)
    ladder = sorted(set(eps_list), reverse=True)
    if len(ladder) < 2:
        ladder = [0.25, 0.125, 0.0625, 0.03125]
    reports.append(ladyzhenskaya_trend(ladder, rng, min(a.n_fields, 32), nz=nz))
    out = {"schema_version": 1, "grid": [nx, ny, nz], "eps": eps_list, "seed": a.seed,
           "passed": all(r.passed for r in reports),
           "reports": [r.to_dict() for r in reports]}
    _write_json(a.out, out)
    print(json.dumps({"passed": out["passed"], "n_checks": len(reports), "out": str(a.out)}))
    return 0 if out["passed"] else 1


def _write_traj_csv(path: Path, traj) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "energy", "enstrophy", "energy_residual", "energy_tolerance",
                    "noise_work", "hs_budget"])
        res = np.concatenate([[0.0], traj.energy_residual])
        tol = np.concatenate([[0.0], traj.energy_tolerance])
        for k, t in enumerate(traj.times):
            w.writerow([repr(float(t)), repr(float(traj.energy_series[k])),
                        repr(float(traj.enstrophy_series[k])), repr(float(res[k])),
                        repr(float(tol[k])), repr(float(traj.noise_work_series[k])),
                        repr(float(traj.hs_budget_series[k]))])


def _run_single(a, three_d: bool) -> int:
    from .grid import dump_field
    from .harness import build_family, initial_states, load_config
    from .nse2d import run2d
    from .nse3d import run3d
    from .sgnoise import make_paths

    cfg = load_config(a.config)
    if three_d:
        eps = float(a.eps)
        if not any(abs(eps - e) <= 1e-12 * e for e in cfg.eps_ladder):
            cfg.eps_ladder = sorted(set(cfg.eps_ladder) | {eps}, reverse=True)
        cfg.validate()
        eps = next(e for e in cfg.eps_ladder if abs(eps - e) <= 1e-12 * e)
    fam = build_family(cfg)
    params = cfg.solver_params()
    paths = make_paths(fam.n_modes, params.dt, params.T, (cfg.base_seed, a.seed))
    every = a.dump_every if a.dump_every > 0 else params.n_steps
    if three_d:
        u0 = initial_states(cfg, fam)[eps]
        traj = run3d(u0, params, fam, paths, snapshot_every=every,
                     residual_tol=cfg.energy_rel_tol)
    else:
        traj = run2d(fam.u0_2d, params, fam, paths, snapshot_every=every,
                     residual_tol=cfg.energy_rel_tol)
    a.out.mkdir(parents=True, exist_ok=True)
    _write_traj_csv(a.out / "trajectory.csv", traj)
    for t, u in traj.states:
        k = int(round(t / params.dt))
        dump_field(u, a.out / "fields", f"step{k:06d}")
    viol = int(np.sum(traj.energy_residual > traj.energy_tolerance))
    print(json.dumps({"out": str(a.out), "steps": params.n_steps, "energy_violations": viol,
                      "final_energy": float(traj.energy_series[-1])}))
    return 0


def cmd_converge(a) -> int:
    from .harness import load_config, run_convergence, write_report

    cfg = load_config(a.config)

    def progress(k, n):
        if k % max(1, n // 20) == 0 or k == n:
            log.info("step %d / %d", k, n)

    rep = run_convergence(cfg, progress=progress)
    pj, pc = write_report(rep, a.out)
    print(json.dumps({"report_json": str(pj), "report_csv": str(pc),
                      "checks": {k: bool(v["passed"]) for k, v in rep.checks.items()}}))
    return 0


def cmd_report(a) -> int:
    from .harness import read_report, report_csv

    rep = read_report(a.inp)
    text = rep.to_json() if a.format == "json" else report_csv(rep.to_dict())
    if a.out is None:
        sys.stdout.write(text)
    else:
        a.out.write_text(text)
    return 0


def _write_json(path: Path, obj) -> None:
    from .harness import _clean

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def cli_main(argv=None) -> int:
    from .harness import ConfigError

    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as e:
        return _emit_error("usage", str(e), 2)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"check-ops": cmd_check_ops, "run3d": lambda x: _run_single(x, True),
                "run2d": lambda x: _run_single(x, False), "converge": cmd_converge,
                "report": cmd_report}
    try:
        return handlers[a.command](a)
    except ConfigError as e:
        return _emit_error("config", str(e), 2)
    except (OSError, ValueError, KeyError) as e:
        return _emit_error(type(e).__name__, str(e), 1)
    except RuntimeError as e:
        return _emit_error("runtime", str(e), 1)


def main() -> None:  # console-script entry point
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
