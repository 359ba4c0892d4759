"""Acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line to the terminal summary. Criteria 4-7 share
two end-to-end runs of ``thinflow converge`` on ``configs/main.toml``.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from thinflow import avgops as ao
from thinflow import staggered as stg
from thinflow.grid import VField3D, make_grid2d, make_grid3d
from thinflow.nse2d import run2d
from thinflow.nse3d import SolverParams, project_div_free, run3d, trilinear_b3
from thinflow.sgnoise import make_forcing, make_paths, trig_mode

ROOT = Path(__file__).resolve().parents[1]
MAIN_CONFIG = ROOT / "configs" / "main.toml"
LADDER = [0.25, 0.125, 0.0625, 0.03125]


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ---------------------------------------------------------------------------
# 1. operator identities


def test_criterion_1_operator_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, n_checks, failed = 0.0, 0, []
    for shape in ((16, 16, 8), (32, 32, 16)):
        for eps in LADDER:
            g = make_grid3d(*shape, 1.0, 1.0, eps)
            for r in ao.lemma_suite(g, rng, n_fields=100, tolerance=1e-12):
                n_checks += 1
                worst = max(worst, abs(r.lhs - r.rhs) / max(abs(r.rhs), 1.0))
                if not r.passed:
                    failed.append((shape, eps, r.name))
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 60
    record(1, "operator identities at 1e-12", ok,
           f"{n_checks} checks x 100 fields, worst rel dev {worst:.2e}, {elapsed:.1f}s, failed={failed}")
    assert not failed
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. inequalities


def test_criterion_2_inequalities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_ratio, ok_p = 0.0, True
    for eps in LADDER:
        g = make_grid3d(32, 32, 16, 1.0, 1.0, eps)
        for r in ao.poincare_suite(g, rng, 100):
            ok_p &= r.passed and r.ratio <= 1 + 5 * g.dz**2
            worst_ratio = max(worst_ratio, r.ratio)
    lady = ao.ladyzhenskaya_trend(LADDER, rng, n_fields=32, slope_tol=0.1)
    slope = lady.details["slope_l6"]
    elapsed = time.perf_counter() - t0
    ok = ok_p and abs(slope) <= 0.1 and elapsed < 60
    record(2, "Poincare ratio <= 1 + 5 dz^2, |Ladyzhenskaya slope| <= 0.1", ok,
           f"max Poincare ratio {worst_ratio:.3f}, slope {slope:+.4f} "
           f"+/- {lady.details['slope_l6_stderr']:.4f}, {elapsed:.1f}s")
    assert ok_p
    assert abs(slope) <= 0.1
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 3. solver oracles


def _stokes_eigenpair(L):
    masks = [m.astype(bool) for m in stg.enforce_bc(L, [np.ones(L.comp_shape(c)) for c in range(L.ndim)])]
    sizes = [int(m.sum()) for m in masks]

    def unpack(x):
        out, o = [], 0
        for c, m in enumerate(masks):
            a = np.zeros(L.comp_shape(c))
            a[m] = x[o:o + sizes[c]]
            o += sizes[c]
            out.append(a)
        return out

    def pack(u):
        return np.concatenate([a[m] for a, m in zip(u, masks)])

    def op(x):
        u, _ = stg.project(L, unpack(x))
        out, _ = stg.project(L, [-a for a in stg.laplacian(L, u)])
        return pack(out)

    A = np.column_stack([op(e) for e in np.eye(sum(sizes))])
    s = np.sqrt(pack([np.broadcast_to(w, L.comp_shape(c)) for c, w in enumerate(L.face_weights)]))
    S = s[:, None] * A / s[None, :]
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    k = int(np.argmax(lam > 1e-8))
    return lam[k], unpack(V[:, k] / s)


def test_criterion_3_solver_oracles():
    t0 = time.perf_counter()
    # Stokes eigenmode decay against a dense eigendecomposition
    g = make_grid3d(5, 4, 3, 1.0, 0.9, 0.25)
    lam, phi = _stokes_eigenpair(g.layout)
    params = SolverParams(nu=0.2, dt=0.01, T=0.5, poisson_tol=1e-13, advection_scheme="none")
    traj = run3d(VField3D(*phi, g), params, snapshot_every=params.n_steps)
    factor = (1 + params.nu * params.dt * lam) ** (-params.n_steps)
    scale = max(np.max(np.abs(c)) for c in phi) * factor
    eig_err = max(np.max(np.abs(a - c * factor)) for a, c in zip(traj.final.components, phi)) / scale

    # projection idempotence and divergence residual
    rng = np.random.default_rng(3)
    g = make_grid3d(32, 32, 8, 1.0, 1.0, 0.125)
    u = ao.random_vfield(g, rng, 1)
    u = VField3D(*[c[0] for c in u.components], g)
    p, _ = project_div_free(u)
    p2, _ = project_div_free(p)
    umax = max(np.max(np.abs(c)) for c in u.components)
    div_res = float(np.max(np.abs(stg.divergence(g.layout, p.components)))) * g.dz / umax
    idem = max(np.max(np.abs(a - b)) for a, b in zip(p2.components, p.components)) / umax

    # trilinear cancellation for a divergence-free transport field
    v = ao.random_vfield(g, rng, 1)
    v = VField3D(*[c[0] for c in v.components], g)
    bnorm = np.sqrt(float(stg.norm2(g.layout, p.components))) / g.dz * float(stg.norm2(g.layout, v.components))
    tri = abs(trilinear_b3(p, v, v)) / bnorm

    # 2D invariance: 200 coupled steps with z-independent data on 32x32x8
    g2 = make_grid2d(32, 32)
    eps = 0.125
    fam = make_forcing([trig_mode(g2, 1, 1, 0.05), trig_mode(g2, 2, 1, 0.05),
                        trig_mode(g2, 1, 2, 0.05), trig_mode(g2, 2, 2, 0.05)],
                       trig_mode(g2, 1, 3, 0.1), [eps], nz=8, u0=trig_mode(g2, 1, 1, 0.1))
    params = SolverParams(nu=0.05, dt=0.0025, T=0.5)
    paths = make_paths(fam.n_modes, params.dt, params.T, (20240611, 0))
    t3 = run3d(fam.u0_3d[eps], params, fam, paths, snapshot_every=1)
    t2 = run2d(fam.u0_2d, params, fam, paths, snapshot_every=1)
    inv = 0.0
    for (_, a), (_, b) in zip(t3.states, t2.states):
        m = ao.circ_m(a)
        inv = max(inv, max(np.max(np.abs(x - y)) for x, y in zip(m.components, b.components)))
    elapsed = time.perf_counter() - t0

    ok = (eig_err <= 1e-10 and div_res <= 1e-10 and idem <= 1e-10 and tri <= 1e-12
          and inv <= 1e-8 and params.n_steps == 200 and elapsed < 300)
    record(3, "solver oracles", ok,
           f"eigen-decay {eig_err:.1e}, div residual {div_res:.1e}, idempotence {idem:.1e}, "
           f"b(u,v,v) {tri:.1e}, 2D invariance {inv:.1e} over {params.n_steps} steps, {elapsed:.1f}s")
    assert eig_err <= 1e-10
    assert div_res <= 1e-10 and idem <= 1e-10
    assert tri <= 1e-12
    assert inv <= 1e-8
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 4-7. the convergence experiment


def _converge(out: Path) -> tuple[float, subprocess.CompletedProcess]:
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "thinflow.cli", "converge", "--config", str(MAIN_CONFIG),
                           "--out", str(out)], capture_output=True, text=True)
    return time.perf_counter() - t0, proc


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    runs = []
    for name in ("run1", "run2"):
        out = tmp_path_factory.mktemp(name)
        elapsed, proc = _converge(out)
        assert proc.returncode == 0, proc.stderr
        runs.append({"out": out, "elapsed": elapsed})
    report = json.loads((runs[0]["out"] / "report.json").read_text())
    return runs, report


@pytest.mark.slow
def test_criterion_4_convergence(experiment):
    runs, rep = experiment
    chk = rep["checks"]
    fit = rep["fits"]["err_L2"]
    vals = chk["err_L2_strictly_decreasing"]["values"]
    decreasing = all(b < a for a, b in zip(vals, vals[1:]))
    ok = decreasing and fit["slope"] > 0.5 and np.isfinite(fit["stderr"])
    minutes = runs[0]["elapsed"] / 60
    record(4, "err_L2 strictly decreasing, slope > 0.5", ok,
           "err_L2 " + ", ".join(f"{v:.3e}" for v in vals)
           + f"; slope {fit['slope']:.3f} +/- {fit['stderr']:.3f}; runtime {minutes:.1f} min")
    assert decreasing
    assert fit["slope"] > 0.5
    assert np.isfinite(fit["stderr"])


@pytest.mark.slow
def test_criterion_5_beta_scaling(experiment):
    _, rep = experiment
    s2 = rep["fits"]["beta_sup_p2"]["slope"]
    s4 = rep["fits"]["beta_sup_p4"]["slope"]
    ok = s2 >= 0.9 and s4 >= 1.8
    record(5, "beta ledger slopes p=2 >= 0.9, p=4 >= 1.8", ok, f"p=2 slope {s2:.4f}, p=4 slope {s4:.4f}")
    assert s2 >= 0.9
    assert s4 >= 1.8


@pytest.mark.slow
def test_criterion_6_energy(experiment):
    _, rep = experiment
    led = rep["energy"]
    steps = sum(v["steps"] for v in led.values())
    viol = sum(v["violations"] for v in led.values())
    worst = max(v["max_scaled_residual"] for v in led.values())
    trend = rep["fits"]["alpha_energy_bound"]
    bounds = [r["value"] for r in rep["rows"] if r["metric"] == "alpha_energy_bound"]
    no_upward = trend["slope"] >= -0.1
    complete = not rep["incomplete"]
    ok = viol == 0 and no_upward and complete
    record(6, "pathwise energy inequality, alpha bound without upward trend", ok,
           f"{viol} violations in {steps} sample-steps (worst scaled residual {worst:.1e}); "
           f"E[sup|alpha|^2 + nu int|grad alpha|^2] " + ", ".join(f"{b:.4e}" for b in bounds)
           + f", slope {trend['slope']:+.4f}")
    assert complete
    assert viol == 0
    assert no_upward


@pytest.mark.slow
def test_criterion_7_reproducible(experiment):
    runs, _ = experiment
    a = (runs[0]["out"] / "report.csv").read_bytes()
    b = (runs[1]["out"] / "report.csv").read_bytes()
    ok = a == b
    record(7, "byte-identical report.csv", ok, f"{len(a)} bytes, identical={ok}")
    assert a == b
