import copy
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thinflow import avgops as ao
from thinflow import staggered as stg
from thinflow.cli import cli_main
from thinflow.grid import make_grid2d, make_grid3d, random_field
from thinflow.harness import (ConfigError, ConvergenceReport, EnsembleSeries, build_family,
                              config_from_dict, energy_ledger, initial_states, load_config,
                              modulus_of_continuity, moment_ledger, oscillating_perturbation,
                              read_report, run_convergence, slope_fit, beta_scaling_ledger,
                              ustar_distance, write_report)
from thinflow.nse3d import SolverParams, run3d

ROOT = Path(__file__).resolve().parents[1]

SMALL = {
    "schema_version": 1,
    "eps_ladder": [0.25, 0.125, 0.0625],
    "nu": 0.05, "T": 0.02, "dt": 0.0025, "n_samples": 3, "p_list": [2, 4],
    "grid": {"nx": 8, "ny": 8, "nz": 4},
    "seeds": {"base": 7},
    "forcing": {
        "noise": [{"type": "trig", "kx": 1, "ky": 1, "amplitude": 0.05},
                  {"type": "trig", "kx": 2, "ky": 1, "amplitude": 0.05}],
        "force": [{"type": "trig", "kx": 1, "ky": 2, "amplitude": 0.1}],
        "initial": [{"type": "trig", "kx": 1, "ky": 1, "amplitude": 0.1}],
        "perturbation": {"kind": "oscillating", "scale": 1.0, "kx": 1, "ky": 2, "vertical_mode": 1},
    },
    "diagnostics": {"modulus_lags": [2, 4], "modulus_stride": 2},
}


def small(**changes):
    d = copy.deepcopy(SMALL)
    for k, v in changes.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k].update(v)
        else:
            d[k] = v
    return d


# ---------------------------------------------------------------------------
# configuration


def test_shipped_configs_load():
    for name in ("main.toml", "minimal.toml"):
        cfg = load_config(ROOT / "configs" / name)
        assert cfg.eps_ladder == [0.25, 0.125, 0.0625, 0.03125]
        assert cfg.solver_params().n_steps >= 1


@pytest.mark.parametrize("bad", [
    {"eps_ladder": [0.25, 0.6]},
    {"eps_ladder": [0.1, 0.2]},
    {"eps_ladder": []},
    {"dt": 0.003},
    {"nu": -1.0},
    {"n_samples": 0},
    {"grid": {"nz": 1}},
    {"p_list": [1]},
    {"unknown": 1},
    {"grid": {"nq": 3}},
    {"schema_version": 2},
    {"diagnostics": {"modulus_lags": [3], "modulus_stride": 2}},
    {"forcing": {"perturbation": {"kind": "wild"}}},
    {"nu": "abc"},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        config_from_dict(small(**bad))


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
    p = tmp_path / "broken.toml"
    p.write_text("nu = [\n")
    with pytest.raises(ConfigError):
        load_config(p)
    j = tmp_path / "ok.json"
    j.write_text(json.dumps(SMALL))
    assert load_config(j).nx == 8


# ---------------------------------------------------------------------------
# initial data


def test_oscillating_perturbation_has_zero_mean_and_target_norm():
    g = make_grid3d(12, 12, 6, 1, 1, 0.125)
    target = 0.37
    w = oscillating_perturbation(g, target, kx=1, ky=2, vertical_mode=1)
    assert math.isclose(math.sqrt(float(stg.norm2(g.layout, w.components))), target, rel_tol=1e-12)
    assert np.max(np.abs(ao.circ_m(w).u1)) < 1e-14 and np.max(np.abs(ao.circ_m(w).u2)) < 1e-14
    assert np.max(np.abs(stg.divergence(g.layout, w.components))) < 1e-10


def test_initial_states_average_to_2d_datum():
    cfg = config_from_dict(small())
    fam = build_family(cfg)
    init = initial_states(cfg, fam)
    for eps, u in init.items():
        m = ao.circ_m(u)
        assert np.allclose(m.u1, fam.u0_2d.u1, atol=1e-14)
        beta2 = float(stg.norm2(u.grid.layout, ao.tilde_n(u).components))
        # the oscillating part is scaled so that |beta|^2 = eps |u0_2d|^2
        assert beta2 == pytest.approx(eps * float(stg.norm2(fam.base.layout, fam.u0_2d.components)),
                                      rel=1e-12)


# ---------------------------------------------------------------------------
# modulus of continuity


def _short_traj():
    g = make_grid3d(8, 8, 4, 1, 1, 0.25)
    u0 = random_field(g, np.random.default_rng(2))
    from thinflow.nse3d import project_div_free
    u0, _ = project_div_free(u0)
    traj = run3d(u0, SolverParams(nu=0.05, dt=0.01, T=0.1), snapshot_every=1)
    return traj


def test_modulus_properties():
    traj = _short_traj()
    states = traj.states
    assert modulus_of_continuity(states, 0.0) == 0.0
    with pytest.raises(ValueError):
        modulus_of_continuity(states, 0.005)
    vals = [modulus_of_continuity(states, d) for d in (0.01, 0.02, 0.05, 0.1)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    l2 = [modulus_of_continuity(states, d, norm="l2") for d in (0.01, 0.05)]
    assert l2[1] >= l2[0] > 0
    # constant series
    const = [(0.01 * k, states[0][1]) for k in range(5)]
    assert modulus_of_continuity(const, 0.04) == 0.0
    with pytest.raises(ValueError):
        modulus_of_continuity(states, 0.02, norm="sup")


def test_ustar_distance_is_a_weaker_norm():
    g = make_grid2d(12, 12)
    rng = np.random.default_rng(0)
    a, b = random_field(g, rng), random_field(g, rng)
    d = ustar_distance(a, b)
    l2 = math.sqrt(float(stg.norm2(g.layout, [x - y for x, y in zip(a.components, b.components)])))
    assert 0 < d < l2
    assert ustar_distance(a, a) == 0.0


# ---------------------------------------------------------------------------
# ledgers


def test_slope_fit_recovers_power_law():
    eps = [0.25, 0.125, 0.0625, 0.03125]
    f = slope_fit(eps, [3.0 * e**1.5 for e in eps])
    assert f["slope"] == pytest.approx(1.5, abs=1e-12)
    assert f["ci95"][0] <= 1.5 <= f["ci95"][1]
    assert math.isnan(slope_fit(eps, [1, 0, 1, 1])["slope"])
    assert slope_fit(eps[:2], [1.0, 0.5])["slope"] == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 100))
def test_slope_fit_property(p, c):
    eps = [0.3, 0.1, 0.05, 0.02]
    assert slope_fit(eps, [c * e**p for e in eps])["slope"] == pytest.approx(p, abs=1e-9)


def _fake_ensemble(eps_list, n=11, B=5, seed=0):
    rng = np.random.default_rng(seed)
    ens = {}
    for eps in eps_list:
        base = rng.uniform(0.5, 1.5, size=(n, B))
        e = EnsembleSeries(eps, 0.1, energy=eps * base, enstrophy=eps * base)
        e.beta_energy = eps * base
        e.beta_enstrophy = base
        ens[eps] = e
    return ens


def test_beta_and_moment_ledgers_scaling():
    eps_list = [0.2, 0.1, 0.05]
    ens = _fake_ensemble(eps_list)
    # identical sample draws at every eps make the slopes exact
    for e in ens.values():
        e.beta_energy = e.eps * ens[0.2].beta_energy / 0.2
        e.energy = e.beta_energy
        e.enstrophy = e.beta_energy
    rows, fits = beta_scaling_ledger(ens, (2, 4))
    assert fits["beta_sup_p2"]["slope"] == pytest.approx(1.0, abs=1e-12)
    assert fits["beta_sup_p4"]["slope"] == pytest.approx(2.0, abs=1e-12)
    assert {r["metric"] for r in rows} >= {"beta_sup_over_eps", "beta_grad_over_eps", "beta_sup_p4"}
    mrows, mfits = moment_ledger(ens, (2, 4))
    assert mfits["moment_sup_p4"]["slope"] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        beta_scaling_ledger({})


def test_energy_ledger_flags_violation():
    traj = _short_traj()
    led = energy_ledger(traj, None, 0.05)
    assert led["passed"] and led["violations"] == 0 and led["steps"] == 10
    s = traj.series
    s.balance_lhs[3] = s.balance_rhs[3] + 1e-3
    led = energy_ledger(s, None, 0.05)
    assert not led["passed"] and led["violations"] == 1


# ---------------------------------------------------------------------------
# the coupled experiment


def test_zero_data_gives_zero_error():
    cfg = config_from_dict(small(forcing={"noise": [], "force": [], "initial": [],
                                          "perturbation": {"kind": "none"}}))
    rep = run_convergence(cfg)
    assert all(v == 0.0 for v in rep.series("err_L2"))
    assert rep.checks["energy_pathwise"]["passed"]


def test_z_independent_data_give_negligible_error():
    cfg = config_from_dict(small(forcing={"perturbation": {"kind": "none"}}))
    rep = run_convergence(cfg)
    assert max(rep.series("err_L2")) <= 1e-12
    assert rep.checks["coupling"]["passed"]


def test_small_run_report_and_roundtrip(tmp_path):
    cfg = config_from_dict(small())
    rep = run_convergence(cfg)
    c = rep.checks
    for name in ("coupling", "err_L2_strictly_decreasing", "beta_p2_slope", "beta_p4_slope",
                 "energy_pathwise", "modulus_monotone_in_delta", "complete"):
        assert c[name]["passed"], name
    assert rep.fits["beta_sup_p2"]["slope"] == pytest.approx(1.0, abs=1e-6)
    pj, pc = write_report(rep, tmp_path)
    back = read_report(pj)
    assert back.to_json() == rep.to_json()
    assert back.to_csv() == pc.read_text()
    header = pc.read_text().splitlines()[0]
    assert header == "schema_version,eps,metric,value,stderr"
    d = json.loads(pj.read_text())
    d["schema_version"] = 99
    with pytest.raises(ValueError):
        ConvergenceReport.from_dict(d)


def test_runs_reproducible():
    cfg = config_from_dict(small(T=0.01))
    assert run_convergence(cfg).to_csv() == run_convergence(config_from_dict(small(T=0.01))).to_csv()


# ---------------------------------------------------------------------------
# command line


def _cfg_file(tmp_path, **changes):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(small(**changes)))
    return p


def test_cli_usage_errors(capsys):
    assert cli_main(["bogus"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "usage" and err["exit_code"] == 2
    assert cli_main(["check-ops", "--grid", "1,2"]) == 2
    assert cli_main(["run3d", "--config", "x.toml"]) == 2


def test_cli_config_error(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(small(nu=-1)))
    assert cli_main(["converge", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "config"
    assert cli_main(["report", "--in", str(tmp_path / "missing.json")]) == 1


def test_cli_check_ops(tmp_path, capsys):
    out = tmp_path / "ops.json"
    code = cli_main(["check-ops", "--grid", "8,8,4", "--eps", "0.25", "--eps", "0.125",
                     "--eps", "0.0625", "--n-fields", "8", "--out", str(out)])
    d = json.loads(out.read_text())
    assert code == 0 and d["passed"]
    assert any(r["name"] == "ladyzhenskaya_trend" for r in d["reports"])


def test_cli_run_and_converge(tmp_path, capsys):
    cfg = _cfg_file(tmp_path)
    o3 = tmp_path / "r3"
    assert cli_main(["run3d", "--config", str(cfg), "--eps", "0.125", "--out", str(o3),
                     "--dump-every", "4"]) == 0
    lines = (o3 / "trajectory.csv").read_text().splitlines()
    assert lines[0].startswith("t,energy,enstrophy") and len(lines) == 10
    assert (o3 / "fields" / "step000004.u1.bin").exists()
    o2 = tmp_path / "r2"
    assert cli_main(["run2d", "--config", str(cfg), "--out", str(o2)]) == 0
    assert (o2 / "fields" / "step000008.u2.json").exists()
    oc = tmp_path / "conv"
    assert cli_main(["converge", "--config", str(cfg), "--out", str(oc)]) == 0
    capsys.readouterr()
    assert cli_main(["report", "--in", str(oc / "report.json"), "--format", "csv"]) == 0
    assert capsys.readouterr().out == (oc / "report.csv").read_text()
    assert cli_main(["report", "--in", str(oc / "report.json"), "--format", "json",
                     "--out", str(tmp_path / "r.json")]) == 0
    assert (tmp_path / "r.json").read_text() == (oc / "report.json").read_text()
