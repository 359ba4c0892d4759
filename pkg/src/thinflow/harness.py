"""Thickness-ladder convergence experiment, estimate ledgers and reports.

For every sample one Brownian path drives the 2D run and each thin-domain run.
All systems advance in lockstep (batched over samples) so per-step
quantities such as the distance between the averaged 3D state and the 2D
state are accumulated without storing trajectories.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from . import staggered as stg
from .grid import Grid2D, Grid3D, VField2D, VField3D, make_grid2d
from .sgnoise import (ForcingFamily, check_coupling, make_forcing, make_paths,
                      mode_from_descriptor, stack_paths)
from .stepper import Integrator, SolverError, SolverParams

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SimConfig:
    nx: int = 32
    ny: int = 32
    nz: int = 8
    lx: float = 1.0
    ly: float = 1.0
    eps_ladder: list[float] = field(default_factory=lambda: [0.25, 0.125, 0.0625, 0.03125])
    n_samples: int = 32
    nu: float = 0.05
    T: float = 1.0
    dt: float = 2.5e-3
    base_seed: int = 20240611
    noise_modes: list[dict] = field(default_factory=list)
    forcing_modes: list[dict] = field(default_factory=list)
    initial_modes: list[dict] = field(default_factory=list)
    perturbation: dict = field(default_factory=lambda: {"kind": "none"})
    p_list: list[int] = field(default_factory=lambda: [2, 4])
    poisson_tol: float = 1e-10
    poisson_max_iter: int = 200
    energy_rel_tol: float = 1e-8
    coupling_tol: float = 1e-13
    modulus_lags: list[int] = field(default_factory=lambda: [4, 8, 16, 32, 64])
    modulus_stride: int = 4
    base_dir: str = "."

    def validate(self) -> "SimConfig":
        if min(self.nx, self.ny, self.nz) < 2:
            raise ConfigError("grid needs at least 2 cells per axis")
        if not self.eps_ladder:
            raise ConfigError("eps_ladder is empty")
        for e in self.eps_ladder:
            if not 0.0 < e < 0.5:
                raise ConfigError(f"eps {e} outside (0, 1/2)")
        if any(b >= a for a, b in zip(self.eps_ladder, self.eps_ladder[1:])):
            raise ConfigError("eps_ladder must be strictly decreasing")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be at least 1")
        if not (self.nu > 0 and self.T > 0 and self.dt > 0):
            raise ConfigError("nu, T and dt must be positive")
        try:
            self.solver_params().n_steps
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if any(p < 2 for p in self.p_list):
            raise ConfigError("moment orders must be >= 2")
        if len(self.noise_modes) > 64:
            raise ConfigError("at most 64 noise modes")
        if self.modulus_stride < 1:
            raise ConfigError("modulus_stride must be a positive step count")
        if any(int(k) < 1 or int(k) % self.modulus_stride for k in self.modulus_lags):
            raise ConfigError("modulus lags must be positive multiples of modulus_stride")
        kind = self.perturbation.get("kind", "none")
        if kind not in ("none", "oscillating"):
            raise ConfigError(f"unknown perturbation kind {kind!r}")
        return self

    def solver_params(self) -> SolverParams:
        return SolverParams(self.nu, self.dt, self.T, self.poisson_tol, self.poisson_max_iter)

    @property
    def base_grid(self) -> Grid2D:
        return make_grid2d(self.nx, self.ny, self.lx, self.ly)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


_SECTION_KEYS = {
    "grid": {"nx", "ny", "nz", "lx", "ly"},
    "forcing": {"noise", "force", "initial", "perturbation"},
    "seeds": {"base"},
    "tolerances": {"poisson_tol", "poisson_max_iter", "energy_rel", "coupling"},
    "diagnostics": {"modulus_lags", "modulus_stride"},
}
_TOP_KEYS = {"schema_version", "grid", "eps_ladder", "nu", "T", "dt", "n_samples", "forcing",
             "seeds", "tolerances", "p_list", "diagnostics"}


def config_from_dict(raw: dict, base_dir: str | Path = ".") -> SimConfig:
    """Build a config from the nested file schema; unknown keys are rejected."""
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for sec, keys in _SECTION_KEYS.items():
        extra = set(raw.get(sec, {})) - keys
        if extra:
            raise ConfigError(f"unknown keys in [{sec}]: {sorted(extra)}")
    sv = raw.get("schema_version", SCHEMA_VERSION)
    if sv != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {sv}")
    cfg = SimConfig(base_dir=str(base_dir))
    g = raw.get("grid", {})
    try:
        for k in ("nx", "ny", "nz"):
            if k in g:
                setattr(cfg, k, int(g[k]))
        for k in ("lx", "ly"):
            if k in g:
                setattr(cfg, k, float(g[k]))
        if "eps_ladder" in raw:
            cfg.eps_ladder = [float(e) for e in raw["eps_ladder"]]
        for k in ("nu", "T", "dt"):
            if k in raw:
                setattr(cfg, k, float(raw[k]))
        if "n_samples" in raw:
            cfg.n_samples = int(raw["n_samples"])
        if "p_list" in raw:
            cfg.p_list = [int(p) for p in raw["p_list"]]
        f = raw.get("forcing", {})
        cfg.noise_modes = list(f.get("noise", []))
        cfg.forcing_modes = list(f.get("force", []))
        cfg.initial_modes = list(f.get("initial", []))
        cfg.perturbation = dict(f.get("perturbation", {"kind": "none"}))
        if "base" in raw.get("seeds", {}):
            cfg.base_seed = int(raw["seeds"]["base"])
        t = raw.get("tolerances", {})
        cfg.poisson_tol = float(t.get("poisson_tol", cfg.poisson_tol))
        cfg.poisson_max_iter = int(t.get("poisson_max_iter", cfg.poisson_max_iter))
        cfg.energy_rel_tol = float(t.get("energy_rel", cfg.energy_rel_tol))
        cfg.coupling_tol = float(t.get("coupling", cfg.coupling_tol))
        d = raw.get("diagnostics", {})
        if "modulus_lags" in d:
            cfg.modulus_lags = [int(k) for k in d["modulus_lags"]]
        if "modulus_stride" in d:
            cfg.modulus_stride = int(d["modulus_stride"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad config value: {e}") from None
    return cfg.validate()


def load_config(path: str | Path) -> SimConfig:
    """Read a TOML (``.toml``) or JSON config file."""
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text.decode())
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from None
    return config_from_dict(raw, path.parent)


# ---------------------------------------------------------------------------
# initial data and forcing


def _sum_modes(grid: Grid2D, descs, base_dir) -> VField2D | None:
    out = None
    for d in descs:
        v = mode_from_descriptor(grid, d, base_dir)
        out = v if out is None else out + v
    return out


def build_family(cfg: SimConfig) -> ForcingFamily:
    g2 = cfg.base_grid
    noise = [mode_from_descriptor(g2, d, cfg.base_dir) for d in cfg.noise_modes]
    f = _sum_modes(g2, cfg.forcing_modes, cfg.base_dir)
    u0 = _sum_modes(g2, cfg.initial_modes, cfg.base_dir)
    return make_forcing(noise, f, cfg.eps_ladder, nz=cfg.nz, u0=u0, base=g2)


def oscillating_perturbation(grid: Grid3D, target_norm: float, *, kx: int = 1, ky: int = 2,
                             vertical_mode: int = 1) -> VField3D:
    """Divergence-free field with zero column means, fixed in the scaled variable ``z / eps``.

    Built as the oscillating part of the curl of a potential
    ``(a1, a2, 0) sin(m pi z / eps)`` and scaled to the given L2 norm.
    """
    from .avgops import tilde_n

    L = grid.layout
    h = (grid.dx, grid.dy, grid.dz)
    ext = (grid.lx, grid.ly, grid.eps)
    comps = []
    for a, shp in enumerate(stg.potential_shapes(L)):
        if a == 2:
            comps.append(np.zeros(shp))
            continue
        xs = [(np.arange(shp[b]) + (0.5 if b == a else 0.0)) * h[b] / ext[b] for b in range(3)]
        X, Y, Z = np.meshgrid(*xs, indexing="ij")
        if a == 0:
            prof = np.sin(kx * np.pi * X) * np.sin(ky * np.pi * Y)
        else:
            prof = np.sin(ky * np.pi * X) * np.sin(kx * np.pi * Y)
        comps.append(prof * np.sin(vertical_mode * np.pi * Z))
    u = tilde_n(VField3D(*stg.curl_3d(L, comps), grid))
    n = np.sqrt(float(stg.norm2(L, u.components)))
    if n == 0.0:
        return u
    return VField3D(*(c * (target_norm / n) for c in u.components), grid)


def initial_states(cfg: SimConfig, fam: ForcingFamily) -> dict[float, VField3D]:
    out = {}
    pert = cfg.perturbation
    kind = pert.get("kind", "none")
    u0n = np.sqrt(float(stg.norm2(fam.base.layout, fam.u0_2d.components)))
    for eps in cfg.eps_ladder:
        u = fam.u0_3d[eps]
        if kind == "oscillating":
            target = float(pert.get("scale", 1.0)) * u0n * np.sqrt(eps)
            p = oscillating_perturbation(fam.grids[eps], target, kx=int(pert.get("kx", 1)),
                                         ky=int(pert.get("ky", 2)),
                                         vertical_mode=int(pert.get("vertical_mode", 1)))
            u = u + p
        out[eps] = u
    return out


# ---------------------------------------------------------------------------
# U*-surrogate and modulus of continuity


def ustar_transform(L: stg.Layout, u, tol: float = 1e-10, warm: dict | None = None):
    """Apply the inverse discrete Stokes operator twice (linear map).

    ``warm`` (optional, mutated) carries the previous pressures as initial guesses.
    """
    warm = {} if warm is None else warm
    v, q1, _ = stg.stokes_solve(L, u, 1.0, 0.0, tol=tol, q0=warm.get("q1"))
    v, _ = stg.project(L, v)
    w, q2, _ = stg.stokes_solve(L, v, 1.0, 0.0, tol=tol, q0=warm.get("q2"))
    w, _ = stg.project(L, w)
    warm["q1"], warm["q2"] = q1, q2
    return w


def ustar_distance(a, b, tol: float = 1e-10) -> float:
    """Negative-order distance ``|S^-2 (a - b)|_{L2}`` between two fields on one grid."""
    L = a.grid.layout
    d = tuple(x - y for x, y in zip(a.components, b.components))
    w = ustar_transform(L, d, tol)
    return float(np.sqrt(stg.norm2(L, w)))


def modulus_of_continuity(series, delta: float, dt: float | None = None, *,
                          norm: str = "ustar") -> float:
    """``sup_{|t - s| <= delta} dist(u(t), u(s))`` for a uniformly sampled series.

    ``series`` is a list of fields (or of ``(t, field)`` pairs, in which case the
    spacing is taken from the times). ``norm`` is ``"ustar"`` (negative-order
    surrogate) or ``"l2"``. ``delta = 0`` gives 0; ``0 < delta < dt`` is an error.
    """
    items = list(series)
    if items and isinstance(items[0], tuple):
        times = np.array([t for t, _ in items], dtype=float)
        fields = [f for _, f in items]
        if dt is None:
            dt = float(times[1] - times[0]) if len(times) > 1 else 1.0
    else:
        fields = items
    if dt is None or dt <= 0:
        raise ValueError("a positive sampling interval dt is required")
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta == 0 or len(fields) < 2:
        return 0.0
    if delta < dt * (1 - 1e-12):
        raise ValueError(f"delta={delta} is below the sampling interval dt={dt}")
    L = fields[0].grid.layout
    if norm == "ustar":
        z = [ustar_transform(L, f.components) for f in fields]
    elif norm == "l2":
        z = [f.components for f in fields]
    else:
        raise ValueError(f"unknown norm {norm!r}")
    kmax = int(np.floor(delta / dt + 1e-9))
    best = 0.0
    for i in range(len(z)):
        for j in range(i + 1, min(len(z), i + kmax + 1)):
            d = tuple(x - y for x, y in zip(z[i], z[j]))
            best = max(best, float(np.sqrt(stg.norm2(L, d))))
    return best


class _LagTracker:
    """Online per-lag maxima of ``|z(t) - z(t - k h)|`` for lags ``1..K`` (batched).

    ``h`` is the sampling interval of the pushed series; the modulus for
    ``delta = lag * h`` is the maximum over lags ``<= lag``.
    """

    def __init__(self, K: int, batch: int):
        self.K = K
        self.buf: list = []
        self.max = np.zeros((K, batch))
        self.warm: dict = {}

    def push(self, L: stg.Layout, z):
        for k, old in enumerate(reversed(self.buf), start=1):
            d = tuple(x - y for x, y in zip(z, old))
            self.max[k - 1] = np.maximum(self.max[k - 1], np.sqrt(stg.norm2(L, d)))
        self.buf.append(z)
        if len(self.buf) > self.K:
            self.buf.pop(0)

    def modulus(self, lag: int) -> np.ndarray:
        """Per-sample modulus for ``delta = lag * dt``."""
        return np.max(self.max[:lag], axis=0)


# ---------------------------------------------------------------------------
# ensemble statistics


@dataclass
class EnsembleSeries:
    """Per-step, per-sample norms of one system (shape ``(n_steps + 1, n_samples)``)."""

    eps: float | None
    dt: float
    energy: np.ndarray
    enstrophy: np.ndarray
    beta_energy: np.ndarray | None = None
    beta_enstrophy: np.ndarray | None = None
    alpha_energy: np.ndarray | None = None
    alpha_enstrophy: np.ndarray | None = None
    err: np.ndarray | None = None
    balance_lhs: np.ndarray | None = None
    balance_rhs: np.ndarray | None = None
    valid: np.ndarray | None = None

    def mask(self) -> np.ndarray:
        return np.ones(self.energy.shape[1], bool) if self.valid is None else self.valid


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan")
    m = float(np.mean(x))
    se = float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
    return m, se


def _trapz(y: np.ndarray, dt: float) -> np.ndarray:
    return dt * (np.sum(y, axis=0) - 0.5 * (y[0] + y[-1]))


def slope_fit(eps, values) -> dict:
    """Least-squares slope of ``log value`` against ``log eps`` with a 95% interval."""
    e = np.asarray(eps, dtype=float)
    v = np.asarray(values, dtype=float)
    if e.size < 2 or np.any(~np.isfinite(v)) or np.any(v <= 0):
        return {"slope": float("nan"), "intercept": float("nan"), "stderr": float("nan"),
                "ci95": [float("nan"), float("nan")], "n": int(e.size)}
    if e.size == 2:
        s = float(np.diff(np.log(v))[0] / np.diff(np.log(e))[0])
        return {"slope": s, "intercept": float(np.log(v[0]) - s * np.log(e[0])), "stderr": 0.0,
                "ci95": [s, s], "n": 2}
    fit = stats.linregress(np.log(e), np.log(v))
    q = float(stats.t.ppf(0.975, e.size - 2))
    return {"slope": float(fit.slope), "intercept": float(fit.intercept),
            "stderr": float(fit.stderr),
            "ci95": [float(fit.slope - q * fit.stderr), float(fit.slope + q * fit.stderr)],
            "n": int(e.size)}


def _row(eps, metric, values) -> dict:
    m, se = _mean_se(values)
    return {"eps": eps, "metric": metric, "value": m, "stderr": se}


def beta_scaling_ledger(ens: dict[float, EnsembleSeries], p_list=(2, 4)) -> tuple[list[dict], dict]:
    """Oscillating-part ledgers: ``E sup|beta|^p`` and ``E int |grad beta|^2`` with scalings.

    Returns ``(rows, fits)``; fits hold the log-log slope of ``E sup|beta|^p``.
    """
    if not ens:
        raise ValueError("empty ensemble")
    rows, sup_p = [], {p: [] for p in p_list}
    eps_list = sorted(ens, reverse=True)
    for eps in eps_list:
        e = ens[eps]
        m = e.mask()
        if not np.any(m):
            raise ValueError(f"no valid samples at eps={eps}")
        sup2 = np.max(e.beta_energy[:, m], axis=0)
        grad_int = _trapz(e.beta_enstrophy[:, m], e.dt)
        rows.append(_row(eps, "beta_sup_over_eps", sup2 / eps))
        rows.append(_row(eps, "beta_grad_over_eps", grad_int / eps))
        for p in p_list:
            supp = sup2 ** (p / 2)
            rows.append(_row(eps, f"beta_sup_p{p}", supp))
            rows.append(_row(eps, f"beta_sup_p{p}_over_eps_p2", supp / eps ** (p / 2)))
            sup_p[p].append(float(np.mean(supp)))
    fits = {f"beta_sup_p{p}": slope_fit(eps_list, sup_p[p]) for p in p_list}
    return rows, fits


def moment_ledger(ens: dict[Any, EnsembleSeries], p_list=(2, 4)) -> tuple[list[dict], dict]:
    """``E sup|u|^p`` and ``E int |u|^(p-2) |u|_V^2`` (normalised by ``eps^(p/2)`` in 3D)."""
    rows, norm_sup = [], {p: [] for p in p_list}
    eps3 = sorted((k for k in ens if k is not None), reverse=True)
    for key in ([None] if None in ens else []) + eps3:
        e = ens[key]
        m = e.mask()
        E = e.energy[:, m]
        V2 = E + e.enstrophy[:, m]
        for p in p_list:
            scale = 1.0 if key is None else key ** (p / 2)
            sup = np.max(E, axis=0) ** (p / 2) / scale
            integ = _trapz(E ** ((p - 2) / 2) * V2, e.dt) / scale
            label = "2d" if key is None else key
            rows.append(_row(label, f"moment_sup_p{p}", sup))
            rows.append(_row(label, f"moment_int_p{p}", integ))
            if key is not None:
                norm_sup[p].append(float(np.mean(sup)))
    fits = {f"moment_sup_p{p}": slope_fit(eps3, norm_sup[p]) for p in p_list} if len(eps3) >= 2 else {}
    return rows, fits


def dual_norm2(L: stg.Layout, f) -> float:
    """``<f, (-lap)^-1 f>``, the surrogate for the squared dual-space norm."""
    g = stg.helmholtz_solve(L, f, 1.0, 0.0)
    return float(stg.inner(L, f, g))


def energy_ledger(series, family: ForcingFamily | None, nu: float, eps: float | None = None,
                  rel_tol: float = 1e-8) -> dict:
    """Pathwise per-step balance check plus the integrated energy bound.

    ``series`` is a :class:`thinflow.stepper.Series`, a trajectory exposing
    ``.series``, or an :class:`EnsembleSeries` with balance arrays.
    """
    s = getattr(series, "series", series)
    E = np.asarray(s.energy)
    En = np.asarray(s.enstrophy)
    lhs, rhs = np.asarray(s.balance_lhs)[1:], np.asarray(s.balance_rhs)[1:]
    dt = float(s.dt) if hasattr(s, "dt") else float(s.times[1] - s.times[0])
    resid = np.maximum(0.0, lhs - rhs)
    tol = rel_tol * E[:-1]
    viol = resid > tol
    T = dt * (E.shape[0] - 1)
    sup_energy = np.max(E, axis=0)
    diss = nu * _trapz(En, dt)
    lhs_bound = sup_energy + diss
    rhs_base = E[0].copy()
    f_dual, hs = 0.0, 0.0
    if family is not None:
        if eps is None:
            L, f = family.base.layout, family.f2d.components
            hs = sum(float(stg.norm2(L, g.components)) for g in family.g2d)
        else:
            L, f = family.grids[eps].layout, family.f3d[eps].components
            hs = sum(float(stg.norm2(L, g.components)) for g in family.lifts[eps])
        f_dual = dual_norm2(L, f)
        rhs_base = rhs_base + T * f_dual / nu + T * hs
    with np.errstate(divide="ignore", invalid="ignore"):
        K = np.where(rhs_base > 0, lhs_bound / rhs_base, 0.0)
    return {
        "steps": int(resid.size),
        "violations": int(np.sum(viol)),
        "max_residual": float(np.max(resid)) if resid.size else 0.0,
        "max_scaled_residual": float(np.max(np.where(E[:-1] > 0, resid / np.where(E[:-1] > 0, E[:-1], 1), resid)))
        if resid.size else 0.0,
        "rel_tol": rel_tol,
        "passed": bool(not np.any(viol)),
        "sup_energy_plus_dissipation": float(np.mean(lhs_bound)),
        "bound_base": float(np.mean(rhs_base)),
        "empirical_K": float(np.max(K)),
        "forcing_dual_norm2": f_dual,
        "hs_norm2": hs,
    }


# ---------------------------------------------------------------------------
# the experiment


@dataclass
class ConvergenceReport:
    config: dict
    eps_ladder: list[float]
    rows: list[dict]
    fits: dict
    checks: dict
    energy: dict
    modulus: dict
    incomplete: list[dict]
    schema_version: int = SCHEMA_VERSION

    def value(self, eps, metric) -> float:
        for r in self.rows:
            if r["eps"] == eps and r["metric"] == metric:
                return r["value"]
        raise KeyError((eps, metric))

    def series(self, metric) -> list[float]:
        return [self.value(e, metric) for e in self.eps_ladder]

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "config": self.config,
                "eps_ladder": self.eps_ladder, "rows": self.rows, "fits": self.fits,
                "checks": self.checks, "energy": self.energy, "modulus": self.modulus,
                "incomplete": self.incomplete}

    @classmethod
    def from_dict(cls, d: dict) -> "ConvergenceReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {d.get('schema_version')}")
        return cls(d["config"], d["eps_ladder"], d["rows"], d["fits"], d["checks"], d["energy"],
                   d["modulus"], d["incomplete"], d["schema_version"])

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        return report_csv(_clean(self.to_dict()))


def _clean(x):
    """Replace non-finite floats by strings so the JSON stays standard."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, bool):
        return "1" if v else "0"
    if v is None:
        return ""
    return repr(float(v))


def report_csv(d: dict) -> str:
    """Flat rows ``eps, metric, value, stderr`` (fits appear with ``eps = all``)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema_version", "eps", "metric", "value", "stderr"])
    sv = d["schema_version"]
    for r in d["rows"]:
        w.writerow([sv, _fmt(r["eps"]), r["metric"], _fmt(r["value"]), _fmt(r["stderr"])])
    for name in sorted(d["fits"]):
        f = d["fits"][name]
        w.writerow([sv, "all", f"slope:{name}", _fmt(f["slope"]), _fmt(f["stderr"])])
    for name in sorted(d["checks"]):
        w.writerow([sv, "all", f"check:{name}", _fmt(bool(d["checks"][name]["passed"])), ""])
    return buf.getvalue()


def run_convergence(cfg: SimConfig, *, progress=None) -> ConvergenceReport:
    """Run the coupled 2D / thin-domain ensemble over the thickness ladder."""
    cfg.validate()
    params = cfg.solver_params()
    n, dt, B = params.n_steps, params.dt, cfg.n_samples
    fam = build_family(cfg)
    eps_list = [float(e) for e in cfg.eps_ladder]
    paths = [make_paths(fam.n_modes, dt, cfg.T, (cfg.base_seed, s)) for s in range(B)]
    dW = stack_paths(paths) if fam.n_modes else None  # (B, n, N)
    coupling = check_coupling(fam, dW[:, 0, :], cfg.coupling_tol) if dW is not None else 0.0

    L2 = fam.base.layout
    systems: dict[Any, dict] = {}
    integ2 = Integrator(L2, params, fam.f2d.components,
                        fam.coefficient_stack(None) if fam.n_modes else None)
    u2 = tuple(np.broadcast_to(c, (B,) + c.shape).copy() for c in fam.u0_2d.components)
    systems[None] = {"integ": integ2, "L": L2, "u": u2}
    init = initial_states(cfg, fam)
    for eps in eps_list:
        L3 = fam.grids[eps].layout
        integ = Integrator(L3, params, fam.f3d[eps].components,
                           fam.coefficient_stack(eps) if fam.n_modes else None)
        u3 = tuple(np.broadcast_to(c, (B,) + c.shape).copy() for c in init[eps].components)
        systems[eps] = {"integ": integ, "L": L3, "u": u3}

    shp = (n + 1, B)
    stride = cfg.modulus_stride
    K = max(cfg.modulus_lags) // stride if cfg.modulus_lags else 0
    for key, sy in systems.items():
        sy.update(q=None, valid=np.ones(B, bool), reasons={},
                  energy=np.zeros(shp), enstrophy=np.zeros(shp),
                  lhs=np.full(shp, np.nan), rhs=np.full(shp, np.nan))
        if key is not None:
            sy.update(beta_energy=np.zeros(shp), beta_enstrophy=np.zeros(shp),
                      alpha_energy=np.zeros(shp), alpha_enstrophy=np.zeros(shp), err=np.zeros(shp),
                      tracker=_LagTracker(K, B) if K else None)

    def diagnostics(k):
        if k == 0:
            for sy in systems.values():
                sy["energy"][0] = stg.norm2(sy["L"], sy["u"])
                sy["enstrophy"][0] = stg.dirichlet_form(sy["L"], sy["u"])
        uu = systems[None]["u"]
        for eps in eps_list:
            sy = systems[eps]
            L3, u = sy["L"], sy["u"]
            a1, a2 = np.mean(u[0], axis=-1), np.mean(u[1], axis=-1)
            beta = (u[0] - a1[..., None], u[1] - a2[..., None], u[2])
            sy["beta_energy"][k] = stg.norm2(L3, beta)
            sy["beta_enstrophy"][k] = stg.dirichlet_form(L3, beta)
            alpha = (a1, a2)
            sy["alpha_energy"][k] = stg.norm2(L2, alpha)
            sy["alpha_enstrophy"][k] = stg.dirichlet_form(L2, alpha)
            diff = (a1 - uu[0], a2 - uu[1])
            sy["err"][k] = stg.norm2(L2, diff)
            if sy["tracker"] is not None and k % stride == 0:
                tr = sy["tracker"]
                tr.push(L2, ustar_transform(L2, alpha, warm=tr.warm))

    diagnostics(0)
    for k in range(n):
        dWk = None if dW is None else dW[:, k, :]
        for key, sy in systems.items():
            _advance(sy, dWk, k, params)
        diagnostics(k + 1)
        if progress is not None:
            progress(k + 1, n)

    ens: dict[Any, EnsembleSeries] = {}
    incomplete = []
    for key, sy in systems.items():
        valid = sy["valid"] & systems[None]["valid"]
        e = EnsembleSeries(key, dt, sy["energy"], sy["enstrophy"], balance_lhs=sy["lhs"],
                           balance_rhs=sy["rhs"], valid=valid)
        if key is not None:
            e.beta_energy, e.beta_enstrophy = sy["beta_energy"], sy["beta_enstrophy"]
            e.alpha_energy, e.alpha_enstrophy = sy["alpha_energy"], sy["alpha_enstrophy"]
            e.err = sy["err"]
        ens[key] = e
        for s_idx, reason in sorted(sy["reasons"].items()):
            incomplete.append({"eps": "2d" if key is None else key, "sample": s_idx, "reason": reason})
    return _assemble(cfg, fam, ens, systems, eps_list, coupling, incomplete)


def _advance(sy: dict, dWk, k: int, params: SolverParams) -> None:
    integ: Integrator = sy["integ"]
    try:
        u, q, info = integ.advance(sy["u"], dWk, q0=sy["q"], step_index=k)
    except SolverError:
        # isolate the failing samples and continue with the rest
        u, q, info = _advance_per_sample(sy, dWk, k)
    lhs, rhs = info.balance(params.nu, params.dt)
    sy["u"], sy["q"] = u, q
    sy["energy"][k + 1] = info.energy_new
    sy["enstrophy"][k + 1] = info.grad_new
    sy["lhs"][k + 1] = lhs
    sy["rhs"][k + 1] = rhs


def _advance_per_sample(sy, dWk, k):
    integ: Integrator = sy["integ"]
    B = sy["valid"].size
    outs = []
    for b in range(B):
        ub = tuple(c[b:b + 1] for c in sy["u"])
        dwb = None if dWk is None else dWk[b:b + 1]
        if sy["valid"][b]:
            try:
                outs.append(integ.advance(ub, dwb, step_index=k))
                continue
            except SolverError as e:
                sy["valid"][b] = False
                sy["reasons"][b] = str(e)
                log.warning("sample %d aborted: %s", b, e)
        zero = tuple(np.zeros_like(c) for c in ub)
        outs.append(integ.advance(zero, None, step_index=k))
    u = tuple(np.concatenate([o[0][c] for o in outs]) for c in range(len(sy["u"])))
    q = np.concatenate([o[1] for o in outs])
    info = outs[0][2]
    for attr in ("energy_old", "energy_new", "grad_new", "forcing_work", "noise_work", "increment_sq"):
        setattr(info, attr, np.concatenate([np.atleast_1d(getattr(o[2], attr)) for o in outs]))
    return u, q, info


def _trend_ok(fit: dict, min_slope: float = -0.1) -> bool:
    """No upward trend as eps decreases: the log-log slope is not markedly negative."""
    return bool(np.isfinite(fit["slope"]) and fit["slope"] >= min_slope)


def _assemble(cfg, fam, ens, systems, eps_list, coupling, incomplete) -> ConvergenceReport:
    rows: list[dict] = []
    fits: dict = {}
    checks: dict = {}
    dt = cfg.dt
    err_means, alpha_bound = [], []
    for eps in eps_list:
        e = ens[eps]
        m = e.mask()
        err = _trapz(e.err[:, m], dt)
        rows.append(_row(eps, "err_L2", err))
        rows.append(_row(eps, "sup_energy_alpha", np.max(e.alpha_energy[:, m], axis=0)))
        ab = np.max(e.alpha_energy[:, m], axis=0) + cfg.nu * _trapz(e.alpha_enstrophy[:, m], dt)
        rows.append(_row(eps, "alpha_energy_bound", ab))
        rows.append(_row(eps, "n_valid", np.full(1, float(np.sum(m)))))
        err_means.append(float(np.mean(err)))
        alpha_bound.append(float(np.mean(ab)))
    fits["err_L2"] = slope_fit(eps_list, err_means)
    fits["alpha_energy_bound"] = slope_fit(eps_list, alpha_bound)
    brows, bfits = beta_scaling_ledger({e: ens[e] for e in eps_list}, cfg.p_list)
    rows += brows
    fits.update(bfits)
    mrows, mfits = moment_ledger(ens, cfg.p_list)
    rows += mrows
    fits.update(mfits)

    energy = {}
    all_ok = True
    for key in [None] + eps_list:
        e = ens[key]
        led = energy_ledger(_SeriesView(e), fam, cfg.nu, key, cfg.energy_rel_tol)
        energy["2d" if key is None else repr(key)] = led
        all_ok &= led["passed"]
    modulus = {}
    for eps in eps_list:
        tr = systems[eps]["tracker"]
        if tr is None:
            continue
        m = ens[eps].mask()
        modulus[repr(eps)] = {str(k): float(np.max(tr.modulus(k // cfg.modulus_stride)[m]))
                              for k in sorted(cfg.modulus_lags)}
    lags = sorted(cfg.modulus_lags)
    mod_ok = all(all(np.diff([v[str(k)] for k in lags]) >= 0) for v in modulus.values())

    decreasing = all(b < a for a, b in zip(err_means, err_means[1:]))
    checks["coupling"] = {"passed": coupling <= cfg.coupling_tol, "max_deviation": coupling}
    checks["err_L2_strictly_decreasing"] = {"passed": decreasing, "values": err_means}
    checks["err_L2_slope_positive"] = {"passed": bool(fits["err_L2"]["slope"] > 0.5),
                                       "threshold": 0.5, **fits["err_L2"]}
    if 2 in cfg.p_list:
        checks["beta_p2_slope"] = {"passed": bool(fits["beta_sup_p2"]["slope"] >= 0.9), "threshold": 0.9}
    if 4 in cfg.p_list:
        checks["beta_p4_slope"] = {"passed": bool(fits["beta_sup_p4"]["slope"] >= 1.8), "threshold": 1.8}
        if "moment_sup_p4" in fits:
            checks["moment_p4_no_upward_trend"] = {"passed": _trend_ok(fits["moment_sup_p4"]),
                                                   "min_slope": -0.1}
    checks["energy_pathwise"] = {"passed": bool(all_ok)}
    checks["alpha_energy_no_upward_trend"] = {"passed": _trend_ok(fits["alpha_energy_bound"]),
                                              "min_slope": -0.1}
    checks["modulus_monotone_in_delta"] = {"passed": bool(mod_ok)}
    checks["complete"] = {"passed": not incomplete}
    return ConvergenceReport(cfg.to_dict(), eps_list, rows, fits, checks, energy, modulus, incomplete)


class _SeriesView:
    """Adapter giving an EnsembleSeries the attributes energy_ledger reads."""

    def __init__(self, e: EnsembleSeries):
        m = e.mask()
        self.dt = e.dt
        self.energy = e.energy[:, m]
        self.enstrophy = e.enstrophy[:, m]
        self.balance_lhs = e.balance_lhs[:, m]
        self.balance_rhs = e.balance_rhs[:, m]


def write_report(rep: ConvergenceReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pj, pc = out / "report.json", out / "report.csv"
    pj.write_text(rep.to_json())
    pc.write_text(rep.to_csv())
    return pj, pc


def read_report(path: str | Path) -> ConvergenceReport:
    return ConvergenceReport.from_dict(json.loads(Path(path).read_text()))
