"""Vertical averaging operators on the thin domain and checkers for their identities.

Averages are plain means over the ``nz`` cells of a column. With the midpoint
quadrature this makes every scaling identity exact rather than approximate.
All operators accept fields with leading batch axes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import staggered as stg
from .grid import (Grid2D, Grid3D, GridMismatchError, SField2D, SField3D, VField2D,
                   VField3D, make_grid3d)


@dataclass
class OperatorReport:
    """Verdict of one identity or inequality check.

    Identities pass when ``|lhs - rhs| <= tolerance * max(1, |rhs|)``,
    inequalities when ``lhs <= rhs * (1 + tolerance)``.
    """

    name: str
    kind: str  # "identity" | "inequality" | "trend"
    lhs: float
    rhs: float
    ratio: float
    tolerance: float
    passed: bool
    applicable: bool = True
    n_samples: int = 1
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def identity_report(name: str, lhs, rhs, tolerance: float, **details) -> OperatorReport:
    """Aggregate batched identity values into one report (worst sample kept)."""
    lhs = np.atleast_1d(np.asarray(lhs, dtype=float))
    rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
    lhs, rhs = np.broadcast_arrays(lhs, rhs)
    excess = np.abs(lhs - rhs) / np.maximum(1.0, np.abs(rhs))
    i = int(np.argmax(excess))
    ratio = float(lhs[i] / rhs[i]) if rhs[i] != 0 else (1.0 if lhs[i] == 0 else np.inf)
    return OperatorReport(name, "identity", float(lhs[i]), float(rhs[i]), ratio, tolerance,
                          bool(np.all(excess <= tolerance)), True, int(lhs.size),
                          {"max_scaled_error": float(excess[i]), **details})


def inequality_report(name: str, lhs, rhs, tolerance: float, **details) -> OperatorReport:
    lhs = np.atleast_1d(np.asarray(lhs, dtype=float))
    rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
    lhs, rhs = np.broadcast_arrays(lhs, rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
    i = int(np.argmax(r))
    ok = np.all(lhs <= rhs * (1.0 + tolerance))
    return OperatorReport(name, "inequality", float(lhs[i]), float(rhs[i]), float(r[i]),
                          tolerance, bool(ok), True, int(lhs.size), details)


# ---------------------------------------------------------------------------
# scalar operators


def _zmean(x: np.ndarray) -> np.ndarray:
    return np.mean(x, axis=-1)


def m_eps(psi: SField3D) -> SField2D:
    """Columnwise vertical mean of a cell scalar."""
    return SField2D(_zmean(psi.values), psi.grid.base)


def hat_m(psi: SField3D) -> SField3D:
    """Vertical mean replicated along the column."""
    m = _zmean(psi.values)[..., None]
    return SField3D(np.broadcast_to(m, psi.values.shape).copy(), psi.grid)


def hat_n(psi: SField3D) -> SField3D:
    """Oscillating part ``psi - hat_m(psi)``; zero columnwise mean."""
    return SField3D(psi.values - _zmean(psi.values)[..., None], psi.grid)


# ---------------------------------------------------------------------------
# vector operators


def _mean_part(x: np.ndarray) -> np.ndarray:
    return np.broadcast_to(_zmean(x)[..., None], x.shape).copy()


def tilde_m(u: VField3D) -> VField3D:
    """Averaged horizontal components, vertical component dropped."""
    return VField3D(_mean_part(u.u1), _mean_part(u.u2), np.zeros_like(u.u3), u.grid)


def tilde_n(u: VField3D) -> VField3D:
    """``u - tilde_m(u)`` = (oscillating u1, oscillating u2, u3)."""
    return VField3D(u.u1 - _zmean(u.u1)[..., None], u.u2 - _zmean(u.u2)[..., None],
                    u.u3.copy(), u.grid)


def circ_m(u: VField3D) -> VField2D:
    """2D field of vertical means of the horizontal components."""
    return VField2D(_zmean(u.u1), _zmean(u.u2), u.grid.base)


def retract(v: VField2D, grid: Grid3D) -> VField3D:
    """z-independent lift of a base-domain field with zero vertical component."""
    if not grid.pairs_with(v.grid):
        raise GridMismatchError(f"{v.grid} is not the base of {grid}")
    nz = grid.nz
    u1 = np.repeat(v.u1[..., None], nz, axis=-1)
    u2 = np.repeat(v.u2[..., None], nz, axis=-1)
    batch = v.u1.shape[:-2]
    u3 = np.zeros(batch + grid.layout.comp_shape(2))
    return VField3D(u1, u2, u3, grid)


# ---------------------------------------------------------------------------
# norms used by the checkers


def _norm2(u) -> np.ndarray:
    return stg.norm2(u.grid.layout, u.components)


def _inner(u, v) -> np.ndarray:
    return stg.inner(u.grid.layout, u.components, v.components)


def _snorm2(p) -> np.ndarray:
    return stg.inner_scalar(p.grid.layout, p.values, p.values)


def _sinner(p, q) -> np.ndarray:
    return stg.inner_scalar(p.grid.layout, p.values, q.values)


def _sgrad_inner(p, q) -> np.ndarray:
    L = p.grid.layout
    return stg.inner(L, stg.gradient(L, p.values), stg.gradient(L, q.values))


def _grad2(u) -> np.ndarray:
    return stg.dirichlet_form(u.grid.layout, u.components)


def _grad_inner(u, v) -> np.ndarray:
    return stg.dirichlet_form(u.grid.layout, u.components, v.components)


def _d3_norm2(u: VField3D) -> np.ndarray:
    return stg.partial_norm2(u.grid.layout, u.components, 2)


def v_norm(u) -> np.ndarray:
    """``(|u|^2 + |grad u|^2)^(1/2)``."""
    return np.sqrt(_norm2(u) + _grad2(u))


def lp_norm(u, p: float) -> np.ndarray:
    return stg.lp_norm(u.grid.layout, u.components, p)


# ---------------------------------------------------------------------------
# single-field checkers


def check_pythagoras(u: VField3D, tolerance: float = 1e-12) -> list[OperatorReport]:
    """Value and gradient splittings ``|u|^2 = |tilde_m u|^2 + |tilde_n u|^2``."""
    m, n = tilde_m(u), tilde_n(u)
    return [
        identity_report("pythagoras_l2", _norm2(m) + _norm2(n), _norm2(u), tolerance),
        identity_report("pythagoras_grad", _grad2(m) + _grad2(n), _grad2(u), tolerance),
    ]


def _poincare_slack(grid: Grid3D) -> float:
    return 5.0 * grid.dz**2


def check_poincare(u: VField3D, *, apply_tilde_n: bool = True,
                   tolerance: float | None = None, mean_tol: float = 1e-12) -> OperatorReport:
    """Vertical Poincare inequality ``|w| <= eps |d3 w|``.

    By default ``w = tilde_n(u)``, which always meets the zero-mean hypothesis.
    With ``apply_tilde_n=False`` the field itself is tested and the report is
    flagged inapplicable unless its horizontal components have zero column means
    (``u3`` vanishes on the horizontal faces by construction).
    """
    g = u.grid
    tol = _poincare_slack(g) if tolerance is None else tolerance
    w = tilde_n(u) if apply_tilde_n else u
    scale = np.sqrt(_norm2(u)) + 1e-300
    col_mean = max(float(np.max(np.abs(_zmean(w.u1)))), float(np.max(np.abs(_zmean(w.u2)))))
    applicable = col_mean <= mean_tol * float(np.max(scale))
    lhs = np.sqrt(_norm2(w))
    rhs = g.eps * np.sqrt(_d3_norm2(w))
    rep = inequality_report("poincare", lhs, rhs, tol, dz=g.dz)
    if not applicable:
        rep.applicable = False
        rep.passed = False
        rep.details["reason"] = "column means of horizontal components are not zero"
    return rep


def ladyzhenskaya_ratios(u: VField3D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(c6, c3, valid)`` for ``w = tilde_n(u)``.

    ``c6 = |w|_{L6} / |w|_V`` and ``c3 = |w|_{L3}^2 / (eps |w|_V^2)``; samples with
    a vanishing denominator are marked invalid and given ratio 0.
    """
    w = tilde_n(u)
    vn = v_norm(w)
    valid = vn > 0
    safe = np.where(valid, vn, 1.0)
    c6 = np.where(valid, lp_norm(w, 6.0) / safe, 0.0)
    c3 = np.where(valid, lp_norm(w, 3.0) ** 2 / (u.grid.eps * safe**2), 0.0)
    return c6, c3, valid


def check_ladyzhenskaya(u: VField3D, bound: float = np.inf) -> OperatorReport:
    """Empirical constant ``|tilde_n u|_{L6} / |tilde_n u|_V`` (max over the batch).

    ``bound`` is an optional ceiling for a pass verdict; the meaningful test is
    the trend over a thickness ladder, see :func:`ladyzhenskaya_trend`.
    """
    c6, c3, valid = ladyzhenskaya_ratios(u)
    if not np.any(valid):
        return OperatorReport("ladyzhenskaya", "inequality", 0.0, 0.0, 0.0, 0.0, False,
                              applicable=False, n_samples=0,
                              details={"reason": "zero V-norm; sample skipped"})
    c6v, c3v = np.atleast_1d(c6)[np.atleast_1d(valid)], np.atleast_1d(c3)[np.atleast_1d(valid)]
    c0 = float(np.max(c6v))
    return OperatorReport("ladyzhenskaya", "inequality", c0, bound, c0 / bound if np.isfinite(bound) else 0.0,
                          0.0, bool(c0 <= bound), True, int(c6v.size),
                          {"c0_l6": c0, "c_l3": float(np.max(c3v)), "eps": u.grid.eps})


# ---------------------------------------------------------------------------
# field batteries


def random_vfield(grid: Grid3D, rng: np.random.Generator, batch: int, *,
                  div_free: bool = False, smooth: int = 0) -> VField3D:
    L = grid.layout
    if div_free:
        A = [_smooth(rng.standard_normal((batch,) + s), smooth) for s in stg.potential_shapes(L)]
        comps = stg.curl_3d(L, A)
    else:
        comps = stg.enforce_bc(L, [_smooth(rng.standard_normal((batch,) + L.comp_shape(c)), smooth)
                                   for c in range(3)])
    return VField3D(*comps, grid)


def random_vfield2d(grid: Grid2D, rng: np.random.Generator, batch: int, *,
                    div_free: bool = False) -> VField2D:
    L = grid.layout
    if div_free:
        psi = rng.standard_normal((batch,) + tuple(n + 1 for n in L.cells))
        comps = stg.curl_2d(L, psi)
    else:
        comps = stg.enforce_bc(L, [rng.standard_normal((batch,) + L.comp_shape(c)) for c in range(2)])
    return VField2D(*comps, grid)


def random_sfield(grid: Grid3D, rng: np.random.Generator, batch: int) -> SField3D:
    return SField3D(rng.standard_normal((batch,) + grid.layout.cells), grid)


def _smooth(x: np.ndarray, passes: int) -> np.ndarray:
    for _ in range(passes):
        for ax in range(-3, 0):
            lo = np.take(x, [0], axis=ax)
            hi = np.take(x, [-1], axis=ax)
            xp = np.concatenate([lo, x, hi], axis=ax)
            n = x.shape[ax]
            x = 0.25 * np.take(xp, range(0, n), axis=ax) + 0.5 * x \
                + 0.25 * np.take(xp, range(2, n + 2), axis=ax)
    return x


def bump_vfield(grid: Grid3D, rng: np.random.Generator, batch: int,
                radius: float = 1.5, vmodes: int = 2) -> VField3D:
    """Divergence-free curl of compactly supported bumps of horizontal radius ``radius * eps``.

    Bumps are centred in the base domain. The first ``3 * vmodes`` samples are
    pure (one potential component, one vertical mode); the rest mix random
    amplitudes and mode numbers. These fields scale like the extremal functions of the
    anisotropic Sobolev bound, so their ratios do not degrade as ``eps`` shrinks.
    """
    L = grid.layout
    shapes = stg.potential_shapes(L)
    h = (grid.dx, grid.dy, grid.dz)
    r = radius * grid.eps
    comps = []
    modes = rng.integers(1, vmodes + 1, size=(batch, 3))
    amps = rng.standard_normal((batch, 3))
    # leading samples: one unit potential component per vertical mode, so the
    # battery maximum does not hinge on the random mixtures
    for i in range(min(batch, 3 * vmodes)):
        amps[i] = 0.0
        amps[i, i % 3] = 1.0
        modes[i] = i // 3 + 1
    for a, shp in enumerate(shapes):
        coords = []
        for b in range(3):
            n = shp[b]
            # edge potential component a sits at cell centres along a, nodes otherwise
            off = 0.5 if b == a else 0.0
            coords.append((np.arange(n) + off) * h[b])
        X, Y, Z = np.meshgrid(*coords, indexing="ij")
        rho = np.hypot(X - grid.lx / 2, Y - grid.ly / 2) / r
        prof = np.where(rho < 1.0, np.cos(0.5 * np.pi * np.minimum(rho, 1.0)) ** 4, 0.0)
        zarg = np.pi * Z / grid.eps
        vert = np.sin(modes[:, a, None, None, None] * zarg[None])
        comps.append(amps[:, a, None, None, None] * prof[None] * vert)
    return VField3D(*stg.curl_3d(L, comps), grid)


# ---------------------------------------------------------------------------
# lemma suites


def lemma_suite(grid: Grid3D, rng: np.random.Generator, n_fields: int = 100,
                tolerance: float = 1e-12) -> list[OperatorReport]:
    """Every averaging identity on ``n_fields`` random fields of ``grid``."""
    g2 = grid.base
    eps = grid.eps
    psi, xi = random_sfield(grid, rng, n_fields), random_sfield(grid, rng, n_fields)
    u, v = random_vfield(grid, rng, n_fields), random_vfield(grid, rng, n_fields)
    w2 = random_vfield2d(g2, rng, n_fields)
    ud = random_vfield(grid, rng, n_fields, div_free=True)
    reps: list[OperatorReport] = []

    def ident(name, lhs, rhs):
        reps.append(identity_report(name, lhs, rhs, tolerance))

    def zero(name, x, scale):
        # |x| / scale compared with 0
        ident(name, np.abs(x) / scale, 0.0)

    def sdiff(a, b):
        return np.sqrt(_snorm2(SField3D(a.values - b.values, grid)))

    def vdiff(a, b):
        return np.sqrt(_norm2(type(a).from_components(
            [x - y for x, y in zip(a.components, b.components)], a.grid)))

    npsi = np.sqrt(_snorm2(psi))
    nxi = np.sqrt(_snorm2(xi))
    nu_, nv_ = np.sqrt(_norm2(u)), np.sqrt(_norm2(v))

    mp, np_ = hat_m(psi), hat_n(psi)
    # idempotence and annihilation
    zero("hat_m_idempotent", sdiff(hat_m(mp), mp), npsi)
    zero("hat_n_idempotent", sdiff(hat_n(np_), np_), npsi)
    zero("hat_m_hat_n_zero", np.sqrt(_snorm2(hat_m(np_))), npsi)
    zero("hat_n_hat_m_zero", np.sqrt(_snorm2(hat_n(mp))), npsi)
    zero("m_eps_of_hat_n_zero", np.sqrt(np.sum(m_eps(np_).values ** 2, axis=(-2, -1))), npsi)
    # self-adjointness
    ident("hat_m_self_adjoint", _sinner(hat_m(psi), xi) / (npsi * nxi), _sinner(psi, hat_m(xi)) / (npsi * nxi))
    ident("hat_n_self_adjoint", _sinner(hat_n(psi), xi) / (npsi * nxi), _sinner(psi, hat_n(xi)) / (npsi * nxi))
    # orthogonality of ranges, values and gradients
    zero("hat_ranges_orthogonal", _sinner(hat_m(psi), hat_n(xi)), npsi * nxi)
    ng = np.sqrt(_sgrad_inner(psi, psi) * _sgrad_inner(xi, xi))
    zero("hat_ranges_orthogonal_grad", _sgrad_inner(hat_m(psi), hat_n(xi)), ng)
    zero("tilde_ranges_orthogonal", _inner(tilde_m(u), tilde_n(v)), nu_ * nv_)
    ngv = np.sqrt(_grad2(u) * _grad2(v))
    zero("tilde_ranges_orthogonal_grad", _grad_inner(tilde_m(u), tilde_n(v)), ngv)
    zero("tilde_m_idempotent", vdiff(tilde_m(tilde_m(u)), tilde_m(u)), nu_)
    zero("tilde_n_idempotent", vdiff(tilde_n(tilde_n(u)), tilde_n(u)), nu_)
    ident("tilde_m_self_adjoint", _inner(tilde_m(u), v) / (nu_ * nv_), _inner(u, tilde_m(v)) / (nu_ * nv_))
    # Pythagoras
    reps.extend(check_pythagoras(u, tolerance))
    # scaling identities
    ident("scaling_hat_m", _snorm2(mp), eps * np.sum(m_eps(psi).values ** 2, axis=(-2, -1)) * g2.dx * g2.dy)
    ident("scaling_tilde_m", _norm2(tilde_m(u)), eps * _norm2(circ_m(u)))
    ident("scaling_retract", _norm2(retract(w2, grid)), eps * _norm2(w2))
    ident("scaling_retract_grad", _grad2(retract(w2, grid)), eps * _grad2(w2))
    # retract
    zero("circ_m_retract_identity", vdiff(circ_m(retract(w2, grid)), w2), np.sqrt(_norm2(w2)))
    nw = np.sqrt(_norm2(w2))
    ident("retract_dual", _inner(retract(w2, grid), u) / (nw * nu_), eps * _inner(w2, circ_m(u)) / (nw * nu_))
    # divergence preservation
    L3, L2 = grid.layout, g2.layout
    dscale = np.sqrt(_norm2(ud)) / min(grid.dx, grid.dy, grid.dz)
    zero("tilde_m_preserves_div_free",
         np.max(np.abs(stg.divergence(L3, tilde_m(ud).components)), axis=(-3, -2, -1)), dscale)
    zero("tilde_n_preserves_div_free",
         np.max(np.abs(stg.divergence(L3, tilde_n(ud).components)), axis=(-3, -2, -1)), dscale)
    zero("circ_m_preserves_div_free",
         np.max(np.abs(stg.divergence(L2, circ_m(ud).components)), axis=(-2, -1)), dscale)
    w2d = random_vfield2d(g2, rng, n_fields, div_free=True)
    zero("retract_preserves_div_free",
         np.max(np.abs(stg.divergence(L3, retract(w2d, grid).components)), axis=(-3, -2, -1)),
         np.sqrt(_norm2(w2d)) / min(grid.dx, grid.dy))
    for r in reps:
        r.details.setdefault("grid", [grid.nx, grid.ny, grid.nz])
        r.details.setdefault("eps", eps)
    return reps


def poincare_suite(grid: Grid3D, rng: np.random.Generator, n_fields: int = 100) -> list[OperatorReport]:
    """Poincare checks on random smooth/rough and divergence-free fields."""
    reps = []
    for label, u in (("rough", random_vfield(grid, rng, n_fields)),
                     ("smooth", random_vfield(grid, rng, n_fields, smooth=3)),
                     ("div_free", random_vfield(grid, rng, n_fields, div_free=True))):
        r = check_poincare(u)
        r.name = f"poincare_{label}"
        r.details["eps"] = grid.eps
        reps.append(r)
    return reps


def ladyzhenskaya_grid(eps: float, nz: int = 8, cells_per_eps: int = 4) -> Grid3D:
    """Grid whose horizontal resolution scales with ``eps`` (``dx = eps / cells_per_eps``)."""
    n = int(round(cells_per_eps / eps))
    return make_grid3d(n, n, nz, 1.0, 1.0, eps)


def ladyzhenskaya_trend(eps_list, rng: np.random.Generator, n_fields: int = 32, *,
                        nz: int = 8, cells_per_eps: int = 4, slope_tol: float = 0.1) -> OperatorReport:
    """Empirical constant over a thickness ladder and its log-log slope.

    For each ``eps`` the battery holds ``eps``-scaled bumps and random
    divergence-free fields; the constant is the maximum ratio over the battery.
    """
    from scipy.stats import linregress

    c0s, c3s = [], []
    for eps in eps_list:
        g = ladyzhenskaya_grid(eps, nz, cells_per_eps)
        batt = [bump_vfield(g, rng, n_fields), random_vfield(g, rng, n_fields, div_free=True, smooth=1)]
        c6m, c3m = 0.0, 0.0
        for u in batt:
            c6, c3, valid = ladyzhenskaya_ratios(u)
            c6m = max(c6m, float(np.max(np.where(valid, c6, 0.0))))
            c3m = max(c3m, float(np.max(np.where(valid, c3, 0.0))))
        c0s.append(c6m)
        c3s.append(c3m)
    le = np.log(np.asarray(eps_list, dtype=float))
    fit6 = linregress(le, np.log(c0s))
    fit3 = linregress(le, np.log(c3s))
    return OperatorReport("ladyzhenskaya_trend", "trend", float(fit6.slope), 0.0, float(max(c0s)),
                          slope_tol, bool(abs(fit6.slope) <= slope_tol), True, len(eps_list) * 2 * n_fields,
                          {"eps": list(map(float, eps_list)), "c0_l6": c0s, "c_l3": c3s,
                           "slope_l6": float(fit6.slope), "slope_l6_stderr": float(fit6.stderr),
                           "slope_l3": float(fit3.slope), "slope_l3_stderr": float(fit3.stderr)})
