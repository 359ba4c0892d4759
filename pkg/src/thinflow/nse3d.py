"""Stochastic Navier-Stokes on the thin domain.

Semi-implicit Euler-Maruyama: explicit skew-symmetric advection, forcing and
additive noise; implicit viscosity coupled with the pressure so each new
state is exactly (to rounding) divergence-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import staggered as stg
from .grid import SField3D, VField3D, grid_mismatch_check
from .sgnoise import BrownianPaths, ForcingFamily
from .stepper import Integrator, Series, SolverError, SolverParams, energy_residuals, step

__all__ = ["SolverParams", "SolverError", "Trajectory3D", "trilinear_b3", "convect3d",
           "project_div_free", "step_em", "run3d"]


@dataclass(eq=False)
class Trajectory3D:
    """Diagnostics of one thin-domain run plus decimated snapshots."""

    times: np.ndarray
    states: list[tuple[float, VField3D]]
    energy_series: np.ndarray
    enstrophy_series: np.ndarray
    noise_work_series: np.ndarray
    hs_budget_series: np.ndarray
    energy_residual: np.ndarray
    energy_tolerance: np.ndarray
    series: Series = field(repr=False)

    @property
    def final(self) -> VField3D:
        return self.states[-1][1]


def trilinear_b3(u: VField3D, v: VField3D, w: VField3D) -> float:
    """Skew-symmetrised discrete ``int (u . grad) v . w``."""
    grid_mismatch_check(u, v, w)
    return _scalar(stg.trilinear(u.grid.layout, u.components, v.components, w.components))


def convect3d(u: VField3D, v: VField3D) -> VField3D:
    grid_mismatch_check(u, v)
    return VField3D(*stg.convect(u.grid.layout, u.components, v.components), u.grid)


def project_div_free(u: VField3D, params: SolverParams | None = None) -> tuple[VField3D, SField3D]:
    """Discrete Leray projection ``(u - grad phi, phi)`` with a Neumann pressure.

    The Poisson problem is solved exactly by cosine transforms; the divergence
    residual is checked against ``params.poisson_tol``.
    """
    L = u.grid.layout
    comps, phi = stg.project(L, stg.enforce_bc(L, u.components))
    tol = 1e-10 if params is None else params.poisson_tol
    h = min(L.spacing)
    scale = max(1.0, max(float(np.max(np.abs(c))) for c in u.components) / h)
    res = float(np.max(np.abs(stg.divergence(L, comps))))
    if res > tol * scale:
        raise SolverError(f"projection divergence residual {res:.3e} above tolerance")
    return VField3D(*comps, u.grid), SField3D(phi, u.grid)


def step_em(state: VField3D, params: SolverParams, forcing_f: VField3D | None = None,
            noise_inc: VField3D | None = None) -> VField3D:
    """One Euler-Maruyama step."""
    L = state.grid.layout
    f = None if forcing_f is None else forcing_f.components
    xi = None if noise_inc is None else noise_inc.components
    u, _, _ = step(L, state.components, params, f, xi)
    return VField3D(*u, state.grid)


def run3d(u0: VField3D, params: SolverParams, family: ForcingFamily | None = None,
          paths: BrownianPaths | None = None, *, snapshot_every: int = 10,
          residual_tol: float = 1e-8) -> Trajectory3D:
    """Integrate from ``u0`` to ``params.T`` with the family's forcing/noise for ``u0``'s thickness."""
    grid = u0.grid
    f, G = None, None
    if family is not None:
        eps = _match_eps(family, grid)
        f = family.f3d[eps].components
        G = family.coefficient_stack(eps)
        if paths is not None and paths.n_modes != family.n_modes:
            raise ValueError("paths and family have different numbers of modes")
    dW = None if paths is None or G is None else paths.increments
    integ = Integrator(grid.layout, params, f, G)
    _, s, snaps = integ.run(u0.components, dW, snapshot_every=snapshot_every)
    res, tol = energy_residuals(s, residual_tol)
    return Trajectory3D(times=s.times, states=[(s.times[k], VField3D(*u, grid)) for k, u in snaps],
                        energy_series=s.energy, enstrophy_series=s.enstrophy,
                        noise_work_series=s.noise_work, hs_budget_series=s.hs_budget,
                        energy_residual=res, energy_tolerance=tol, series=s)


def _match_eps(family: ForcingFamily, grid) -> float:
    for eps, g in family.grids.items():
        if g == grid:
            return eps
    raise ValueError(f"forcing family has no lift for grid {grid}")


def _scalar(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x
