"""Stochastic Navier-Stokes on the 2D base domain (the thin-domain limit).

Uses the same kernels, time scheme and noise as :mod:`thinflow.nse3d`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import staggered as stg
from .grid import VField2D, grid_mismatch_check
from .sgnoise import BrownianPaths, ForcingFamily
from .stepper import Integrator, Series, SolverParams, energy_residuals, step

__all__ = ["Trajectory2D", "trilinear_b2", "convect2d", "step_em_2d", "run2d"]


@dataclass(eq=False)
class Trajectory2D:
    times: np.ndarray
    states: list[tuple[float, VField2D]]
    energy_series: np.ndarray
    enstrophy_series: np.ndarray
    noise_work_series: np.ndarray
    hs_budget_series: np.ndarray
    energy_residual: np.ndarray
    energy_tolerance: np.ndarray
    series: Series = field(repr=False)

    @property
    def final(self) -> VField2D:
        return self.states[-1][1]


def trilinear_b2(u: VField2D, v: VField2D, w: VField2D) -> float:
    grid_mismatch_check(u, v, w)
    x = np.asarray(stg.trilinear(u.grid.layout, u.components, v.components, w.components))
    return float(x) if x.ndim == 0 else x


def convect2d(u: VField2D, v: VField2D) -> VField2D:
    grid_mismatch_check(u, v)
    return VField2D(*stg.convect(u.grid.layout, u.components, v.components), u.grid)


def step_em_2d(state: VField2D, params: SolverParams, f: VField2D | None = None,
               noise_inc: VField2D | None = None) -> VField2D:
    u, _, _ = step(state.grid.layout, state.components, params,
                   None if f is None else f.components,
                   None if noise_inc is None else noise_inc.components)
    return VField2D(*u, state.grid)


def run2d(u0: VField2D, params: SolverParams, family: ForcingFamily | None = None,
          paths: BrownianPaths | None = None, *, snapshot_every: int = 10,
          residual_tol: float = 1e-8) -> Trajectory2D:
    grid = u0.grid
    f, G = None, None
    if family is not None:
        if family.base != grid:
            raise ValueError("initial datum and forcing family live on different grids")
        f = family.f2d.components
        G = family.coefficient_stack(None)
        if paths is not None and paths.n_modes != family.n_modes:
            raise ValueError("paths and family have different numbers of modes")
    dW = None if paths is None or G is None else paths.increments
    integ = Integrator(grid.layout, params, f, G)
    _, s, snaps = integ.run(u0.components, dW, snapshot_every=snapshot_every)
    res, tol = energy_residuals(s, residual_tol)
    return Trajectory2D(times=s.times, states=[(s.times[k], VField2D(*u, grid)) for k, u in snaps],
                        energy_series=s.energy, enstrophy_series=s.enstrophy,
                        noise_work_series=s.noise_work, hs_budget_series=s.hs_budget,
                        energy_residual=res, energy_tolerance=tol, series=s)
