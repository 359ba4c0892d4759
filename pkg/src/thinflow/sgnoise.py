"""Finite-dimensional Wiener process and additive forcing families.

The same Brownian increments drive the 2D system and every thin-domain
system; thin-domain coefficients are the z-independent lifts of the 2D ones,
so averaging a 3D noise increment reproduces the 2D increment exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import staggered as stg
from .avgops import circ_m, retract
from .grid import Grid2D, Grid3D, VField2D, VField3D, load_field, make_grid3d

MAX_MODES = 64


class ForcingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BrownianPaths:
    """Increments of an ``n_modes``-dimensional Brownian motion.

    ``increments`` has shape ``(n_steps, n_modes)`` (or ``(batch, n_steps, n_modes)``
    when several sample paths are stacked), each entry N(0, dt).
    """

    n_modes: int
    dt: float
    n_steps: int
    increments: np.ndarray
    seed: Any

    def W(self) -> np.ndarray:
        """Path values at the step times, starting from W(0) = 0."""
        inc = self.increments
        zero = np.zeros(inc.shape[:-2] + (1, inc.shape[-1]))
        return np.concatenate([zero, np.cumsum(inc, axis=-2)], axis=-2)


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (list, tuple)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(int(seed))


def n_steps_for(dt: float, T: float) -> int:
    if not dt > 0 or not T > 0:
        raise ValueError("dt and T must be positive")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide T={T}")
    return n


def make_paths(n_modes: int, dt: float, T: float, seed) -> BrownianPaths:
    """Brownian increments from a counter-based (Philox) stream keyed by ``seed``.

    ``seed`` may be an int, a sequence of ints (e.g. ``(base_seed, sample)``)
    or a ``SeedSequence``.
    """
    if n_modes < 0 or n_modes > MAX_MODES:
        raise ValueError(f"number of noise modes must be in [0, {MAX_MODES}]")
    n = n_steps_for(dt, T)
    gen = np.random.Generator(np.random.Philox(_seed_sequence(seed)))
    inc = gen.standard_normal((n, n_modes)) * np.sqrt(dt)
    return BrownianPaths(n_modes, float(dt), n, inc, seed)


def stack_paths(paths: Sequence[BrownianPaths]) -> np.ndarray:
    """Increments of several sample paths as ``(batch, n_steps, n_modes)``."""
    if not paths:
        raise ValueError("no paths")
    p0 = paths[0]
    for p in paths:
        if (p.n_modes, p.n_steps, p.dt) != (p0.n_modes, p0.n_steps, p0.dt):
            raise ValueError("incompatible Brownian paths")
    return np.stack([p.increments for p in paths])


# ---------------------------------------------------------------------------
# coefficient modes


def trig_mode(grid: Grid2D, kx: int, ky: int, amplitude: float = 1.0) -> VField2D:
    """Curl of the stream function ``a sin(kx pi x / lx) sin(ky pi y / ly)``."""
    x = np.arange(grid.nx + 1) * grid.dx
    y = np.arange(grid.ny + 1) * grid.dy
    psi = amplitude * np.outer(np.sin(kx * np.pi * x / grid.lx), np.sin(ky * np.pi * y / grid.ly))
    return VField2D(*stg.curl_2d(grid.layout, psi), grid)


def bump_mode(grid: Grid2D, center, radius: float, amplitude: float = 1.0) -> VField2D:
    """Curl of a compactly supported bump stream function ``a cos^4(pi r / 2R)``."""
    x = np.arange(grid.nx + 1) * grid.dx
    y = np.arange(grid.ny + 1) * grid.dy
    X, Y = np.meshgrid(x, y, indexing="ij")
    rho = np.hypot(X - center[0], Y - center[1]) / radius
    psi = amplitude * np.where(rho < 1.0, np.cos(0.5 * np.pi * np.minimum(rho, 1.0)) ** 4, 0.0)
    return VField2D(*stg.curl_2d(grid.layout, psi), grid)


def mode_from_descriptor(grid: Grid2D, desc: dict, base_dir: str | Path = ".") -> VField2D:
    """Build a coefficient field from a config descriptor.

    Supported types: ``trig`` (``kx``, ``ky``, ``amplitude``), ``bump``
    (``center``, ``radius``, ``amplitude``) and ``dump`` (``path``, ``name``).
    """
    kind = desc.get("type")
    amp = float(desc.get("amplitude", 1.0))
    if kind == "trig":
        return trig_mode(grid, int(desc["kx"]), int(desc["ky"]), amp)
    if kind == "bump":
        return bump_mode(grid, desc["center"], float(desc["radius"]), amp)
    if kind == "dump":
        v = load_field(Path(base_dir) / desc["path"], desc.get("name", "field"))
        if not isinstance(v, VField2D) or (v.grid.nx, v.grid.ny) != (grid.nx, grid.ny):
            raise ForcingError(f"dumped field {desc['path']} does not match the base grid")
        return VField2D(v.u1 * amp, v.u2 * amp, grid)
    raise ForcingError(f"unknown mode type {kind!r}")


# ---------------------------------------------------------------------------
# forcing families


@dataclass(eq=False)
class ForcingFamily:
    """Noise coefficients, deterministic forcing and initial data for every thickness.

    Coefficients and forcing are time-independent. ``lifts[eps]`` holds the
    thin-domain coefficients, ``f3d[eps]`` the lifted forcing and ``u0_3d[eps]``
    the lifted initial datum.
    """

    base: Grid2D
    g2d: list[VField2D]
    f2d: VField2D
    u0_2d: VField2D
    grids: dict[float, Grid3D] = field(default_factory=dict)
    lifts: dict[float, list[VField3D]] = field(default_factory=dict)
    f3d: dict[float, VField3D] = field(default_factory=dict)
    u0_3d: dict[float, VField3D] = field(default_factory=dict)

    @property
    def n_modes(self) -> int:
        return len(self.g2d)

    def coefficient_stack(self, eps: float | None = None) -> tuple[np.ndarray, ...]:
        """Coefficients stacked per component as ``(n_modes, *component_shape)``."""
        fields = self.g2d if eps is None else self.lifts[eps]
        grid = self.base if eps is None else self.grids[eps]
        L = grid.layout
        if not fields:
            return tuple(np.zeros((0,) + L.comp_shape(c)) for c in range(L.ndim))
        return tuple(np.stack([f.components[c] for f in fields]) for c in range(L.ndim))


def _div_free(v: VField2D, tol: float) -> bool:
    L = v.grid.layout
    d = np.max(np.abs(stg.divergence(L, v.components)))
    scale = max(np.max(np.abs(v.u1)), np.max(np.abs(v.u2)), 1e-300) / min(v.grid.dx, v.grid.dy)
    return d <= tol * scale


def make_forcing(g2d: Sequence[VField2D], f2d: VField2D | None, eps_list: Sequence[float], *,
                 nz: int = 8, u0: VField2D | None = None, base: Grid2D | None = None,
                 div_tol: float = 1e-12) -> ForcingFamily:
    """Lift coefficients, forcing and initial data to every thickness by ``retract``.

    Coefficients must be discretely divergence-free with zero normal trace.
    """
    g2d = list(g2d)
    if len(g2d) > MAX_MODES:
        raise ForcingError(f"at most {MAX_MODES} noise modes are supported")
    grids = [v.grid for v in g2d] + [v.grid for v in (f2d, u0) if v is not None]
    if base is None:
        if not grids:
            raise ForcingError("base grid unknown: pass base= or at least one field")
        base = grids[0]
    for g in grids:
        if g != base:
            raise ForcingError("all fields must share one base grid")
    for j, g in enumerate(g2d):
        if not _div_free(g, div_tol):
            raise ForcingError(f"noise coefficient {j} is not divergence-free")
    zero = VField2D(*stg.zeros(base.layout), base)
    fam = ForcingFamily(base, g2d, f2d if f2d is not None else zero, u0 if u0 is not None else zero)
    for eps in eps_list:
        eps = float(eps)
        g3 = make_grid3d(base.nx, base.ny, nz, base.lx, base.ly, eps)
        fam.grids[eps] = g3
        fam.lifts[eps] = [retract(g, g3) for g in g2d]
        fam.f3d[eps] = retract(fam.f2d, g3)
        fam.u0_3d[eps] = retract(fam.u0_2d, g3)
    return fam


def hs_norm2(family: ForcingFamily, eps: float | None = None) -> float:
    """Squared Hilbert-Schmidt norm ``sum_j |g_j|^2`` (2D if ``eps`` is None)."""
    fields = family.g2d if eps is None else family.lifts[eps]
    return float(sum(stg.norm2(f.grid.layout, f.components) for f in fields))


def noise_field(stack: tuple[np.ndarray, ...], dW: np.ndarray) -> tuple[np.ndarray, ...]:
    """``sum_j g_j dW_j`` for increments ``dW`` of shape ``(..., n_modes)``."""
    return tuple(np.tensordot(dW, s, axes=([-1], [0])) for s in stack)


def stochastic_increment(family: ForcingFamily, paths: BrownianPaths, step: int,
                         eps: float | None = None):
    """Noise increment of one step; ``eps=None`` gives the 2D increment.

    The same Brownian increments are used for every thickness.
    """
    if not 0 <= step < paths.n_steps:
        raise IndexError(f"step {step} outside [0, {paths.n_steps})")
    if paths.n_modes != family.n_modes:
        raise ValueError("paths and family have different numbers of modes")
    dW = paths.increments[..., step, :]
    comps = noise_field(family.coefficient_stack(eps), dW)
    if eps is None:
        return VField2D(*comps, family.base)
    return VField3D(*comps, family.grids[float(eps)])


def check_coupling(family: ForcingFamily, dW: np.ndarray, tol: float = 1e-13) -> float:
    """Max deviation between the averaged 3D increments and the 2D increment.

    Raises ``ForcingError`` above ``tol`` (relative to the 2D increment size).
    """
    inc2 = noise_field(family.coefficient_stack(None), dW)
    scale = max(max(float(np.max(np.abs(c))) for c in inc2) if inc2[0].size else 0.0, 1e-300)
    worst = 0.0
    for eps in family.grids:
        inc3 = VField3D(*noise_field(family.coefficient_stack(eps), dW), family.grids[eps])
        avg = circ_m(inc3)
        d = max(float(np.max(np.abs(a - b))) if a.size else 0.0 for a, b in zip(avg.components, inc2))
        worst = max(worst, d / scale)
    if worst > tol:
        raise ForcingError(f"noise coupling broken: averaged 3D increment differs by {worst:.3e}")
    return worst
