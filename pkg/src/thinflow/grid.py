"""Thin-domain and base-domain geometry, staggered fields and discrete calculus.

The base domain is the rectangle ``(0, lx) x (0, ly)``; the thin domain adds
the vertical interval ``(0, eps)``. Lateral walls are no-slip, the top and
bottom faces are free-slip (``u3 = 0``, ``d3 u1 = d3 u2 = 0``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import staggered as stg

SCHEMA_VERSION = 1


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("need at least 2 cells per axis")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("extents must be positive")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def layout(self) -> stg.Layout:
        return _layout2d(self.nx, self.ny, self.lx, self.ly)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y, indexing="ij")


@dataclass(frozen=True)
class Grid3D:
    nx: int
    ny: int
    nz: int
    lx: float
    ly: float
    eps: float

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 2:
            raise ValueError("need at least 2 cells per axis")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("extents must be positive")
        if not 0.0 < self.eps < 0.5:
            raise ValueError(f"thickness eps must lie in (0, 1/2), got {self.eps}")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def dz(self) -> float:
        return self.eps / self.nz

    @property
    def layout(self) -> stg.Layout:
        return _layout3d(self.nx, self.ny, self.nz, self.lx, self.ly, self.eps)

    @property
    def base(self) -> Grid2D:
        return Grid2D(self.nx, self.ny, self.lx, self.ly)

    def pairs_with(self, g2: Grid2D) -> bool:
        return (self.nx, self.ny) == (g2.nx, g2.ny) and np.isclose(self.lx, g2.lx) \
            and np.isclose(self.ly, g2.ly)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        z = (np.arange(self.nz) + 0.5) * self.dz
        return np.meshgrid(x, y, z, indexing="ij")


_LAYOUTS: dict = {}


def _layout3d(nx, ny, nz, lx, ly, eps):
    key = (nx, ny, nz, lx, ly, eps)
    if key not in _LAYOUTS:
        _LAYOUTS[key] = stg.Layout((nx, ny, nz), (lx / nx, ly / ny, eps / nz),
                                   (False, False, True))
    return _LAYOUTS[key]


def _layout2d(nx, ny, lx, ly):
    key = (nx, ny, lx, ly)
    if key not in _LAYOUTS:
        _LAYOUTS[key] = stg.Layout((nx, ny), (lx / nx, ly / ny), (False, False))
    return _LAYOUTS[key]


def make_grid3d(nx: int, ny: int, nz: int, lx: float = 1.0, ly: float = 1.0,
                eps: float = 0.25) -> Grid3D:
    return Grid3D(int(nx), int(ny), int(nz), float(lx), float(ly), float(eps))


def make_grid2d(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> Grid2D:
    return Grid2D(int(nx), int(ny), float(lx), float(ly))


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class VField3D:
    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray
    grid: Grid3D = field(repr=False)

    def __post_init__(self):
        stg.check_shapes(self.grid.layout, self.components)

    @property
    def components(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.u1, self.u2, self.u3)

    @classmethod
    def from_components(cls, comps, grid: Grid3D) -> "VField3D":
        return cls(*comps, grid=grid)

    def __add__(self, other: "VField3D") -> "VField3D":
        _same(self.grid, other.grid)
        return VField3D.from_components([a + b for a, b in zip(self.components, other.components)], self.grid)

    def __sub__(self, other: "VField3D") -> "VField3D":
        _same(self.grid, other.grid)
        return VField3D.from_components([a - b for a, b in zip(self.components, other.components)], self.grid)

    def __mul__(self, s: float) -> "VField3D":
        return VField3D.from_components([a * s for a in self.components], self.grid)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class VField2D:
    u1: np.ndarray
    u2: np.ndarray
    grid: Grid2D = field(repr=False)

    def __post_init__(self):
        stg.check_shapes(self.grid.layout, self.components)

    @property
    def components(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.u1, self.u2)

    @classmethod
    def from_components(cls, comps, grid: Grid2D) -> "VField2D":
        return cls(*comps, grid=grid)

    def __add__(self, other: "VField2D") -> "VField2D":
        _same(self.grid, other.grid)
        return VField2D.from_components([a + b for a, b in zip(self.components, other.components)], self.grid)

    def __sub__(self, other: "VField2D") -> "VField2D":
        _same(self.grid, other.grid)
        return VField2D.from_components([a - b for a, b in zip(self.components, other.components)], self.grid)

    def __mul__(self, s: float) -> "VField2D":
        return VField2D.from_components([a * s for a in self.components], self.grid)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class SField3D:
    values: np.ndarray
    grid: Grid3D = field(repr=False)

    def __post_init__(self):
        _check_scalar(self.values, self.grid)


@dataclass(frozen=True, eq=False)
class SField2D:
    values: np.ndarray
    grid: Grid2D = field(repr=False)

    def __post_init__(self):
        _check_scalar(self.values, self.grid)


def _check_scalar(values, grid):
    cells = grid.layout.cells
    if values.shape[values.ndim - len(cells):] != cells:
        raise ValueError(f"scalar shape {values.shape} != (..., {cells})")


def _same(g1, g2):
    if g1 != g2:
        raise GridMismatchError(f"fields live on different grids: {g1} vs {g2}")


def _vcls(grid):
    return VField3D if isinstance(grid, Grid3D) else VField2D


def _scls(grid):
    return SField3D if isinstance(grid, Grid3D) else SField2D


def zero_field(grid):
    return _vcls(grid).from_components(stg.zeros(grid.layout), grid)


def apply_bc(u):
    """Zero the normal velocity on every boundary face."""
    return type(u).from_components(stg.enforce_bc(u.grid.layout, u.components), u.grid)


def random_field(grid, rng: np.random.Generator, *, div_free: bool = False, smooth: int = 0):
    """Random velocity field satisfying the boundary conditions.

    ``div_free=True`` builds it as a discrete curl of a random potential, which
    makes the discrete divergence vanish to rounding. ``smooth`` applies that
    many passes of a 3-point filter to the potential/components.
    """
    L = grid.layout
    if div_free:
        if L.ndim == 3:
            A = [_smooth(rng.standard_normal(s), smooth) for s in stg.potential_shapes(L)]
            comps = stg.curl_3d(L, A)
        else:
            psi = _smooth(rng.standard_normal(tuple(n + 1 for n in L.cells)), smooth)
            comps = stg.curl_2d(L, psi)
        return _vcls(grid).from_components(comps, grid)
    comps = [_smooth(rng.standard_normal(L.comp_shape(c)), smooth) for c in range(L.ndim)]
    return _vcls(grid).from_components(stg.enforce_bc(L, comps), grid)


def _smooth(x, passes):
    for _ in range(passes):
        for ax in range(x.ndim):
            xp = np.concatenate([x[(slice(None),) * ax + (slice(0, 1),)], x,
                                 x[(slice(None),) * ax + (slice(-1, None),)]], axis=ax)
            n = x.shape[ax]
            x = 0.25 * np.take(xp, range(0, n), axis=ax) + 0.5 * x \
                + 0.25 * np.take(xp, range(2, n + 2), axis=ax)
    return x


# ---------------------------------------------------------------------------
# calculus


def inner_l2_3d(a: VField3D, b: VField3D) -> float:
    _same(a.grid, b.grid)
    return float(stg.inner(a.grid.layout, a.components, b.components))


def inner_l2_2d(a: VField2D, b: VField2D) -> float:
    _same(a.grid, b.grid)
    return float(stg.inner(a.grid.layout, a.components, b.components))


def inner_l2(a, b) -> float:
    _same(a.grid, b.grid)
    return float(stg.inner(a.grid.layout, a.components, b.components))


def norm_l2(a) -> float:
    return float(np.sqrt(stg.norm2(a.grid.layout, a.components)))


def inner_scalar(p, q) -> float:
    _same(p.grid, q.grid)
    return float(stg.inner_scalar(p.grid.layout, p.values, q.values))


def grad_norm2(a) -> float:
    """Squared L2 norm of the (discrete) velocity gradient."""
    return float(stg.dirichlet_form(a.grid.layout, a.components))


def grad_inner(a, b) -> float:
    _same(a.grid, b.grid)
    return float(stg.dirichlet_form(a.grid.layout, a.components, b.components))


def divergence3d(u: VField3D) -> SField3D:
    return SField3D(stg.divergence(u.grid.layout, u.components), u.grid)


def divergence2d(u: VField2D) -> SField2D:
    return SField2D(stg.divergence(u.grid.layout, u.components), u.grid)


def gradient3d(p: SField3D) -> VField3D:
    return VField3D.from_components(stg.gradient(p.grid.layout, p.values), p.grid)


def gradient2d(p: SField2D) -> VField2D:
    return VField2D.from_components(stg.gradient(p.grid.layout, p.values), p.grid)


def laplacian3d(u: VField3D) -> VField3D:
    return VField3D.from_components(stg.laplacian(u.grid.layout, u.components), u.grid)


def laplacian2d(u: VField2D) -> VField2D:
    return VField2D.from_components(stg.laplacian(u.grid.layout, u.components), u.grid)


def divergence(u):
    return _scls(u.grid)(stg.divergence(u.grid.layout, u.components), u.grid)


def max_abs_divergence(u) -> float:
    return float(np.max(np.abs(stg.divergence(u.grid.layout, u.components))))


# ---------------------------------------------------------------------------
# field dumps: flat little-endian float64 + JSON sidecar per component


def dump_field(u, path: str | Path, name: str = "field") -> list[Path]:
    """Write each component as ``<name>.<comp>.bin`` with a ``.json`` sidecar."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    g = u.grid
    spacings = [g.dx, g.dy] + ([g.dz] if isinstance(g, Grid3D) else [])
    written = []
    for cname, arr in zip(("u1", "u2", "u3"), u.components):
        b = path / f"{name}.{cname}.bin"
        np.ascontiguousarray(arr, dtype="<f8").tofile(b)
        meta = {
            "schema_version": SCHEMA_VERSION,
            "component": cname,
            "shape": list(arr.shape),
            "spacings": spacings,
            "eps": g.eps if isinstance(g, Grid3D) else None,
            "extents": [g.lx, g.ly],
            "cells": list(g.layout.cells),
        }
        b.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        written.append(b)
    return written


def load_field(path: str | Path, name: str = "field"):
    """Inverse of :func:`dump_field`; the grid is rebuilt from the sidecars."""
    path = Path(path)
    metas, arrays = [], []
    for cname in ("u1", "u2", "u3"):
        j = path / f"{name}.{cname}.json"
        if not j.exists():
            break
        meta = json.loads(j.read_text())
        arr = np.fromfile(path / f"{name}.{cname}.bin", dtype="<f8").reshape(meta["shape"])
        metas.append(meta)
        arrays.append(arr)
    if not metas:
        raise FileNotFoundError(f"no field dump named {name!r} in {path}")
    m = metas[0]
    lx, ly = m["extents"]
    cells = m["cells"]
    if len(arrays) == 3:
        grid = make_grid3d(cells[0], cells[1], cells[2], lx, ly, m["eps"])
        return VField3D.from_components(arrays, grid)
    return VField2D.from_components(arrays, make_grid2d(cells[0], cells[1], lx, ly))


def grid_mismatch_check(*fields) -> None:
    g0 = fields[0].grid
    for f in fields[1:]:
        _same(g0, f.grid)
