"""Dimension-generic kernels on a staggered (MAC) box grid.

Layout
------
Scalars live at cell centres, shape ``cells``. Velocity component ``c`` lives on
the faces normal to axis ``c``: its array has ``cells[c] + 1`` entries along
axis ``c`` and ``cells[a]`` along every other axis. All arrays may carry
leading batch axes; spatial axes are always the trailing ``ndim`` axes.

Boundary treatment
------------------
* The normal component vanishes on every boundary face (entries ``0`` and
  ``n`` along its own axis are constrained to zero and never updated).
* Tangential components use a ghost reflection across each wall: odd (no-slip)
  on axes flagged ``slip=False``, even (free-slip, zero normal derivative) on
  axes flagged ``slip=True``.

With these conventions every separable operator (vector Laplacian per
component, Neumann Poisson for the pressure) is diagonalised by a
DST-I / DST-II / DCT-II transform per axis, which the solvers below use.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.fft as sfft

Field = tuple[np.ndarray, ...]


@dataclass(frozen=True)
class Layout:
    cells: tuple[int, ...]
    spacing: tuple[float, ...]
    slip: tuple[bool, ...]

    @property
    def ndim(self) -> int:
        return len(self.cells)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def comp_shape(self, c: int) -> tuple[int, ...]:
        return tuple(n + 1 if a == c else n for a, n in enumerate(self.cells))

    def ax(self, a: int) -> int:
        """Array axis of spatial axis ``a`` (counted from the end)."""
        return a - self.ndim

    def spatial_axes(self) -> tuple[int, ...]:
        return tuple(range(-self.ndim, 0))

    @cached_property
    def face_weights(self) -> tuple[np.ndarray, ...]:
        """Midpoint quadrature weights per component (half weight on boundary faces)."""
        out = []
        for c in range(self.ndim):
            w = np.full(self.comp_shape(c), self.cell_volume)
            idx = [slice(None)] * self.ndim
            idx[c] = 0
            w[tuple(idx)] *= 0.5
            idx[c] = -1
            w[tuple(idx)] *= 0.5
            out.append(w)
        return tuple(out)

    @cached_property
    def _eig_cache(self) -> dict:
        return {}


def _sl(ndim_total: int, axis: int, s: slice) -> tuple:
    idx = [slice(None)] * ndim_total
    idx[axis] = s
    return tuple(idx)


def _take(x: np.ndarray, axis: int, s: slice) -> np.ndarray:
    return x[_sl(x.ndim, axis, s)]


# ---------------------------------------------------------------------------
# construction helpers


def zeros(L: Layout, batch: tuple[int, ...] = ()) -> Field:
    return tuple(np.zeros(batch + L.comp_shape(c)) for c in range(L.ndim))


def enforce_bc(L: Layout, u: Field) -> Field:
    """Zero the normal component on boundary faces (returns new arrays)."""
    out = []
    for c, uc in enumerate(u):
        uc = np.array(uc, dtype=float, copy=True)
        ax = L.ax(c)
        uc[_sl(uc.ndim, ax, slice(0, 1))] = 0.0
        uc[_sl(uc.ndim, ax, slice(-1, None))] = 0.0
        out.append(uc)
    return tuple(out)


def check_shapes(L: Layout, u: Field) -> None:
    if len(u) != L.ndim:
        raise ValueError(f"expected {L.ndim} components, got {len(u)}")
    for c, uc in enumerate(u):
        if uc.shape[uc.ndim - L.ndim:] != L.comp_shape(c):
            raise ValueError(
                f"component {c} has shape {uc.shape}, expected (..., {L.comp_shape(c)})")


# ---------------------------------------------------------------------------
# quadrature


def inner(L: Layout, u: Field, v: Field) -> np.ndarray:
    """Weighted L2 inner product; reduces spatial axes only."""
    axes = L.spatial_axes()
    return sum(np.sum(w * a * b, axis=axes) for w, a, b in zip(L.face_weights, u, v))


def norm2(L: Layout, u: Field) -> np.ndarray:
    return inner(L, u, u)


def inner_scalar(L: Layout, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return L.cell_volume * np.sum(p * q, axis=L.spatial_axes())


def lp_norm(L: Layout, u: Field, p: float) -> np.ndarray:
    """(sum_c int |u_c|^p)^(1/p) with the face quadrature.

    The pointwise Euclidean magnitude is not available on a staggered grid
    without interpolation, so the componentwise sum is used; it is equivalent
    to the Euclidean-magnitude norm up to a factor depending on ``ndim`` only.
    """
    axes = L.spatial_axes()
    s = sum(np.sum(w * np.abs(a) ** p, axis=axes) for w, a in zip(L.face_weights, u))
    return s ** (1.0 / p)


# ---------------------------------------------------------------------------
# divergence / gradient


def divergence(L: Layout, u: Field) -> np.ndarray:
    out = 0.0
    for c, uc in enumerate(u):
        ax = L.ax(c)
        out = out + np.diff(uc, axis=ax) / L.spacing[c]
    return out


def gradient(L: Layout, p: np.ndarray) -> Field:
    """Face gradient of a cell scalar; boundary faces carry zero (homogeneous Neumann)."""
    out = []
    for c in range(L.ndim):
        ax = L.ax(c)
        d = np.diff(p, axis=ax) / L.spacing[c]
        pad = [(0, 0)] * p.ndim
        pad[ax] = (1, 1)
        out.append(np.pad(d, pad))
    return tuple(out)


# ---------------------------------------------------------------------------
# vector Laplacian and its Dirichlet form


def _ghost_pad(x: np.ndarray, ax: int, odd: bool) -> np.ndarray:
    lo = _take(x, ax, slice(0, 1))
    hi = _take(x, ax, slice(-1, None))
    if odd:
        lo, hi = -lo, -hi
    return np.concatenate([lo, x, hi], axis=ax)


def laplacian_comp(L: Layout, x: np.ndarray, c: int) -> np.ndarray:
    """Discrete Laplacian of component ``c`` with the ghost conventions.

    Output on the constrained boundary faces of the component is zero.
    """
    out = np.zeros_like(x)
    inner_sl = _sl(x.ndim, L.ax(c), slice(1, -1))
    for a in range(L.ndim):
        ax, h2 = L.ax(a), L.spacing[a] ** 2
        if a == c:
            d2 = (_take(x, ax, slice(2, None)) - 2.0 * _take(x, ax, slice(1, -1))
                  + _take(x, ax, slice(0, -2))) / h2
            out[inner_sl] += d2
        else:
            xp = _ghost_pad(x, ax, odd=not L.slip[a])
            d2 = (_take(xp, ax, slice(2, None)) - 2.0 * x + _take(xp, ax, slice(0, -2))) / h2
            out[inner_sl] += d2[inner_sl]
    return out


def laplacian(L: Layout, u: Field) -> Field:
    return tuple(laplacian_comp(L, uc, c) for c, uc in enumerate(u))


def _grad_weight(L: Layout, c: int, a: int) -> np.ndarray:
    key = ("gw", c, a)
    cache = L._eig_cache
    if key not in cache:
        shape = list(L.comp_shape(c))
        if a != c:
            shape[a] += 1
        w = np.full(shape, L.cell_volume)
        if a != c:
            idx0 = [slice(None)] * L.ndim
            idx0[a] = 0
            w[tuple(idx0)] *= 0.5
            idx0[a] = -1
            w[tuple(idx0)] *= 0.5
            # boundary faces of the component are constrained, not unknowns
            mask = np.zeros_like(w)
            w_sl = [slice(None)] * L.ndim
            w_sl[c] = slice(1, -1)
            mask[tuple(w_sl)] = 1.0
            w = w * mask
        else:
            shape[a] -= 1
            w = np.full(shape, L.cell_volume)
        w.flags.writeable = False
        cache[key] = w
    return cache[key]


def grad_tensor(L: Layout, u: Field) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
    """Edge differences d_a u_c with their quadrature weights.

    Returns ``{(c, a): (diff, weight)}``; sum(weight * diff**2) over all keys is
    the discrete Dirichlet energy, equal to ``-<laplacian(u), u>`` for fields
    whose normal boundary faces vanish. Cross-wall edges carry half weight;
    edges touching a constrained boundary face carry none.
    """
    out = {}
    for c, uc in enumerate(u):
        for a in range(L.ndim):
            ax, h = L.ax(a), L.spacing[a]
            if a == c:
                d = np.diff(uc, axis=ax) / h
            else:
                d = np.diff(_ghost_pad(uc, ax, odd=not L.slip[a]), axis=ax) / h
            out[(c, a)] = (d, _grad_weight(L, c, a))
    return out


def dirichlet_form(L: Layout, u: Field, v: Field | None = None) -> np.ndarray:
    """Discrete (grad u, grad v); ``v=None`` gives the squared gradient norm."""
    gu = grad_tensor(L, u)
    gv = gu if v is None else grad_tensor(L, v)
    axes = L.spatial_axes()
    return sum(np.sum(gu[k][1] * gu[k][0] * gv[k][0], axis=axes) for k in gu)


def partial_norm2(L: Layout, u: Field, a: int) -> np.ndarray:
    """||d_a u||^2 summed over components (the axis-``a`` part of the Dirichlet energy)."""
    g = grad_tensor(L, u)
    axes = L.spatial_axes()
    return sum(np.sum(g[(c, a)][1] * g[(c, a)][0] ** 2, axis=axes) for c in range(L.ndim))


# ---------------------------------------------------------------------------
# spectral solvers


def _axis_kind(L: Layout, c: int | None, a: int) -> str:
    if c is None:
        return "dct2"
    if a == c:
        return "dst1"
    return "dct2" if L.slip[a] else "dst2"


def _eigs_1d(kind: str, n: int, h: float) -> np.ndarray:
    if kind == "dst1":
        k = np.arange(1, n)
    elif kind == "dst2":
        k = np.arange(1, n + 1)
    else:
        k = np.arange(0, n)
    return (2.0 - 2.0 * np.cos(np.pi * k / n)) / h**2


@lru_cache(maxsize=None)
def _transform_matrix(kind: str, n: int, inverse: bool) -> np.ndarray:
    """Dense orthonormal transform for an axis of ``n`` cells.

    At the short axis lengths used here a BLAS matmul is several times faster
    than a pocketfft call. The DST-I variant maps the ``n + 1`` face values to
    the ``n - 1`` interior modes (boundary faces are dropped / zero-filled).
    """
    if kind == "dst1":
        core = sfft.dst(np.eye(n - 1), type=1, axis=0, norm="ortho")
        m = np.zeros((n - 1, n + 1))
        m[:, 1:-1] = core
    elif kind == "dst2":
        m = sfft.dst(np.eye(n), type=2, axis=0, norm="ortho")
    else:
        m = sfft.dct(np.eye(n), type=2, axis=0, norm="ortho")
    m = np.ascontiguousarray(m.T if inverse else m)
    m.flags.writeable = False
    return m


def _apply_axis(m: np.ndarray, x: np.ndarray, ax: int) -> np.ndarray:
    if ax == -1:
        return x @ m.T
    shape = x.shape
    k = x.ndim + ax
    pre = int(np.prod(shape[:k], dtype=int))
    post = int(np.prod(shape[k + 1:], dtype=int))
    y = np.matmul(m, np.reshape(x, (pre, shape[k], post)))
    return y.reshape(shape[:k] + (m.shape[0],) + shape[k + 1:])


def _forward(x: np.ndarray, ax: int, kind: str, n: int) -> np.ndarray:
    return _apply_axis(_transform_matrix(kind, n, False), x, ax)


def _inverse(x: np.ndarray, ax: int, kind: str, n: int) -> np.ndarray:
    return _apply_axis(_transform_matrix(kind, n, True), x, ax)


def eigenvalues(L: Layout, c: int | None) -> np.ndarray:
    """Eigenvalues of ``-laplacian`` for component ``c`` (``None``: Neumann scalar)."""
    key = ("eig", c)
    cache = L._eig_cache
    if key not in cache:
        lam = 0.0
        for a in range(L.ndim):
            e = _eigs_1d(_axis_kind(L, c, a), L.cells[a], L.spacing[a])
            shape = [1] * L.ndim
            shape[a] = e.size
            lam = lam + e.reshape(shape)
        cache[key] = np.asarray(lam)
    return cache[key]


def _spectral_apply(L: Layout, x: np.ndarray, c: int | None, mult: np.ndarray) -> np.ndarray:
    kinds = [_axis_kind(L, c, a) for a in range(L.ndim)]
    y = x
    for a, k in enumerate(kinds):
        y = _forward(y, L.ax(a), k, L.cells[a])
    y = y * mult
    for a, k in reversed(list(enumerate(kinds))):
        y = _inverse(y, L.ax(a), k, L.cells[a])
    return y


def helmholtz_solve(L: Layout, r: Field, coef: float, shift: float = 1.0) -> Field:
    """Solve ``(shift - coef * laplacian) x = r`` componentwise (exact, spectral)."""
    out = []
    for c, rc in enumerate(r):
        den = shift + coef * eigenvalues(L, c)
        if np.any(den == 0.0):
            raise ZeroDivisionError("singular Helmholtz operator")
        out.append(_spectral_apply(L, rc, c, 1.0 / den))
    return tuple(out)


def poisson_neumann(L: Layout, b: np.ndarray) -> np.ndarray:
    """Mean-zero solution of ``div grad phi = b`` (``b`` is projected to mean zero)."""
    lam = eigenvalues(L, None)
    inv = np.zeros_like(lam)
    nz = lam > 0
    inv[nz] = -1.0 / lam[nz]
    return _spectral_apply(L, b, None, inv)


def project(L: Layout, u: Field) -> tuple[Field, np.ndarray]:
    """Discrete Leray projection: returns ``(u - grad phi, phi)``."""
    phi = poisson_neumann(L, divergence(L, u))
    g = gradient(L, phi)
    return tuple(a - b for a, b in zip(u, g)), phi


# ---------------------------------------------------------------------------
# coupled implicit Stokes step


class StokesSolveError(RuntimeError):
    pass


def _bdot(L: Layout, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=L.spatial_axes())


def _bexpand(L: Layout, s: np.ndarray) -> np.ndarray:
    return np.reshape(s, np.shape(s) + (1,) * L.ndim)


def stokes_solve(L: Layout, r: Field, coef: float, shift: float = 1.0, *,
                 tol: float = 1e-10, max_iter: int = 200,
                 q0: np.ndarray | None = None) -> tuple[Field, np.ndarray, int]:
    """Solve ``(shift - coef lap) u + grad q = r``, ``div u = 0``.

    Pressure Schur complement ``S = -div H^-1 grad`` solved by conjugate
    gradients with the Cahouet-Chabard preconditioner
    ``shift * (-L_N)^-1 + coef * I``. Batched: each batch member iterates
    until its own relative residual drops below ``tol``.

    ``q0`` is an optional initial pressure guess (e.g. the previous step's).
    Returns ``(u, q, iterations)``.
    """
    H_inv = lambda v: helmholtz_solve(L, v, coef, shift)  # noqa: E731

    def S(q):
        return -divergence(L, H_inv(gradient(L, q)))

    def M(z):
        out = coef * z
        if shift != 0.0:
            out = out - shift * poisson_neumann(L, z)
        return out - _bexpand(L, np.mean(out, axis=L.spatial_axes()))

    w = H_inv(r)
    b = -divergence(L, w)
    b = b - _bexpand(L, np.mean(b, axis=L.spatial_axes()))
    bnorm = np.sqrt(_bdot(L, b, b))
    if q0 is None:
        q = np.zeros_like(b)
        res = b.copy()
    else:
        q = np.broadcast_to(q0, b.shape).copy()
        res = b - S(q)
    z = M(res)
    d = z.copy()
    rz = _bdot(L, res, z)
    active = bnorm > 0
    it = 0
    while np.any(active):
        if it >= max_iter:
            worst = float(np.max(np.sqrt(_bdot(L, res, res)) / np.where(bnorm > 0, bnorm, 1)))
            raise StokesSolveError(
                f"pressure CG did not converge in {max_iter} iterations "
                f"(relative residual {worst:.3e})")
        Sd = S(d)
        dSd = _bdot(L, d, Sd)
        alpha = np.where(active, rz / np.where(dSd != 0, dSd, 1.0), 0.0)
        q = q + _bexpand(L, alpha) * d
        res = res - _bexpand(L, alpha) * Sd
        it += 1
        rnorm = np.sqrt(_bdot(L, res, res))
        active = active & (rnorm > tol * bnorm)
        z = M(res)
        rz_new = _bdot(L, res, z)
        beta = np.where(active, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        d = np.where(_bexpand(L, active), z + _bexpand(L, beta) * d, d)
        rz = rz_new
    corr = H_inv(gradient(L, q))
    u = tuple(a - b for a, b in zip(w, corr))
    return u, q, it


# ---------------------------------------------------------------------------
# skew-symmetric convection
#
# A(u) v, component c, axis a:  Avg_ca( U_ca * Diff_ca(v_c) )   (advective form)
# B(u, v) = (A(u) - A(u)^T) v / 2, with the transposes written out explicitly,
# so <B(u, v), w> = -<B(u, w), v> holds for every u.


def _diff_along(x, ax, h):
    return np.diff(x, axis=ax) / h


def _diff_along_T(y, ax, h):
    # transpose of the node->cell difference restricted to interior nodes
    t = (_take(y, ax, slice(0, -1)) - _take(y, ax, slice(1, None))) / h
    pad = [(0, 0)] * y.ndim
    pad[ax] = (1, 1)
    return np.pad(t, pad)


def _avg_to_nodes(y, ax):
    z = 0.5 * (_take(y, ax, slice(0, -1)) + _take(y, ax, slice(1, None)))
    pad = [(0, 0)] * y.ndim
    pad[ax] = (1, 1)
    return np.pad(z, pad)


def _avg_to_nodes_T(z, ax):
    zi = z.copy()
    zi[_sl(z.ndim, ax, slice(0, 1))] = 0.0
    zi[_sl(z.ndim, ax, slice(-1, None))] = 0.0
    return 0.5 * (_take(zi, ax, slice(0, -1)) + _take(zi, ax, slice(1, None)))


def _diff_cross(x, ax, h, s):
    inner_d = np.diff(x, axis=ax) / h
    lo = 2.0 * s * _take(x, ax, slice(0, 1)) / h
    hi = -2.0 * s * _take(x, ax, slice(-1, None)) / h
    return np.concatenate([lo, inner_d, hi], axis=ax)


def _diff_cross_T(y, ax, h, s):
    t = (_take(y, ax, slice(0, -1)) - _take(y, ax, slice(1, None))) / h
    t[_sl(t.ndim, ax, slice(0, 1))] += (2.0 * s - 1.0) * _take(y, ax, slice(0, 1)) / h
    t[_sl(t.ndim, ax, slice(-1, None))] += (1.0 - 2.0 * s) * _take(y, ax, slice(-1, None)) / h
    return t


def _avg_faces_to_cells(y, ax):
    return 0.5 * (_take(y, ax, slice(0, -1)) + _take(y, ax, slice(1, None)))


def _avg_faces_to_cells_T(z, ax):
    pad = [(0, 0)] * z.ndim
    pad[ax] = (1, 1)
    zp = np.pad(z, pad)
    return 0.5 * (_take(zp, ax, slice(0, -1)) + _take(zp, ax, slice(1, None)))


def _edge_velocity(L: Layout, u: Field, c: int, a: int) -> np.ndarray:
    if a == c:
        return _avg_faces_to_cells(u[c], L.ax(c))
    # u_a is cell-centred along c; interpolate to the c-faces (boundary faces unused)
    return _avg_to_nodes(u[a], L.ax(c))


def convect(L: Layout, u: Field, v: Field) -> Field:
    """Skew-symmetrised discrete ``(u . grad) v``."""
    out = []
    for c in range(L.ndim):
        vc = v[c]
        acc = np.zeros(np.broadcast_shapes(vc.shape, u[c].shape))
        for a in range(L.ndim):
            ax, h = L.ax(a), L.spacing[a]
            U = _edge_velocity(L, u, c, a)
            if a == c:
                fwd = _avg_to_nodes(U * _diff_along(vc, ax, h), ax)
                adj = _diff_along_T(U * _avg_to_nodes_T(vc, ax), ax, h)
            else:
                s = 0.0 if L.slip[a] else 1.0
                fwd = _avg_faces_to_cells(U * _diff_cross(vc, ax, h, s), ax)
                adj = _diff_cross_T(U * _avg_faces_to_cells_T(vc, ax), ax, h, s)
            acc = acc + 0.5 * (fwd - adj)
        cax = L.ax(c)
        acc[_sl(acc.ndim, cax, slice(0, 1))] = 0.0
        acc[_sl(acc.ndim, cax, slice(-1, None))] = 0.0
        out.append(acc)
    return tuple(out)


def trilinear(L: Layout, u: Field, v: Field, w: Field) -> np.ndarray:
    return inner(L, convect(L, u, v), w)


# ---------------------------------------------------------------------------
# discrete curl (exactly divergence-free fields)


def curl_2d(L: Layout, psi: np.ndarray) -> Field:
    """Velocity from a node-based stream function ``psi`` (shape cells+1).

    Boundary nodes of ``psi`` are forced to zero so the normal component vanishes.
    """
    assert L.ndim == 2
    psi = np.array(psi, dtype=float, copy=True)
    for a in range(2):
        psi[_sl(psi.ndim, L.ax(a), slice(0, 1))] = 0.0
        psi[_sl(psi.ndim, L.ax(a), slice(-1, None))] = 0.0
    u1 = np.diff(psi, axis=L.ax(1)) / L.spacing[1]
    u2 = -np.diff(psi, axis=L.ax(0)) / L.spacing[0]
    return u1, u2


def potential_shapes(L: Layout) -> tuple[tuple[int, ...], ...]:
    """Shapes of the edge-based vector potential components in 3D."""
    n = L.cells
    return tuple(tuple(n[b] if b == a else n[b] + 1 for b in range(3)) for a in range(3))


def curl_3d(L: Layout, A: Field) -> Field:
    """Velocity from an edge-based vector potential; exactly divergence-free.

    Tangential potential components are zeroed on each boundary so the normal
    velocity vanishes on every boundary face.
    """
    assert L.ndim == 3
    A = [np.array(x, dtype=float, copy=True) for x in A]
    for a in range(3):
        for b in range(3):
            if b == a:
                continue
            ax = L.ax(b)
            A[a][_sl(A[a].ndim, ax, slice(0, 1))] = 0.0
            A[a][_sl(A[a].ndim, ax, slice(-1, None))] = 0.0
    h = L.spacing
    d = lambda x, b: np.diff(x, axis=L.ax(b)) / h[b]  # noqa: E731
    u1 = d(A[2], 1) - d(A[1], 2)
    u2 = d(A[0], 2) - d(A[2], 0)
    u3 = d(A[1], 0) - d(A[0], 1)
    return u1, u2, u3
