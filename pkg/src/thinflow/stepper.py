"""Dimension-generic Euler-Maruyama step shared by the 2D and 3D solvers.

One step solves the coupled implicit Stokes problem

    (I - nu dt lap) u' + grad q = u + dt (f - B(u, u)) + xi,   div u' = 0,

with skew-symmetric explicit advection ``B`` and additive noise increment
``xi``. Taking the inner product with ``u'`` gives the exact per-step balance

    |u'|^2 + 2 nu dt |grad u'|^2 = |u|^2 + 2 dt <f, u> + 2 <xi, u> + |dt F + xi|^2 - |u' - r|^2,

where ``F = f - B(u, u)`` and ``r`` is the right-hand side, so the computed
``lhs <= rhs`` up to linear-solver error. Every quantity is batched over
leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import staggered as stg


class SolverError(RuntimeError):
    """Raised on linear-solve failure or non-finite state, with the step index."""

    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg if step is None else f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class SolverParams:
    nu: float
    dt: float
    T: float
    poisson_tol: float = 1e-10
    poisson_max_iter: int = 200
    advection_scheme: str = "skew"  # "skew" or "none" (Stokes only)

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.dt > 0 or not self.T > 0:
            raise ValueError("dt and T must be positive")
        if not self.poisson_tol > 0 or self.poisson_max_iter < 1:
            raise ValueError("solver tolerances must be positive")
        if self.advection_scheme not in ("skew", "none"):
            raise ValueError(f"unknown advection scheme {self.advection_scheme!r}")

    @property
    def n_steps(self) -> int:
        n = int(round(self.T / self.dt))
        if n < 1 or abs(n * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"dt={self.dt} does not divide T={self.T}")
        return n


@dataclass
class StepInfo:
    """Per-step balance terms (arrays over the batch)."""

    energy_old: np.ndarray
    energy_new: np.ndarray
    grad_new: np.ndarray
    forcing_work: np.ndarray  # dt <f, u^n>
    noise_work: np.ndarray  # <xi, u^n>
    increment_sq: np.ndarray  # |dt F + xi|^2
    iterations: int

    def balance(self, nu: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
        lhs = self.energy_new + 2.0 * nu * dt * self.grad_new
        rhs = self.energy_old + 2.0 * self.forcing_work + 2.0 * self.noise_work + self.increment_sq
        return lhs, rhs


def _add(a, b):
    return tuple(x + y for x, y in zip(a, b))


def _scale(a, s):
    return tuple(x * s for x in a)


def step(L: stg.Layout, u, params: SolverParams, f=None, xi=None, *, q0=None,
         step_index: int | None = None):
    """Advance the batched state ``u`` by one step; returns ``(u_new, q, info)``."""
    dt, nu = params.dt, params.nu
    if not all(np.all(np.isfinite(c)) for c in u):
        raise SolverError("non-finite state", step_index)
    F = stg.zeros(L) if f is None else f
    if params.advection_scheme == "skew":
        adv = stg.convect(L, u, u)
        F = tuple(a - b for a, b in zip(F, adv))
    inc = _scale(F, dt)
    if xi is not None:
        inc = _add(inc, xi)
    rhs = _add(u, inc)
    try:
        u_new, q, it = stg.stokes_solve(L, rhs, nu * dt, 1.0, tol=params.poisson_tol,
                                        max_iter=params.poisson_max_iter, q0=q0)
    except stg.StokesSolveError as e:
        raise SolverError(str(e), step_index) from e
    # remove the O(tol) divergence left by the iterative pressure solve
    u_new, _ = stg.project(L, u_new)
    if not all(np.all(np.isfinite(c)) for c in u_new):
        raise SolverError("non-finite state", step_index)
    info = StepInfo(
        energy_old=stg.norm2(L, u),
        energy_new=stg.norm2(L, u_new),
        grad_new=stg.dirichlet_form(L, u_new),
        forcing_work=dt * (stg.inner(L, f, u) if f is not None else np.zeros(np.shape(stg.norm2(L, u)))),
        noise_work=stg.inner(L, xi, u) if xi is not None else np.zeros(np.shape(stg.norm2(L, u))),
        increment_sq=stg.norm2(L, inc),
        iterations=it,
    )
    return u_new, q, info


@dataclass
class Series:
    """Per-step diagnostics of a (batched) run; arrays are ``(n_steps + 1, *batch)``."""

    times: np.ndarray
    energy: np.ndarray
    enstrophy: np.ndarray
    noise_work: np.ndarray  # running sum of <xi, u^n>
    forcing_work: np.ndarray  # running sum of dt <f, u^n>
    increment_sq: np.ndarray  # running sum of |dt F + xi|^2
    hs_budget: np.ndarray  # running sum of |G|_HS^2 dt
    balance_lhs: np.ndarray  # per step (row 0 unused)
    balance_rhs: np.ndarray
    iterations: np.ndarray


class Integrator:
    """Fixed layout, parameters, forcing and noise coefficients; advances batched states."""

    def __init__(self, L: stg.Layout, params: SolverParams, f=None, g_stack=None):
        self.L = L
        self.params = params
        self.f = f
        self.g_stack = g_stack
        self.hs2 = 0.0
        if g_stack is not None and g_stack[0].shape[0] > 0:
            w = L.face_weights
            self.hs2 = float(sum(np.sum(wc * s**2) for wc, s in zip(w, g_stack)))
        else:
            self.g_stack = None

    def noise(self, dW):
        if self.g_stack is None or dW is None:
            return None
        return tuple(np.tensordot(dW, s, axes=([-1], [0])) for s in self.g_stack)

    def advance(self, u, dW=None, q0=None, step_index=None):
        return step(self.L, u, self.params, self.f, self.noise(dW), q0=q0, step_index=step_index)

    def run(self, u0, dW=None, *, snapshot_every: int = 0, callback=None):
        """Integrate to ``T``; ``dW`` is ``(*batch, n_steps, n_modes)`` or None.

        ``callback(n, u)`` is called after every step with the new state.
        Returns ``(u_final, series, snapshots)``.
        """
        p = self.params
        n = p.n_steps
        u = tuple(np.asarray(c, dtype=float) for c in u0)
        batch = np.shape(stg.norm2(self.L, u))
        if dW is not None and dW.shape[-2] != n:
            raise ValueError(f"noise has {dW.shape[-2]} steps, run needs {n}")
        shp = (n + 1,) + batch
        s = Series(times=np.arange(n + 1) * p.dt, energy=np.zeros(shp), enstrophy=np.zeros(shp),
                   noise_work=np.zeros(shp), forcing_work=np.zeros(shp), increment_sq=np.zeros(shp),
                   hs_budget=np.arange(n + 1) * p.dt * self.hs2, balance_lhs=np.zeros(shp),
                   balance_rhs=np.zeros(shp), iterations=np.zeros(n + 1, dtype=int))
        s.energy[0] = stg.norm2(self.L, u)
        s.enstrophy[0] = stg.dirichlet_form(self.L, u)
        snaps = [(0, u)] if snapshot_every else []
        q = None
        for k in range(n):
            dWk = None if dW is None else dW[..., k, :]
            u, q, info = self.advance(u, dWk, q0=q, step_index=k)
            lhs, rhs = info.balance(p.nu, p.dt)
            s.energy[k + 1] = info.energy_new
            s.enstrophy[k + 1] = info.grad_new
            s.noise_work[k + 1] = s.noise_work[k] + info.noise_work
            s.forcing_work[k + 1] = s.forcing_work[k] + info.forcing_work
            s.increment_sq[k + 1] = s.increment_sq[k] + info.increment_sq
            s.balance_lhs[k + 1] = lhs
            s.balance_rhs[k + 1] = rhs
            s.iterations[k + 1] = info.iterations
            if snapshot_every and ((k + 1) % snapshot_every == 0 or k + 1 == n):
                snaps.append((k + 1, u))
            if callback is not None:
                callback(k + 1, u)
        return u, s, snaps


def energy_residuals(s: Series, rel_tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Per-step residual ``max(0, lhs - rhs)`` and its tolerance ``rel_tol * |u^n|^2``."""
    res = np.maximum(0.0, s.balance_lhs[1:] - s.balance_rhs[1:])
    tol = rel_tol * s.energy[:-1]
    return res, tol
