"""Differentiable ODE integration.

Two entry points:

* ``ode_solve`` steps exactly through a shared list of requested times
  (fixed-step Euler/RK4 with substeps no larger than h, or adaptive
  Dormand-Prince). Gradients flow through every solver step.
* ``ode_solve_dense`` integrates RK4 on a uniform per-element grid and
  returns a dense solution queryable at arbitrary per-element times via
  cubic Hermite interpolation. This is the batched fast path used by the
  generator when every sequence carries its own irregular time grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _acc,
    _record,
    _tracking,
    append_cols,
    axpy,
    gather_steps,
    moveaxis01,
    no_grad,
    stack0,
)


class SolverError(RuntimeError):
    """Bad time grid or adaptive step budget exhausted."""


@dataclass
class SolverSpec:
    method: str = "rk4"          # euler | rk4 | dopri5
    h: float = 0.05              # max step (fixed) / initial step (adaptive)
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 100_000

    def __post_init__(self):
        if self.method not in ("euler", "rk4", "dopri5"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.h <= 0 or self.rtol <= 0 or self.atol <= 0 or self.max_steps <= 0:
            raise ValueError("solver parameters must be positive")


@dataclass
class OdeFunc:
    """Dynamics net with fixed input layout [state | z_d | t]."""

    net: object
    state_dim: int
    zd: Tensor | None = None
    with_time: bool = True

    def __post_init__(self):
        zd_dim = 0 if self.zd is None else self.zd.data.shape[-1]
        expect = self.state_dim + zd_dim + (1 if self.with_time else 0)
        if self.net.in_dim != expect:
            raise ShapeError(
                f"dynamics net input width {self.net.in_dim} != state {self.state_dim} "
                f"+ z_d {zd_dim} + time {int(self.with_time)}"
            )
        if self.net.out_dim != self.state_dim:
            raise ShapeError(
                f"dynamics net output width {self.net.out_dim} != state dim {self.state_dim}"
            )

    def __call__(self, t, z):
        if self.zd is None and not self.with_time:
            return self.net(z)
        tcol = None
        if self.with_time:
            tcol = np.broadcast_to(
                np.asarray(t, dtype=np.float64).reshape(-1, 1), (z.shape[0], 1)
            )
        return self.net(append_cols(z, self.zd, tcol))


def _rk4_combine(z, k1, k2, k3, k4, h):
    """z + (h/6)(k1 + 2 k2 + 2 k3 + k4) as a single tape node."""
    w = h / 6.0
    out = Tensor(z.data + w * (k1.data + 2.0 * (k2.data + k3.data) + k4.data))
    if _tracking(z, k1, k2, k3, k4):
        def bwd(g):
            if z.requires_grad:
                _acc(z, g, own=False)
            gw = g * w
            if k1.requires_grad:
                _acc(k1, gw, own=False)
            if k2.requires_grad:
                _acc(k2, 2.0 * gw, own=True)
            if k3.requires_grad:
                _acc(k3, 2.0 * gw, own=True)
            if k4.requires_grad:
                _acc(k4, gw, own=False)
        _record(out, bwd)
    return out


def _rk4_step(func, t, z, h):
    k1 = func(t, z)
    k2 = func(t + 0.5 * h, axpy(z, k1, 0.5 * h))
    k3 = func(t + 0.5 * h, axpy(z, k2, 0.5 * h))
    k4 = func(t + h, axpy(z, k3, h))
    return _rk4_combine(z, k1, k2, k3, k4, h), k1


def _euler_step(func, t, z, h):
    k1 = func(t, z)
    return axpy(z, k1, h), k1


def ode_solve(func, z0: Tensor, times, spec: SolverSpec) -> Tensor:
    """Integrate from times[0] through each requested time.

    z0 is [B, d] at t = times[0]; the result is [B, T, d] with the initial
    state in slot 0. Fixed-step methods subdivide each interval into equal
    steps no larger than spec.h, so aligned grids reproduce bit-identical
    states.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size < 1:
        raise SolverError("times must be a non-empty 1-d array")
    if np.any(np.diff(times) <= 0):
        raise SolverError("times must be strictly increasing")
    if z0.data.ndim != 2:
        raise ShapeError(f"z0 must be [batch, state], got {z0.shape}")

    if spec.method == "dopri5":
        states = _solve_adaptive(func, z0, times, spec)
    else:
        step = _rk4_step if spec.method == "rk4" else _euler_step
        states = [z0]
        z = z0
        for i in range(times.size - 1):
            t, gap = times[i], times[i + 1] - times[i]
            n = max(1, int(math.ceil(gap / spec.h - 1e-12)))
            hs = gap / n
            for k in range(n):
                z, _ = step(func, t + k * hs, z, hs)
            states.append(z)
    return moveaxis01(stack0(states))


# Dormand-Prince 5(4) tableau
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)


def _solve_adaptive(func, z0, times, spec):
    states = [z0]
    z = z0
    t = times[0]
    h = min(spec.h, (times[-1] - times[0]) / 10.0)
    budget = spec.max_steps
    for target in times[1:]:
        while t < target - 1e-12:
            if budget <= 0:
                raise SolverError(
                    f"dopri5 exceeded max_steps={spec.max_steps}; dynamics may be stiff"
                )
            budget -= 1
            hs = min(h, target - t)
            ks = [func(t, z)]
            for i in range(1, 6):
                acc = ks[0] * (_DP_A[i][0] * hs)
                for j in range(1, i):
                    acc = acc + ks[j] * (_DP_A[i][j] * hs)
                ks.append(func(t + _DP_C[i] * hs, z + acc))
            z5 = z
            for i in range(6):
                if _DP_B5[i] != 0.0:
                    z5 = z5 + ks[i] * (_DP_B5[i] * hs)
            k7 = func(t + hs, z5)
            ks.append(k7)
            # error estimate and step control stay off the tape
            with no_grad():
                err = np.zeros_like(z.data)
                for i in range(7):
                    db = (_DP_B5[i] if i < 6 else 0.0) - _DP_B4[i]
                    if db != 0.0:
                        err = err + ks[i].data * (db * hs)
                scale = spec.atol + spec.rtol * np.maximum(np.abs(z.data), np.abs(z5.data))
                enorm = float(np.sqrt(np.mean((err / scale) ** 2)))
            if enorm <= 1.0:
                t = t + hs
                z = z5
                grow = 0.9 * (enorm + 1e-16) ** -0.2
                h = hs * min(5.0, max(0.2, grow))
            else:
                h = hs * max(0.2, 0.9 * enorm ** -0.2)
        states.append(z)
    return states


@dataclass
class DenseSolution:
    """RK4 trajectory on a uniform per-element grid with Hermite dense output."""

    t0: float
    h: np.ndarray        # [B, 1] per-element step size
    n_steps: int
    states: Tensor       # [n+1, B, d]
    derivs: Tensor       # [n+1, B, d] = f at each grid node

    def at(self, times) -> Tensor:
        """Evaluate at times [B, T] (each within the element's grid span)."""
        times = np.asarray(times, dtype=np.float64)
        safe_h = np.where(self.h > 0, self.h, 1.0)
        u = (times - self.t0) / safe_h
        k = np.clip(np.floor(u).astype(np.int64), 0, self.n_steps - 1)
        s = (u - k)[:, :, None]
        z0 = gather_steps(self.states, k)
        z1 = gather_steps(self.states, k + 1)
        f0 = gather_steps(self.derivs, k)
        f1 = gather_steps(self.derivs, k + 1)
        s2 = s * s
        s3 = s2 * s
        hcol = self.h[:, :, None]
        out = z0 * (2 * s3 - 3 * s2 + 1) + z1 * (3 * s2 - 2 * s3)
        out = out + f0 * ((s3 - 2 * s2 + s) * hcol) + f1 * ((s3 - s2) * hcol)
        return out


def ode_solve_dense(func, z0: Tensor, t0: float, t_end, n_steps: int) -> DenseSolution:
    """RK4 over n_steps equal steps from t0 to per-element t_end ([B] or scalar)."""
    if z0.data.ndim != 2:
        raise ShapeError(f"z0 must be [batch, state], got {z0.shape}")
    b = z0.shape[0]
    t_end = np.broadcast_to(np.asarray(t_end, dtype=np.float64).reshape(-1), (b,))
    if np.any(t_end < t0):
        raise SolverError("t_end earlier than t0")
    h = ((t_end - t0) / n_steps)[:, None]
    states = [z0]
    derivs = []
    z = z0
    for k in range(n_steps):
        t = t0 + k * h
        z, k1 = _rk4_step(func, t, z, h)
        derivs.append(k1)
        states.append(z)
    derivs.append(func(t0 + n_steps * h, z))
    return DenseSolution(t0, h, n_steps, stack0(states), stack0(derivs))


def convergence_order(func, z0, t0, t_end, method, exact, h0=0.2, levels=4):
    """Richardson estimate of the method's order against an exact endpoint.

    Returns the mean of log2(err(h)/err(h/2)) over the step ladder, or inf
    when the error is at the floor at every level (exact integration).
    """
    errs = []
    for k in range(levels + 1):
        spec = SolverSpec(method=method, h=h0 / 2 ** k)
        traj = ode_solve(func, z0, [t0, t_end], spec)
        errs.append(float(np.max(np.abs(traj.data[:, -1, :] - exact))))
    if max(errs) < 1e-14:
        return float("inf")
    ps = []
    for a, b in zip(errs, errs[1:]):
        if a > 1e-13 and b > 1e-13:
            ps.append(math.log2(a / b))
    if not ps:
        return float("inf")
    return float(np.mean(ps))
