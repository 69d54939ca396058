"""Short-run Langevin dynamics over a differentiable potential.

Each update is z <- z - delta * grad U(z) + sqrt(2 delta) * e with fresh
standard-normal noise e. Chains start from N(0, I) unless an explicit
initialization is given, run a fixed small number of steps, and the result
is treated as a constant downstream (no gradient flows through the chain).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite values encountered during sampling or training."""


@dataclass
class LangevinSpec:
    steps: int = 20
    step_size: float = 0.01
    init: str = "normal"        # normal | provided
    noise: bool = True          # off -> plain gradient descent (tests)
    grad_clip: float = 1e4      # per-coordinate, guards early-training cliffs

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.init not in ("normal", "provided"):
            raise ValueError(f"unknown init mode {self.init!r}")


def langevin_sample(potential, spec: LangevinSpec, batch: int, dim: int, rng,
                    z_init=None) -> np.ndarray:
    """Run `batch` independent chains of `spec.steps` updates; returns [batch, dim].

    `potential` maps a [batch, dim] Tensor to per-chain values; its sum is
    differentiated to get the drift. Chains are vectorized: one rng draws the
    whole noise block each step, which keeps runs reproducible per seed.
    """
    if spec.init == "provided":
        if z_init is None:
            raise ValueError("init mode 'provided' requires z_init")
        z = np.array(z_init, dtype=np.float64)
    else:
        z = rng.standard_normal((batch, dim))
    if z.shape != (batch, dim):
        raise ValueError(f"chain state shape {z.shape} != ({batch}, {dim})")

    delta = spec.step_size
    noise_scale = math.sqrt(2.0 * delta)
    clipped = 0
    for tau in range(spec.steps):
        g = grad_potential(potential, z)
        if not np.all(np.isfinite(g)):
            raise NumericalError(
                f"non-finite potential gradient at Langevin step {tau + 1}"
            )
        hi = np.abs(g) > spec.grad_clip
        if hi.any():
            clipped += int(hi.sum())
            g = np.clip(g, -spec.grad_clip, spec.grad_clip)
        z = z - delta * g
        if spec.noise:
            z += noise_scale * rng.standard_normal(z.shape)
    if clipped:
        log.warning("langevin clipped %d gradient coordinates", clipped)
    return z


def grad_potential(potential, z_data) -> np.ndarray:
    """d(sum of potential)/dz at z_data; chains are independent so the batch
    sum gives each row its own gradient."""
    z = Tensor(z_data, requires_grad=True)
    with Tape() as tp:
        u = potential(z)
        total = u.sum()
    tp.backward(total)
    return z.grad


def potential_values(potential, z_data) -> np.ndarray:
    """Potential per chain without recording gradients."""
    u = potential(Tensor(z_data))
    return np.atleast_1d(u.data).copy()


def posterior_potential(model, prior, cond_times, cond_values, z: Tensor) -> Tensor:
    """Unnormalized negative log posterior of the latent given observations.

    U(z) = ||x - F(z)||^2 / (2 sigma_eps^2) + U_prior(z), with the residual
    summed over the conditioning points only (cond_times/cond_values already
    hold just the observed entries, [B,K] and [B,K,D]).
    """
    from .prior import neg_log_prior_potential
    from .tensor import square, sum_

    cond_times = np.asarray(cond_times, dtype=np.float64)
    cond_values = np.asarray(cond_values, dtype=np.float64)
    if cond_times.size == 0:
        raise ValueError("posterior potential needs a nonempty conditioning set")
    pred = model.decode(z, cond_times)
    r = pred - cond_values
    recon = sum_(square(r), axis=(1, 2)) * (0.5 / model.sigma_eps ** 2)
    return recon + neg_log_prior_potential(prior, z)


def posterior_potential_masked(model, prior, series, cond_mask, z: Tensor) -> Tensor:
    """Single-series convenience wrapper: selects the masked-in points."""
    mask = np.asarray(cond_mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty conditioning mask")
    times = series.times[mask][None, :]
    values = series.values[mask][None, :, :]
    return posterior_potential(model, prior, times, values, z)
