"""ODE-based generation model: latent layout, neural-ODE trajectory, emission.

The latent vector is the fixed-order concatenation [z0 | z_s | z_d]. Only the
z0 segment evolves through the ODE; z_d rides along as an extra input to the
dynamics net at every evaluation, and z_s joins each latent state at emission
time. Decoding integrates once on a per-element uniform grid and reads the
requested times off the dense solution, so a whole batch with irregular
per-sequence time grids costs one solver pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, concat, repeat_mid, reshape, square, sum_
from .nn import MLP
from .odeint import OdeFunc, ode_solve_dense
from .langevin import LangevinSpec, langevin_sample
from .prior import EbmPrior, neg_log_prior_potential


@dataclass
class LatentLayout:
    z0_dim: int
    zs_dim: int = 0
    zd_dim: int = 0

    def __post_init__(self):
        if self.z0_dim <= 0 or self.zs_dim < 0 or self.zd_dim < 0:
            raise ValueError(f"bad latent layout {self}")

    @property
    def total(self):
        return self.z0_dim + self.zs_dim + self.zd_dim

    def split(self, z: Tensor):
        """Contiguous segments (z0, z_s, z_d); absent segments are None."""
        from .tensor import narrow

        if z.data.shape[-1] != self.total:
            raise ShapeError(f"latent dim {z.data.shape[-1]} != layout total {self.total}")
        z0 = narrow(z, 0, self.z0_dim) if self.total != self.z0_dim else z
        zs = zd = None
        if self.zs_dim:
            zs = narrow(z, self.z0_dim, self.z0_dim + self.zs_dim)
        if self.zd_dim:
            zd = narrow(z, self.z0_dim + self.zs_dim, self.total)
        return z0, zs, zd


@dataclass
class GeneratorModel:
    layout: LatentLayout
    dynamics_net: MLP        # [z0 + z_d + time] -> z0
    emission_net: MLP        # [z0 + z_s] -> data dim
    sigma_eps: float = 0.1
    grid_h: float = 0.1      # dense solver grid step target
    t0: float = 0.0
    with_time: bool = True

    def __post_init__(self):
        lay = self.layout
        dyn_in = lay.z0_dim + lay.zd_dim + (1 if self.with_time else 0)
        if self.dynamics_net.in_dim != dyn_in or self.dynamics_net.out_dim != lay.z0_dim:
            raise ShapeError(
                f"dynamics net {self.dynamics_net.in_dim}->{self.dynamics_net.out_dim} "
                f"does not match layout (want {dyn_in}->{lay.z0_dim})"
            )
        if self.emission_net.in_dim != lay.z0_dim + lay.zs_dim:
            raise ShapeError(
                f"emission net input {self.emission_net.in_dim} != "
                f"z0 + z_s = {lay.z0_dim + lay.zs_dim}"
            )
        if self.sigma_eps <= 0 or self.grid_h <= 0:
            raise ValueError("sigma_eps and grid_h must be positive")

    @classmethod
    def create(cls, layout, data_dim, rng, hidden=64, activation="tanh",
               sigma_eps=0.1, grid_h=0.1, with_time=True):
        dyn_in = layout.z0_dim + layout.zd_dim + (1 if with_time else 0)
        acts = [activation, activation, "identity"]
        dyn = MLP.create([dyn_in, hidden, hidden, layout.z0_dim], acts, rng, out_scale=0.1)
        emi = MLP.create([layout.z0_dim + layout.zs_dim, hidden, hidden, data_dim],
                         acts, rng, out_scale=0.1)
        return cls(layout, dyn, emi, sigma_eps=sigma_eps, grid_h=grid_h,
                   with_time=with_time)

    def params(self):
        return self.dynamics_net.params() + self.emission_net.params()

    @property
    def data_dim(self):
        return self.emission_net.out_dim

    def latent_trajectory(self, z: Tensor, times):
        """Dense-solve the z0 segment at the given [B,T] (or shared [T]) times."""
        times = self._times_for(z, times)
        z0, zs, zd = self.layout.split(z)
        func = OdeFunc(self.dynamics_net, self.layout.z0_dim, zd=zd,
                       with_time=self.with_time)
        spans = times[:, -1]
        widest = float(np.max(spans) - self.t0)
        n_steps = max(1, int(math.ceil(widest / self.grid_h - 1e-12)))
        sol = ode_solve_dense(func, z0, self.t0, spans, n_steps)
        return sol.at(times), zs

    def decode(self, z: Tensor, times) -> Tensor:
        """Noiseless emission mean at each requested time: [B, T, data_dim]."""
        lat, zs = self.latent_trajectory(z, times)
        b, t, _ = lat.data.shape
        if zs is not None:
            lat = concat([lat, repeat_mid(zs, t)], axis=-1)
        flat = reshape(lat, (b * t, lat.data.shape[-1]))
        out = self.emission_net(flat)
        return reshape(out, (b, t, self.data_dim))

    def _times_for(self, z, times):
        times = np.asarray(times, dtype=np.float64)
        if times.ndim == 1:
            times = np.broadcast_to(times, (z.data.shape[0], times.size))
        if times.ndim != 2 or times.shape[0] != z.data.shape[0]:
            raise ShapeError(f"times {times.shape} do not match batch {z.data.shape}")
        if np.any(times < self.t0):
            raise ValueError(f"requested times precede the model anchor t0={self.t0}")
        return times


def recon_loss(model: GeneratorModel, z, values, mask, times) -> Tensor:
    """Masked squared-residual objective for the generator update.

    sum over observed points of r^2 / (2 sigma_eps^2), averaged over the
    batch. z is treated as a constant: posterior samples do not receive
    gradients here.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask)
    if not mask.any():
        raise ValueError("recon_loss needs a nonempty observation mask")
    zc = z.detach() if isinstance(z, Tensor) else Tensor(z)
    pred = model.decode(zc, times)
    r = (pred - values) * mask[:, :, None].astype(np.float64)
    b = values.shape[0]
    return sum_(square(r)) * (0.5 / (model.sigma_eps ** 2 * b))


def sample_sequence(model: GeneratorModel, prior: EbmPrior, lspec: LangevinSpec,
                    times, rng, count=1, with_noise=False):
    """Ancestral sampling: short-run chains on the prior potential, then decode."""
    z = langevin_sample(lambda zz: neg_log_prior_potential(prior, zz),
                        lspec, count, prior.dim, rng)
    seq = model.decode(Tensor(z), np.asarray(times, dtype=np.float64)).data.copy()
    if with_noise:
        seq += rng.normal(0.0, model.sigma_eps, seq.shape)
    return seq, z
