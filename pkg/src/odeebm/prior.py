"""Energy-based prior over the initial latent state.

The prior tilts a base Gaussian N(0, sigma^2 I) by exp(f(z)) where f is a
small MLP with a scalar head. Sampling and posterior inference work with the
potential U(z) = -f(z) + ||z||^2 / (2 sigma^2), i.e. the negative unnormalized
log density; the partition constant never needs to be evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tape, Tensor, square, sum_
from .nn import MLP, grads_of, zero_grads


@dataclass
class EbmPrior:
    energy_net: MLP      # d -> ... -> 1, the tilt f(z)
    sigma: float = 1.0   # base Gaussian std
    dim: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("base std must be positive")
        if self.dim == 0:
            self.dim = self.energy_net.in_dim
        if self.energy_net.in_dim != self.dim or self.energy_net.out_dim != 1:
            raise ShapeError(
                f"energy net must map {self.dim} -> 1, got "
                f"{self.energy_net.in_dim} -> {self.energy_net.out_dim}"
            )

    @classmethod
    def create(cls, dim, hidden, rng, sigma=1.0, activation="gelu"):
        net = MLP.create(
            [dim, hidden, hidden, 1], [activation, activation, "identity"],
            rng, out_scale=0.1,
        )
        return cls(net, sigma=sigma, dim=dim)

    def params(self):
        return self.energy_net.params()


def neg_log_prior_potential(prior: EbmPrior, z: Tensor) -> Tensor:
    """U(z) = -f(z) + ||z||^2 / (2 sigma^2), one value per batch row."""
    if z.data.shape[-1] != prior.dim:
        raise ShapeError(f"latent dim {z.data.shape[-1]} != prior dim {prior.dim}")
    f = prior.energy_net(z)
    quad = sum_(square(z), axis=-1, keepdims=True) * (0.5 / prior.sigma ** 2)
    return (quad - f).reshape((-1,))


def energy_score(prior: EbmPrior, z) -> np.ndarray:
    """Prior potential per row; higher means further from the learned prior."""
    zt = z if isinstance(z, Tensor) else Tensor(z)
    if zt.data.ndim == 1:
        zt = Tensor(zt.data[None, :])
    return neg_log_prior_potential(prior, zt).data.copy()


def ebm_param_gradient(prior: EbmPrior, posterior_samples, prior_samples):
    """Monte-Carlo ascent direction for the tilt parameters.

    Returns, per energy-net parameter, mean over posterior samples of the
    parameter gradient of f minus the same mean over prior samples. Both
    sample sets are treated as constants.
    """
    post = np.asarray(posterior_samples, dtype=np.float64)
    pri = np.asarray(prior_samples, dtype=np.float64)
    if post.size == 0 or pri.size == 0:
        raise ValueError("sample batches must be nonempty")
    params = prior.params()

    def mean_grad(batch):
        zero_grads(params)
        with Tape() as tp:
            f = prior.energy_net(Tensor(batch))
            tp.backward(f.mean())
        return grads_of(params)

    g_post = mean_grad(post)
    g_pri = mean_grad(pri)
    zero_grads(params)
    return [a - b for a, b in zip(g_post, g_pri)]
