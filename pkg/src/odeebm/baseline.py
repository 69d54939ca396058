"""Amortized-inference baseline: a GRU encoder producing a Gaussian
approximate posterior over the latent, trained by maximizing the ELBO.

The encoder walks the observed points in reverse time order, feeding
(value, time gap to the next observed point) at each step; unobserved steps
leave the hidden state untouched, so padding and mask contents cannot leak
into the code. Used with either a standard-normal prior (analytic KL) or the
energy-based prior (single-sample unnormalized estimate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, clamp, concat, exp, sigmoid, square, sum_, tanh
from .nn import MLP
from .prior import EbmPrior


@dataclass
class SeqEncoder:
    input_dim: int           # data dim + 1 (time-gap feature)
    hidden_dim: int
    latent_dim: int
    w_r: Tensor
    w_u: Tensor
    w_c: Tensor
    b_r: Tensor
    b_u: Tensor
    b_c: Tensor
    head_mu: MLP
    head_logvar: MLP
    logvar_clip: float = 8.0

    @classmethod
    def create(cls, data_dim, latent_dim, rng, hidden_dim=32):
        in_dim = data_dim + 1
        gate_in = in_dim + hidden_dim

        def gate():
            limit = math.sqrt(6.0 / (gate_in + hidden_dim))
            return Tensor(rng.uniform(-limit, limit, (gate_in, hidden_dim)),
                          requires_grad=True)

        zeros = lambda: Tensor(np.zeros(hidden_dim), requires_grad=True)
        head = lambda: MLP.create([hidden_dim, latent_dim], ["identity"], rng)
        return cls(in_dim, hidden_dim, latent_dim,
                   gate(), gate(), gate(), zeros(), zeros(), zeros(),
                   head(), head())

    def params(self):
        return [self.w_r, self.w_u, self.w_c, self.b_r, self.b_u, self.b_c,
                *self.head_mu.params(), *self.head_logvar.params()]


def encode(enc: SeqEncoder, times, values, mask):
    """Gaussian posterior parameters (mu, logvar) for a batch [B,T,...]."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("every series needs at least one observed point")
    b, t = mask.shape

    # time gap to the next observed point, zero at each series' last one
    gaps = np.zeros((b, t))
    for i in range(b):
        obs = np.flatnonzero(mask[i])
        if obs.size > 1:
            gaps[i, obs[:-1]] = np.diff(times[i, obs])

    h = Tensor(np.zeros((b, enc.hidden_dim)))
    for step in range(t - 1, -1, -1):
        x = np.concatenate([values[:, step, :], gaps[:, step:step + 1]], axis=1)
        xh = concat([Tensor(x), h], axis=-1)
        r = sigmoid(xh @ enc.w_r + enc.b_r)
        u = sigmoid(xh @ enc.w_u + enc.b_u)
        cand = tanh(concat([Tensor(x), r * h], axis=-1) @ enc.w_c + enc.b_c)
        h_new = u * h + cand * (1.0 - u)
        m = mask[:, step:step + 1].astype(np.float64)
        h = h + (h_new - h) * m
    mu = enc.head_mu(h)
    logvar = clamp(enc.head_logvar(h), -enc.logvar_clip, enc.logvar_clip)
    return mu, logvar


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """Analytic KL(N(mu, diag exp(logvar)) || N(0, I)), averaged over the batch."""
    var = exp(logvar)
    per = sum_(square(mu) + var - logvar, axis=-1) - mu.data.shape[-1]
    return per.mean() * 0.5


def elbo_loss(model, encoder: SeqEncoder, prior: EbmPrior, prior_kind,
              times, values, sup_mask, cond_mask, noise):
    """Negative ELBO for a batch, differentiable in encoder and generator.

    prior_kind "standard": analytic Gaussian KL. prior_kind "ebm": the KL is
    replaced by the single-sample estimate log q(z|x) - (f(z) - ||z||^2 /
    (2 sigma^2)); the dropped log Z is constant in the parameters this loss
    trains. Returns (loss, z data) so the caller can reuse the samples.
    """
    mu, logvar = encode(encoder, times, values, cond_mask)
    std = exp(logvar * 0.5)
    z = mu + std * noise
    pred = model.decode(z, times)
    b = values.shape[0]
    r = (pred - np.asarray(values, dtype=np.float64)) \
        * np.asarray(sup_mask, dtype=np.float64)[:, :, None]
    recon = sum_(square(r)) * (0.5 / (model.sigma_eps ** 2 * b))
    if prior_kind == "standard":
        kl = gaussian_kl(mu, logvar)
    elif prior_kind == "ebm":
        log_q = sum_(logvar + noise * noise, axis=-1) * -0.5
        f = prior.energy_net(z).reshape((-1,))
        log_p = f - sum_(square(z), axis=-1) * (0.5 / prior.sigma ** 2)
        kl = (log_q - log_p).mean()
    else:
        raise ValueError(f"unknown prior kind {prior_kind!r}")
    return recon + kl, z.data.copy()
