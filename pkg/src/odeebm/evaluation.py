"""Test-phase inference and evaluation.

Conditional generation runs in two steps: short-run Langevin chains on the
posterior potential restricted to the conditioning points, then a decode of
the sampled latent at the requested prediction times. Metrics are masked MSE
split into interpolation (inside the conditioning time window) and
extrapolation (beyond it), plus prior-energy scores for OOD ranking.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .tensor import Tensor
from .nn import frozen
from .datasets import DataError, first_k_mask, stack_series, subsample
from .langevin import LangevinSpec, langevin_sample, posterior_potential
from .prior import energy_score


@dataclass
class EvalProtocol:
    mode: str = "ratio"         # ratio | first_k | full
    ratio: float = 0.5
    first_k: int = 10
    steps: int = 20             # Langevin steps at test time
    step_size: float = 0.01
    n_samples: int = 1          # posterior samples whose predictions average
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.mode not in ("ratio", "first_k", "full"):
            raise DataError(f"unknown conditioning mode {self.mode!r}")

    def spec(self):
        return LangevinSpec(steps=self.steps, step_size=self.step_size)


def conditioning_mask(series, protocol: EvalProtocol, seed) -> np.ndarray:
    if protocol.mode == "full":
        return series.mask.copy()
    if protocol.mode == "first_k":
        return first_k_mask(series, protocol.first_k) & series.mask
    return subsample(series, protocol.ratio, seed) & series.mask


def compact_conditioning(times, values, cond_mask):
    """Gather masked-in points into dense [B,K] / [B,K,D] arrays.

    All rows must select the same number of points (they do for every
    protocol here: fixed ratio of a fixed length, first-K, or full)."""
    counts = cond_mask.sum(axis=1)
    if counts.min() == 0:
        raise ValueError("a series has an empty conditioning set")
    if counts.min() != counts.max():
        raise ValueError(f"ragged conditioning sizes {counts.min()}..{counts.max()}")
    k = int(counts[0])
    b, t = cond_mask.shape
    idx = np.argsort(~cond_mask, axis=1, kind="stable")[:, :k]
    rows = np.arange(b)[:, None]
    return times[rows, idx], values[rows, idx, :]


def infer_latent(model, prior, times, values, cond_mask, spec: LangevinSpec, rng,
                 n_samples=1) -> np.ndarray:
    """Posterior samples of the latent for a batch: [n_samples, B, D]."""
    ct, cv = compact_conditioning(times, values, cond_mask)
    b = times.shape[0]

    def potential(z):
        return posterior_potential(model, prior, ct, cv, z)

    outs = []
    with frozen(model.params() + prior.params()):
        for _ in range(n_samples):
            outs.append(langevin_sample(potential, spec, b, prior.dim, rng))
    return np.stack(outs)


def predict(model, z, times) -> np.ndarray:
    """Decode a latent (array or Tensor) at the requested times; no tape."""
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    return model.decode(zt, times).data.copy()


def masked_mse(pred, truth, mask) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if not mask.any():
        raise ValueError("masked_mse over an empty mask")
    diff = (pred - truth)[mask]
    return float(np.mean(diff * diff))


def evaluate(model, prior, series, protocol: EvalProtocol):
    """Alg.-2 style evaluation over a list of series; one row per sequence."""
    rows = []
    for batch_no, start in enumerate(range(0, len(series), protocol.batch_size)):
        chunk = series[start:start + protocol.batch_size]
        rng = np.random.default_rng(
            np.random.SeedSequence(protocol.seed, spawn_key=(1, batch_no)))
        times, values, mask = stack_series(chunk)
        cmask = np.stack([
            conditioning_mask(s, protocol, np.random.default_rng(
                np.random.SeedSequence(protocol.seed, spawn_key=(2, start + j))))
            for j, s in enumerate(chunk)
        ])
        zs = infer_latent(model, prior, times, values, cmask, protocol.spec(),
                          rng, protocol.n_samples)
        preds = np.mean([predict(model, z, times) for z in zs], axis=0)
        energies = energy_score(prior, zs[0])
        lo = np.where(cmask, times, np.inf).min(axis=1)
        hi = np.where(cmask, times, -np.inf).max(axis=1)
        for j, s in enumerate(chunk):
            inside = mask[j] & (times[j] >= lo[j]) & (times[j] <= hi[j])
            outside = mask[j] & ~inside
            rows.append({
                "id": s.id,
                "protocol": protocol.mode,
                "langevin_steps": protocol.steps,
                "mse": masked_mse(preds[j], values[j], mask[j]),
                "mse_interp": masked_mse(preds[j], values[j], inside) if inside.any() else float("nan"),
                "mse_extrap": masked_mse(preds[j], values[j], outside) if outside.any() else float("nan"),
                "energy": float(energies[j]),
            })
    return rows


def summarize(rows):
    out = {"n": len(rows)}
    for key in ("mse", "mse_interp", "mse_extrap", "energy"):
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        good = vals[np.isfinite(vals)]
        out[key] = float(np.mean(good)) if good.size else float("nan")
    return out


def shuffle_series(series, rng):
    """OOD construction: permute the value rows while keeping the time grid."""
    perm = rng.permutation(series.times.shape[0])
    return replace_values(series, series.values[perm])


def replace_values(series, values):
    from .datasets import TimeSeries

    return TimeSeries(series.id, series.times.copy(), np.asarray(values, float).copy(),
                      series.mask.copy(), dict(series.metadata))


def ood_score_dataset(model, prior, series, protocol: EvalProtocol, shuffle_seed=1):
    """Prior energies of posterior latents for real vs order-shuffled copies."""
    rng = np.random.default_rng(shuffle_seed)
    shuffled = [shuffle_series(s, rng) for s in series]
    real_rows = evaluate(model, prior, series, protocol)
    shuf_rows = evaluate(model, prior, shuffled, protocol)
    real_e = np.array([r["energy"] for r in real_rows])
    shuf_e = np.array([r["energy"] for r in shuf_rows])
    return real_e, shuf_e, auroc(shuf_e, real_e)


def auroc(pos, neg) -> float:
    """Rank statistic (Mann-Whitney): P(pos > neg) + 0.5 P(pos = neg)."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    both = np.concatenate([pos, neg])
    order = np.argsort(both, kind="mergesort")
    ranks = np.empty_like(both)
    ranks[order] = np.arange(1, both.size + 1, dtype=np.float64)
    # average ranks over ties
    sorted_vals = both[order]
    i = 0
    while i < both.size:
        j = i
        while j + 1 < both.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def pca_embed(latents, k=2):
    """Centered SVD projection; returns (coords [N,k], explained ratios [k])."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k:
        raise ValueError(f"need at least {k} latent vectors, got {x.shape}")
    centered = x - x.mean(axis=0, keepdims=True)
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    total = float(np.sum(s * s))
    coords = u[:, :k] * s[:k]
    if total == 0.0:
        return coords, np.zeros(k)
    return coords, (s[:k] * s[:k]) / total


def langevin_step_sweep(model, prior, series, protocol: EvalProtocol, steps_list):
    """Test MSE as a function of the posterior chain length."""
    out = []
    for steps in steps_list:
        rows = evaluate(model, prior, series, replace(protocol, steps=int(steps)))
        summary = summarize(rows)
        out.append({"langevin_steps": int(steps), **{k: summary[k] for k in
                                                     ("mse", "mse_interp", "mse_extrap")}})
    return out


def linear_r2(features, target) -> float:
    """R^2 of an ordinary least-squares fit (with intercept) features -> target."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    design = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 0.0
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot


def write_rows_csv(path, rows, fieldnames=None):
    if not rows:
        raise ValueError("no rows to write")
    fieldnames = fieldnames or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def write_curve_csv(path, times, truth, pred):
    times = np.asarray(times).reshape(-1)
    truth = np.asarray(truth).reshape(len(times), -1)
    pred = np.asarray(pred).reshape(len(times), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        dims = truth.shape[1]
        writer.writerow(["time"] + [f"truth_{i}" for i in range(dims)]
                        + [f"pred_{i}" for i in range(dims)])
        for row in zip(times, truth, pred):
            writer.writerow([row[0], *row[1], *row[2]])
