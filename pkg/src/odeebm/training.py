"""Maximum-likelihood training loop.

Each iteration alternates: (a) short-run chains for prior samples, (b)
short-run chains (or an encoder pass, in amortized mode) for posterior
samples conditioned on each sequence's observed points, (c) an Adam step on
the prior tilt from the contrast of the two sample sets, (d) an Adam step on
the generator from the reconstruction objective at the posterior samples.
Checkpoints round-trip bitwise, including optimizer moments and rng streams.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import Tape, Tensor
from .nn import AdamState, MLP, adam_step, frozen, grads_of, zero_grads
from .datasets import Dataset, first_k_mask, stack_series, subsample
from .generator import GeneratorModel, LatentLayout, recon_loss
from .langevin import (
    LangevinSpec,
    NumericalError,
    langevin_sample,
    posterior_potential,
    potential_values,
)
from .prior import EbmPrior, ebm_param_gradient, neg_log_prior_potential
from .baseline import SeqEncoder, elbo_loss, encode
from .evaluation import EvalProtocol, compact_conditioning, evaluate, summarize

CKPT_MAGIC = b"OEBMCK01"
CKPT_VERSION = 1

METRIC_COLUMNS = ("iteration", "recon_loss", "ebm_grad_norm", "prior_energy_mean",
                  "posterior_energy_mean", "val_mse", "secs_per_iter")


@dataclass
class ModelConfig:
    z0_dim: int = 10
    zs_dim: int = 0
    zd_dim: int = 0
    data_dim: int = 1
    gen_hidden: int = 64
    gen_activation: str = "tanh"
    ebm_hidden: int = 25
    sigma: float = 1.0
    sigma_eps: float = 0.1
    grid_h: float = 0.1
    with_time: bool = True
    encoder_hidden: int = 32

    @property
    def latent_dim(self):
        return self.z0_dim + self.zs_dim + self.zd_dim


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 64
    prior_steps: int = 20
    posterior_steps: int = 20
    prior_step_size: float = 0.01
    posterior_step_size: float = 0.01
    lr_alpha: float = 1e-4
    lr_phi: float = 1e-3
    seed: int = 0
    log_every: int = 10
    val_every: int = 100
    ckpt_every: int = 200
    condition_mode: str = "ratio"      # ratio | first_k | full
    condition_ratio: float = 0.5
    condition_k: int = 10
    supervise: str = "all"             # all | condition
    mode: str = "mcmc"                 # mcmc | amortized
    ebm_prior: bool = True
    warm_start: bool = False           # experimental: reuse posterior chains

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size <= 0:
            raise ValueError("bad iteration/batch settings")
        if self.mode not in ("mcmc", "amortized"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.condition_mode not in ("ratio", "first_k", "full"):
            raise ValueError(f"unknown conditioning mode {self.condition_mode!r}")
        if self.supervise not in ("all", "condition"):
            raise ValueError(f"unknown supervision mode {self.supervise!r}")
        for name in ("prior_step_size", "posterior_step_size", "lr_alpha", "lr_phi"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


RNG_NAMES = ("data", "cond", "prior", "post", "noise")


@dataclass
class TrainState:
    model: GeneratorModel
    prior: EbmPrior
    encoder: SeqEncoder | None
    adam_alpha: AdamState
    adam_phi: AdamState
    model_cfg: ModelConfig
    iteration: int = 0
    rngs: dict = field(default_factory=dict)
    best_val: float = float("inf")
    warm_cache: dict = field(default_factory=dict)
    last_ckpt: str = ""

    def phi_params(self):
        params = self.model.params()
        if self.encoder is not None:
            params = params + self.encoder.params()
        return params


def build_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(RNG_NAMES) + 1)
    init_rng = np.random.default_rng(seeds[0])
    rngs = {name: np.random.default_rng(s) for name, s in zip(RNG_NAMES, seeds[1:])}

    layout = LatentLayout(model_cfg.z0_dim, model_cfg.zs_dim, model_cfg.zd_dim)
    model = GeneratorModel.create(
        layout, model_cfg.data_dim, init_rng, hidden=model_cfg.gen_hidden,
        activation=model_cfg.gen_activation, sigma_eps=model_cfg.sigma_eps,
        grid_h=model_cfg.grid_h, with_time=model_cfg.with_time)
    prior = EbmPrior.create(layout.total, model_cfg.ebm_hidden, init_rng,
                            sigma=model_cfg.sigma)
    if not cfg.ebm_prior:
        # exact Gaussian prior: zero the scalar head and never update it
        prior.energy_net.weights[-1].data[:] = 0.0
        prior.energy_net.biases[-1].data[:] = 0.0
    encoder = None
    if cfg.mode == "amortized":
        encoder = SeqEncoder.create(model_cfg.data_dim, layout.total, init_rng,
                                    hidden_dim=model_cfg.encoder_hidden)
    state = TrainState(
        model=model, prior=prior, encoder=encoder,
        adam_alpha=AdamState.for_params(prior.params(), cfg.lr_alpha),
        adam_phi=AdamState.for_params(
            model.params() + (encoder.params() if encoder else []), cfg.lr_phi),
        model_cfg=model_cfg, rngs=rngs)
    return state


def _conditioning_masks(times, masks, cfg: TrainConfig, rng):
    if cfg.condition_mode == "full":
        return masks.copy()
    out = np.zeros_like(masks)
    t = masks.shape[1]
    if cfg.condition_mode == "first_k":
        out[:, : min(cfg.condition_k, t)] = True
        return out & masks
    k = max(1, int(round(cfg.condition_ratio * t)))
    for i in range(masks.shape[0]):
        idx = rng.choice(t, size=k, replace=False)
        out[i, idx] = True
    return out & masks


def train_step(state: TrainState, batch, cfg: TrainConfig, batch_ids=None):
    """One iteration over a stacked batch (times, values, mask)."""
    times, values, mask = batch
    if values.shape[0] == 0:
        raise ValueError("empty batch")
    b = values.shape[0]
    dim = state.prior.dim
    t_start = time.perf_counter()

    cond_mask = _conditioning_masks(times, mask, cfg, state.rngs["cond"])
    ct, cv = compact_conditioning(times, values, cond_mask)

    all_params = state.model.params() + state.prior.params() + (
        state.encoder.params() if state.encoder else [])

    # (a) prior chains
    z_minus = None
    if cfg.ebm_prior:
        pspec = LangevinSpec(steps=cfg.prior_steps, step_size=cfg.prior_step_size)
        with frozen(all_params):
            z_minus = langevin_sample(
                lambda z: neg_log_prior_potential(state.prior, z),
                pspec, b, dim, state.rngs["prior"])

    # (b) posterior samples
    elbo = None
    if cfg.mode == "mcmc":
        qspec = LangevinSpec(steps=cfg.posterior_steps,
                             step_size=cfg.posterior_step_size)
        init = None
        if cfg.warm_start and batch_ids is not None:
            cached = [state.warm_cache.get(i) for i in batch_ids]
            if all(c is not None for c in cached):
                init = np.stack(cached)
                qspec = replace(qspec, init="provided")
        with frozen(all_params):
            z_plus = langevin_sample(
                lambda z: posterior_potential(state.model, state.prior, ct, cv, z),
                qspec, b, dim, state.rngs["post"], z_init=init)
        if cfg.warm_start and batch_ids is not None:
            for i, row in zip(batch_ids, z_plus):
                state.warm_cache[i] = row.copy()
    else:
        sup_mask = mask if cfg.supervise == "all" else cond_mask
        noise = state.rngs["noise"].standard_normal((b, dim))
        zero_grads(state.phi_params())
        with Tape() as tape:
            elbo, z_plus = elbo_loss(
                state.model, state.encoder, state.prior,
                "ebm" if cfg.ebm_prior else "standard",
                times, values, sup_mask, cond_mask, noise)
        tape.backward(elbo)

    # (c) prior tilt update from the sample contrast
    ebm_grad_norm = 0.0
    if cfg.ebm_prior:
        ascent = ebm_param_gradient(state.prior, z_plus, z_minus)
        ebm_grad_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in ascent)))
        if not np.isfinite(ebm_grad_norm):
            raise NumericalError(_blowup_msg(state, "prior gradient"))
        adam_step(state.prior.params(), [-g for g in ascent], state.adam_alpha)

    # (d) generator update
    if cfg.mode == "mcmc":
        sup_mask = mask if cfg.supervise == "all" else cond_mask
        zero_grads(state.model.params())
        with Tape() as tape:
            loss = recon_loss(state.model, z_plus, values, sup_mask, times)
        tape.backward(loss)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericalError(_blowup_msg(state, "reconstruction loss"))
        adam_step(state.model.params(), grads_of(state.model.params()),
                  state.adam_phi)
    else:
        loss_val = elbo.item()
        if not np.isfinite(loss_val):
            raise NumericalError(_blowup_msg(state, "elbo"))
        adam_step(state.phi_params(), grads_of(state.phi_params()), state.adam_phi)

    prior_energy = float("nan")
    if z_minus is not None:
        prior_energy = float(np.mean(potential_values(
            lambda z: neg_log_prior_potential(state.prior, z), z_minus)))
    post_energy = float(np.mean(potential_values(
        lambda z: neg_log_prior_potential(state.prior, z), z_plus)))

    state.iteration += 1
    return {
        "iteration": state.iteration,
        "recon_loss": loss_val,
        "ebm_grad_norm": ebm_grad_norm,
        "prior_energy_mean": prior_energy,
        "posterior_energy_mean": post_energy,
        "val_mse": "",
        "secs_per_iter": time.perf_counter() - t_start,
    }


def _blowup_msg(state, what):
    ref = state.last_ckpt or "none written yet"
    return (f"non-finite {what} at iteration {state.iteration + 1}; "
            f"last good checkpoint: {ref}")


def validation_protocol(cfg: TrainConfig, batch_size=64) -> EvalProtocol:
    return EvalProtocol(
        mode=cfg.condition_mode, ratio=cfg.condition_ratio,
        first_k=cfg.condition_k, steps=cfg.posterior_steps,
        step_size=cfg.posterior_step_size, seed=cfg.seed + 101,
        batch_size=batch_size)


def train(dataset: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
          run_dir=None, log_fn=None):
    """Run cfg.iterations over the dataset's training split.

    Returns (state, metrics rows). Writes metrics.csv and checkpoints under
    run_dir when given; the best-validation checkpoint is the exported model.
    """
    state = build_state(model_cfg, cfg)
    metrics = []
    if cfg.iterations == 0:
        return state, metrics

    train_series = dataset.train
    if not train_series:
        raise ValueError("dataset has no training split")
    val_series = dataset.val if dataset.val else train_series[: min(100, len(train_series))]
    val_proto = validation_protocol(cfg)

    ckpt_dir = None
    csv_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        csv_path = run_dir / "metrics.csv"
        csv_path.write_text(",".join(METRIC_COLUMNS) + "\n")

    order = np.arange(len(train_series))
    cursor = len(order)  # force an initial shuffle
    for j in range(cfg.iterations):
        if cursor + cfg.batch_size > len(order):
            state.rngs["data"].shuffle(order)
            cursor = 0
        ids = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        batch = stack_series([train_series[i] for i in ids])
        row = train_step(state, batch, cfg, batch_ids=list(ids))

        if cfg.val_every and state.iteration % cfg.val_every == 0:
            rows = evaluate(state.model, state.prior, val_series, val_proto) \
                if cfg.mode == "mcmc" else \
                _evaluate_amortized(state, val_series, val_proto)
            val_mse = summarize(rows)["mse"]
            row["val_mse"] = val_mse
            if val_mse < state.best_val:
                state.best_val = val_mse
                if ckpt_dir is not None:
                    save_checkpoint(ckpt_dir / "best.ckpt", state, cfg)
        metrics.append(row)
        if csv_path is not None:
            with open(csv_path, "a") as fh:
                fh.write(",".join(str(row[c]) for c in METRIC_COLUMNS) + "\n")
        if log_fn and (state.iteration % cfg.log_every == 0 or j == cfg.iterations - 1):
            log_fn(row)
        if ckpt_dir is not None and cfg.ckpt_every and \
                state.iteration % cfg.ckpt_every == 0:
            path = ckpt_dir / "last.ckpt"
            save_checkpoint(path, state, cfg)
            state.last_ckpt = str(path)
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "last.ckpt", state, cfg)
        if not (ckpt_dir / "best.ckpt").exists():
            save_checkpoint(ckpt_dir / "best.ckpt", state, cfg)
    return state, metrics


def _evaluate_amortized(state, series, protocol: EvalProtocol):
    """Encoder-mean inference for the amortized rows; mirrors evaluate()."""
    from .evaluation import conditioning_mask, masked_mse, predict
    from .prior import energy_score

    rows = []
    for batch_no, start in enumerate(range(0, len(series), protocol.batch_size)):
        chunk = series[start:start + protocol.batch_size]
        times, values, mask = stack_series(chunk)
        cmask = np.stack([
            conditioning_mask(s, protocol, np.random.default_rng(
                np.random.SeedSequence(protocol.seed, spawn_key=(2, start + j))))
            for j, s in enumerate(chunk)
        ])
        mu, _ = encode(state.encoder, times, values, cmask)
        preds = predict(state.model, mu.data, times)
        energies = energy_score(state.prior, mu.data)
        lo = np.where(cmask, times, np.inf).min(axis=1)
        hi = np.where(cmask, times, -np.inf).max(axis=1)
        for j, s in enumerate(chunk):
            inside = mask[j] & (times[j] >= lo[j]) & (times[j] <= hi[j])
            outside = mask[j] & ~inside
            rows.append({
                "id": s.id, "protocol": protocol.mode,
                "langevin_steps": 0,
                "mse": masked_mse(preds[j], values[j], mask[j]),
                "mse_interp": masked_mse(preds[j], values[j], inside) if inside.any() else float("nan"),
                "mse_extrap": masked_mse(preds[j], values[j], outside) if outside.any() else float("nan"),
                "energy": float(energies[j]),
            })
    return rows


def evaluate_state(state: TrainState, series, protocol: EvalProtocol):
    """Dispatch on the state's inference style (Langevin vs encoder)."""
    if state.encoder is not None:
        return _evaluate_amortized(state, series, protocol)
    return evaluate(state.model, state.prior, series, protocol)


def ablation_matrix(dataset: Dataset, model_cfg: ModelConfig, base_cfg: TrainConfig,
                    protocol: EvalProtocol, run_dir=None, log_fn=None):
    """Train the four {amortized, mcmc} x {gaussian, ebm} variants and score
    each on the test split with the same protocol. Returns (rows, states)."""
    variants = [
        ("amortized", False), ("amortized", True),
        ("mcmc", False), ("mcmc", True),
    ]
    rows, states = [], {}
    for mode, use_ebm in variants:
        name = f"{mode}{'+ebm' if use_ebm else ''}"
        cfg = replace(base_cfg, mode=mode, ebm_prior=use_ebm)
        sub_dir = None if run_dir is None else Path(run_dir) / name
        if log_fn:
            log_fn({"variant": name, "status": "training"})
        state, _ = train(dataset, model_cfg, cfg, run_dir=sub_dir, log_fn=None)
        eval_rows = evaluate_state(state, dataset.test, protocol)
        summary = summarize(eval_rows)
        rows.append({
            "variant": name,
            "mcmc": mode == "mcmc",
            "ebm_prior": use_ebm,
            "mse": summary["mse"],
            "mse_interp": summary["mse_interp"],
            "mse_extrap": summary["mse_extrap"],
        })
        states[name] = state
        if log_fn:
            log_fn(rows[-1])
    return rows, states


# ---------------------------------------------------------------------------
# checkpoints: magic, uint64 header length, JSON header, float64 blocks in
# the header's field_order. Bitwise round trip, rng streams included.

def _net_blocks(prefix, net: MLP):
    names, tensors = [], []
    for i, (w, bias) in enumerate(zip(net.weights, net.biases)):
        names.append(f"{prefix}.w{i}")
        tensors.append(w)
        names.append(f"{prefix}.b{i}")
        tensors.append(bias)
    return names, tensors


def _state_blocks(state: TrainState):
    names, tensors = [], []
    for prefix, net in (("dynamics", state.model.dynamics_net),
                        ("emission", state.model.emission_net),
                        ("energy", state.prior.energy_net)):
        n, t = _net_blocks(prefix, net)
        names += n
        tensors += t
    if state.encoder is not None:
        enc = state.encoder
        for nm, tn in (("enc.w_r", enc.w_r), ("enc.w_u", enc.w_u),
                       ("enc.w_c", enc.w_c), ("enc.b_r", enc.b_r),
                       ("enc.b_u", enc.b_u), ("enc.b_c", enc.b_c)):
            names.append(nm)
            tensors.append(tn)
        for prefix, net in (("enc.mu", enc.head_mu), ("enc.logvar", enc.head_logvar)):
            n, t = _net_blocks(prefix, net)
            names += n
            tensors += t
    return names, tensors


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    names, tensors = _state_blocks(state)
    field_order = list(names)
    arrays = [t.data for t in tensors]
    for opt_name, opt in (("adam_alpha", state.adam_alpha),
                          ("adam_phi", state.adam_phi)):
        for kind, buf in (("m", opt.m), ("v", opt.v)):
            for i, arr in enumerate(buf):
                field_order.append(f"{opt_name}.{kind}{i}")
                arrays.append(arr)
    header = {
        "format_version": CKPT_VERSION,
        "iteration": state.iteration,
        "best_val": state.best_val,
        "model_cfg": asdict(state.model_cfg),
        "train_cfg": asdict(cfg),
        "adam_alpha": {k: getattr(state.adam_alpha, k)
                       for k in ("lr", "beta1", "beta2", "eps", "step")},
        "adam_phi": {k: getattr(state.adam_phi, k)
                     for k in ("lr", "beta1", "beta2", "eps", "step")},
        "rng_states": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "shapes": {n: list(a.shape) for n, a in zip(field_order, arrays)},
        "field_order": field_order,
        "has_encoder": state.encoder is not None,
    }
    blob = json.dumps(header, sort_keys=True, default=int).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild (state, cfg) from a checkpoint; parameters restore bitwise."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise NumericalError(f"{path}: not a checkpoint file")
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        if header.get("format_version") != CKPT_VERSION:
            raise NumericalError(
                f"{path}: checkpoint version {header.get('format_version')} "
                f"unsupported (expected {CKPT_VERSION})")
        model_cfg = ModelConfig(**header["model_cfg"])
        cfg = TrainConfig(**header["train_cfg"])
        state = build_state(model_cfg, cfg)
        state.iteration = header["iteration"]
        state.best_val = header["best_val"]
        names, tensors = _state_blocks(state)
        lookup = dict(zip(names, tensors))
        for opt_name, opt in (("adam_alpha", state.adam_alpha),
                              ("adam_phi", state.adam_phi)):
            meta = header[opt_name]
            opt.lr, opt.beta1, opt.beta2, opt.eps = (
                meta["lr"], meta["beta1"], meta["beta2"], meta["eps"])
            opt.step = meta["step"]
            for kind, buf in (("m", opt.m), ("v", opt.v)):
                for i in range(len(buf)):
                    lookup[f"{opt_name}.{kind}{i}"] = buf[i]
        for name in header["field_order"]:
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            target = lookup[name]
            if isinstance(target, Tensor):
                target.data = raw.copy()
            else:
                target[...] = raw
        for k, st in header["rng_states"].items():
            state.rngs[k].bit_generator.state = st
    return state, cfg
