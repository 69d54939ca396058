"""Multilayer perceptrons and the Adam optimizer on top of the tensor tape.

An MLP forward pass is recorded as a single fused tape node: the hot training
loops push tens of thousands of network evaluations through the tape, and
per-layer nodes would triple the Python overhead. The fused backward is
checked against finite differences in the test suite like every other op.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, _acc, _gelu_fwd, _gelu_grad, _record
from . import tensor as T

ACTIVATIONS = ("gelu", "tanh", "identity")


def _act_fwd(kind, x):
    if kind == "gelu":
        return _gelu_fwd(x)
    if kind == "tanh":
        return np.tanh(x)
    return x


def _act_grad(kind, x, y):
    if kind == "gelu":
        return _gelu_grad(x)
    if kind == "tanh":
        return 1.0 - y * y
    return 1.0


@dataclass
class MLP:
    """Fully-connected stack; weights[k] maps widths[k] -> widths[k+1]."""

    widths: list[int]
    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]

    @classmethod
    def create(cls, widths, activations, rng, out_scale=1.0):
        """Glorot-uniform init; `out_scale` shrinks the last layer (near-zero
        initial output keeps early sampling dynamics tame)."""
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        ws, bs = [], []
        for k in range(len(widths) - 1):
            fan_in, fan_out = widths[k], widths[k + 1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            if k == len(widths) - 2:
                w = w * out_scale
            ws.append(Tensor(w, requires_grad=True))
            bs.append(Tensor(np.zeros(fan_out), requires_grad=True))
        return cls(list(widths), ws, bs, list(activations))

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def __call__(self, x):
        return mlp_apply(self, x)


def mlp_apply(net: MLP, x: Tensor) -> Tensor:
    """Batched affine-activation chain, one fused tape node."""
    if x.data.shape[-1] != net.in_dim:
        raise ShapeError(
            f"mlp input width {x.data.shape[-1]} != first layer width {net.in_dim}"
        )
    h = x.data
    pre = []   # pre-activation per layer, cached for backward
    post = []  # inputs to each layer
    for w, b, act in zip(net.weights, net.biases, net.activations):
        post.append(h)
        z = h @ w.data
        z += b.data
        pre.append(z)
        h = _act_fwd(act, z)
    out = Tensor(h)

    if T._ACTIVE_TAPE is not None and (
        x.requires_grad or any(p.requires_grad for p in net.params())
    ):
        acts = net.activations
        outd = out.data

        def bwd(g):
            d = g
            for k in range(len(net.weights) - 1, -1, -1):
                y = outd if k == len(net.weights) - 1 else post[k + 1]
                d = d * _act_grad(acts[k], pre[k], y)
                w, b = net.weights[k], net.biases[k]
                if b.requires_grad:
                    _acc(b, d.sum(axis=0), own=True)
                if w.requires_grad:
                    _acc(w, post[k].T @ d, own=True)
                if k > 0 or x.requires_grad:
                    d = d @ w.data.T
            if x.requires_grad:
                _acc(x, d, own=True)

        _record(out, bwd)
    return out


@dataclass
class AdamState:
    """Per-parameter moment buffers plus shared hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr, **kw):
        st = cls(lr=lr, **kw)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(params, grads, state: AdamState):
    """Standard bias-corrected Adam update, in place on params.

    `grads` are descent gradients (the loss decreases along -grad).
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params vs {len(grads)} grads")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def zero_grads(params):
    for p in params:
        p.grad = None


def grads_of(params):
    """Collect .grad arrays, substituting zeros where a param was unused."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


class frozen:
    """Temporarily clear requires_grad on the given tensors (e.g. model
    weights while Langevin only needs gradients in z)."""

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, s in zip(self.params, self.saved):
            p.requires_grad = s
        return False
