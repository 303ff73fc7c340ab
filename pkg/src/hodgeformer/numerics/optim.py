"""Adam with bias correction and cosine learning-rate annealing."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(step, total_steps, lr_max, lr_min=0.0):
    if total_steps <= 0:
        return lr_max
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update of the arrays in ``params``.

    ``state`` is a dict holding ``t`` and the moment lists ``m`` and ``v``;
    it is initialized on first use.
    """
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if m.shape != p.shape:
            raise ValueError("optimizer state does not match parameter shapes")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


class Adam:
    """Adam over a name -> Tensor mapping."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        names = list(self.params)
        adam_step([self.params[k].data for k in names], [self.params[k].grad for k in names],
                  self.state, lr, self.beta1, self.beta2, self.eps)

    def state_arrays(self):
        if not self.state:
            return {}
        out = {}
        for name, m, v in zip(self.params, self.state["m"], self.state["v"]):
            out[f"adam_m/{name}"] = m
            out[f"adam_v/{name}"] = v
        return out

    def load_state_arrays(self, arrays, t):
        if t == 0:
            self.state = {}
            return
        self.state = {"t": int(t),
                      "m": [np.array(arrays[f"adam_m/{k}"]) for k in self.params],
                      "v": [np.array(arrays[f"adam_v/{k}"]) for k in self.params]}
