"""Adaptive-moment optimizer with bias correction."""
from __future__ import annotations

from typing import Mapping

import torch

ADAM_EPS = 1e-8


@torch.no_grad()
def adam_step(params: Mapping, grads: Mapping, state: dict, lr: float, beta1: float, beta2: float, eps: float = ADAM_EPS):
    """Update ``params`` in place; ``state`` holds ``step``, ``m`` and ``v``.

    Missing gradients are treated as zero, so their moments still decay.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state["step"] = t = state.get("step", 0) + 1
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if name not in m:
            m[name] = torch.zeros_like(p)
            v[name] = torch.zeros_like(p)
        elif m[name].shape != p.shape:
            raise ValueError(f"optimizer state for {name} has the wrong shape")
        m[name].mul_(beta1).add_(g, alpha=1 - beta1)
        v[name].mul_(beta2).addcmul_(g, g, value=1 - beta2)
        denom = (v[name] / c2).sqrt_().add_(eps)
        p.addcdiv_(m[name] / c1, denom, value=-lr)
    return params, state


class Adam:
    """Holds a named parameter set and its moment state."""

    def __init__(self, params: Mapping, lr: float, betas=(0.9, 0.999)):
        self.params = dict(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.state: dict = {"step": 0, "m": {}, "v": {}}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, self.lr, *self.betas)

    def state_tensors(self) -> dict:
        out = {}
        for name in self.params:
            if name in self.state["m"]:
                out[f"m.{name}"] = self.state["m"][name]
                out[f"v.{name}"] = self.state["v"][name]
        return out

    def load_state_tensors(self, step: int, tensors: Mapping) -> None:
        self.state = {"step": int(step), "m": {}, "v": {}}
        for name, p in self.params.items():
            if f"m.{name}" in tensors:
                for kind in ("m", "v"):
                    t = tensors[f"{kind}.{name}"]
                    if t.shape != p.shape:
                        raise ValueError(f"optimizer state for {name} has the wrong shape")
                    self.state[kind][name] = t.clone()
