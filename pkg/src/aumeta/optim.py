"""Adam over ParameterSets, with optional per-name update masking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Set

from .params import ParameterSet


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[ParameterSet] = None
    v: Optional[ParameterSet] = None
    frozen: Set[str] = field(default_factory=set)

    def step(self, params: ParameterSet, grads: ParameterSet, lr: Optional[float] = None) -> None:
        """One in-place update; names in `frozen` are left untouched."""
        if self.m is None:
            self.m = params.zeros_like()
            self.v = params.zeros_like()
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            if name in self.frozen:
                continue
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / bias1) / ((v / bias2) ** 0.5 + self.eps)

    def state_arrays(self):
        """Moments as flat dicts for checkpointing (empty before first step)."""
        arrays = {}
        if self.m is not None:
            for k, a in self.m.items():
                arrays[f"adam_m::{k}"] = a
            for k, a in self.v.items():
                arrays[f"adam_v::{k}"] = a
        return arrays

    def load_state_arrays(self, arrays, params: ParameterSet, t: int) -> None:
        m = {k: arrays[f"adam_m::{k}"] for k in params.names if f"adam_m::{k}" in arrays}
        if m:
            self.m = ParameterSet(m)
            self.v = ParameterSet({k: arrays[f"adam_v::{k}"] for k in params.names})
        self.t = t
