"""AdamW with decoupled weight decay, and the warmup/decay LR schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor


def lr_at(
    step: int,
    warmup: int,
    peak: float,
    total: int,
    shape: str = "linear",
) -> float:
    """Linear ramp 0 -> peak over ``warmup`` steps, then decay to 0 at ``total``.

    ``shape`` selects the post-warmup decay: "linear" (default) or "cosine".
    """
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if shape not in ("linear", "cosine"):
        raise ConfigError(f"unknown decay shape {shape!r}")
    if step >= total:
        return 0.0
    if warmup > 0 and step <= warmup:
        return peak * (step / warmup)
    if shape == "linear":
        return peak * ((total - step) / (total - warmup))
    frac = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled-decay AdamW over a named parameter dict.

    Weight decay applies to matrices (ndim >= 2) only; biases, norm affines and
    other vectors are left undecayed. Aborts with the parameter name on any
    non-finite gradient.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.98,
        eps: float = 1e-6,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay != 0.0 and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- checkpoint plumbing -------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            for store, prefix in ((self.m, "opt.m."), (self.v, "opt.v.")):
                key = prefix + k
                if key not in arrays:
                    raise ShapeError(f"missing optimizer state {key!r}")
                arr = np.asarray(arrays[key], dtype=store[k].dtype)
                if arr.shape != store[k].shape:
                    raise ShapeError(
                        f"optimizer state {key!r} shape {arr.shape} != {store[k].shape}"
                    )
                store[k][...] = arr
        self.step_count = int(step_count)
