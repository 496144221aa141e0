"""Named parameter collections and the AdamW update."""
from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


def truncated_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) redrawn outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class ParameterStore:
    """Ordered name -> Tensor map with AdamW moments and a step counter."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.m = {}
        self.v = {}
        self.t = 0
        self.no_decay = set()
        self.frozen = set()

    def add(self, name, value, decay=True) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter {name!r}")
        tensor = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = tensor
        self.m[name] = np.zeros_like(tensor.data)
        self.v[name] = np.zeros_like(tensor.data)
        if not decay:
            self.no_decay.add(name)
        return tensor

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def n_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def freeze(self, prefix):
        for name in self.names(prefix):
            self.frozen.add(name)
            self.params[name].requires_grad = False

    def astype(self, dtype):
        """Switch every parameter and moment to ``dtype`` in place."""
        self.dtype = np.dtype(dtype)
        for name, t in self.params.items():
            t.data = t.data.astype(dtype)
            t.grad = None
            self.m[name] = self.m[name].astype(dtype)
            self.v[name] = self.v[name].astype(dtype)
        return self

    def values(self) -> dict:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_values(self, values: dict, strict=True):
        for name, arr in values.items():
            if name not in self.params:
                if strict:
                    raise ContractError(f"unknown parameter {name!r}")
                continue
            t = self.params[name]
            if t.shape != arr.shape:
                raise ContractError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=self.dtype)

    def state(self) -> dict:
        """Flat array dict of parameters and optimiser moments."""
        out = {}
        for name, t in self.params.items():
            out[name] = t.data
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def load_state(self, state: dict, t: int):
        for name in self.params:
            self.params[name].data = np.array(state[name], dtype=self.dtype)
            self.m[name] = np.array(state[f"adam.m/{name}"], dtype=self.dtype)
            self.v[name] = np.array(state[f"adam.v/{name}"], dtype=self.dtype)
        self.t = t

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float(np.sum(np.square(t.grad, dtype=np.float64)))
        return total ** 0.5


def adamw_step(store: ParameterStore, lr, beta1=0.9, beta2=0.999, eps=1e-6, weight_decay=0.01):
    """One AdamW update over every parameter that has a gradient.

    Decay is decoupled: ``p <- p - lr * wd * p`` happens before, and
    independently of, the bias-corrected Adam step.  Gradients are cleared
    and the step counter advanced.  Parameters without a gradient, frozen
    ones included, are left untouched.
    """
    if not (lr >= 0 and 0 <= beta1 < 1 and 0 <= beta2 < 1 and eps > 0 and weight_decay >= 0):
        raise ContractError(
            f"invalid AdamW hyper-parameters lr={lr} betas=({beta1}, {beta2}) eps={eps} wd={weight_decay}"
        )
    live = [(n, t) for n, t in store.params.items() if t.grad is not None and n not in store.frozen]
    if not live:
        raise ContractError("adamw_step called with no populated gradients")
    store.t += 1
    dt = store.dtype.type
    bc1 = dt(1.0 - beta1**store.t)
    bc2 = dt(1.0 - beta2**store.t)
    b1, b2, lr_, eps_ = dt(beta1), dt(beta2), dt(lr), dt(eps)
    for name, p in live:
        g = p.grad.astype(store.dtype, copy=False)
        m = store.m[name] = b1 * store.m[name] + (dt(1) - b1) * g
        v = store.v[name] = b2 * store.v[name] + (dt(1) - b2) * (g * g)
        data = p.data
        if weight_decay and name not in store.no_decay:
            data = data - lr_ * dt(weight_decay) * data
        p.data = data - lr_ * (m / bc1) / (np.sqrt(v / bc2) + eps_)
        p.grad = None
    store.zero_grad()
