"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .optim import ParameterStore
from .tensor import backward


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)
    checked_entries: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def lines(self):
        for name, err in self.max_rel_error.items():
            flag = "ok" if err < self.tolerance else "FAIL"
            yield f"{flag:4s} {name:40s} n={self.checked_entries[name]:6d} max_rel_err={err:.3e}"


def relative_error(analytic, numeric, floor=1e-5):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries meaningful."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(
    closure,
    store: ParameterStore,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare backprop gradients with central differences, per parameter.

    ``closure`` takes no arguments and returns the scalar loss computed from
    the tensors in ``store``.  The store is switched to float64 in place
    first.  With ``max_entries`` only that many randomly chosen entries of
    each parameter are perturbed.
    """
    if store.dtype != np.float64:
        store.astype(np.float64)
    store.zero_grad()

    first = closure().item()
    second = closure().item()
    if first != second:
        raise ContractError(
            f"closure is not deterministic ({first!r} != {second!r}); disable dropout and fix the data"
        )

    store.zero_grad()
    backward(closure())
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in store.items()}
    store.zero_grad()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, tensor in store.items():
        if name in store.frozen:
            continue
        flat = tensor.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = closure().item()
            flat[i] = orig - h
            down = closure().item()
            flat[i] = orig
            numeric[k] = (up - down) / (2 * h)
        err = relative_error(analytic[name].reshape(-1)[idx], numeric, floor)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.checked_entries[name] = len(idx)
    store.zero_grad()
    return report
