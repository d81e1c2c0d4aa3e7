"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import ParamStore
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    n_checked: int

    @property
    def worst(self) -> str:
        return max(self.per_param, key=self.per_param.get)


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # Normalized per tensor: max |a - n| over the larger of the two max-norms.
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale < 1e-12:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(
    f: Callable[[], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from ``store`` on every call. Buffers mutated
    by ``f`` (batch-norm running statistics) are restored afterwards.
    """
    if store.dtype != np.float64:
        raise TypeError("grad_check requires a float64 ParamStore")
    names = store.trainable_names() if names is None else names
    snapshot = store.state_dict()

    store.zero_grad()
    f().backward()
    analytic = {n: store[n].grad.copy() for n in names}

    per_param: dict[str, float] = {}
    count = 0
    for name in names:
        p = store[name].data
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = f().item()
            flat[i] = orig - eps
            minus = f().item()
            flat[i] = orig
            nflat[i] = (plus - minus) / (2 * eps)
        per_param[name] = _rel_error(analytic[name], numeric)
        count += flat.size

    store.load_state_dict(snapshot)
    store.zero_grad()
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(worst, per_param, count)


def check_function(
    f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5
) -> float:
    """Gradient check for a function of a single input array."""
    store = ParamStore(np.float64)
    store.add("x", x)
    return grad_check(lambda: f(store["x"]), store, eps).max_rel_error
