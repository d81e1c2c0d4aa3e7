"""Plain stochastic gradient descent."""

from __future__ import annotations

from .nn import ParamStore


def sgd_step(store: ParamStore, lr: float) -> None:
    """p <- p - lr * grad for every trainable parameter; buffers and frozen
    parameters are left untouched."""
    for name in store.trainable_names():
        p = store[name]
        p.data -= (lr * p.grad).astype(p.data.dtype, copy=False)
