"""Parameter storage and the layers built on :mod:`prnface.numerics.tensor`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.99

TRAIN = "train"
EVAL = "eval"


def _is_train(mode: str) -> bool:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == TRAIN


class ParamStore:
    """Named parameters with paired gradient buffers and trainable flags.

    Buffers (batch-norm running statistics) live in the same namespace so a
    checkpoint captures the full model state, but they are never trainable.
    Insertion order is preserved and defines iteration order.
    """

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._tensors: dict[str, Tensor] = {}
        self._buffers: set[str] = set()

    # -- creation ------------------------------------------------------------

    def add(self, name: str, value, trainable: bool = True, buffer: bool = False) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        t = Tensor(arr, requires_grad=trainable and not buffer)
        if not t.requires_grad:
            t.grad = np.zeros_like(arr)
        self._tensors[name] = t
        if buffer:
            self._buffers.add(name)
        return t

    def glorot(self, name: str, shape: Sequence[int], fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-limit, limit, size=tuple(shape)))

    def zeros(self, name: str, shape, **kw) -> Tensor:
        return self.add(name, np.zeros(shape), **kw)

    def ones(self, name: str, shape, **kw) -> Tensor:
        return self.add(name, np.ones(shape), **kw)

    # -- access --------------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def has_namespace(self, prefix: str) -> bool:
        return any(n.startswith(prefix) for n in self._tensors)

    def is_buffer(self, name: str) -> bool:
        return name in self._buffers

    def trainable_names(self, prefix: str = "") -> list[str]:
        return [n for n in self.names(prefix) if self._tensors[n].requires_grad]

    # -- training state --------------------------------------------------------

    def set_trainable(self, prefix: str, trainable: bool) -> None:
        for name in self.names(prefix):
            if name in self._buffers:
                continue
            self._tensors[name].requires_grad = trainable

    def freeze(self, prefix: str = "") -> None:
        self.set_trainable(prefix, False)

    def unfreeze(self, prefix: str = "") -> None:
        self.set_trainable(prefix, True)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad[...] = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [n for n in self._tensors if n not in state]
        unknown = [n for n in state if n not in self._tensors]
        if strict and (missing or unknown):
            raise KeyError(f"state mismatch: missing={missing[:5]} unknown={unknown[:5]}")
        for name, value in state.items():
            if name not in self._tensors:
                continue
            t = self._tensors[name]
            if t.data.shape != tuple(value.shape):
                raise ValueError(f"shape mismatch for {name}: {t.data.shape} vs {value.shape}")
            t.data[...] = value


# -- layers ----------------------------------------------------------------------


def batch_norm(store: ParamStore, prefix: str, x: Tensor, mode: str) -> Tensor:
    return T.batch_norm(
        x,
        store[f"{prefix}.gamma"],
        store[f"{prefix}.beta"],
        store[f"{prefix}.running_mean"].data,
        store[f"{prefix}.running_var"].data,
        train=_is_train(mode),
        momentum=BN_MOMENTUM,
        eps=BN_EPS,
    )


def add_batch_norm(store: ParamStore, prefix: str, width: int) -> None:
    store.ones(f"{prefix}.gamma", (width,))
    store.zeros(f"{prefix}.beta", (width,))
    store.zeros(f"{prefix}.running_mean", (width,), buffer=True)
    store.ones(f"{prefix}.running_var", (width,), buffer=True)


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus per-layer batch-norm / ReLU flags.

    A layer followed by batch norm carries no bias (the norm's shift
    replaces it).
    """

    widths: tuple[int, ...]
    batch_norm: tuple[bool, ...] = ()
    relu: tuple[bool, ...] = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if not widths or min(widths) < 1:
            raise ValueError("MlpSpec needs at least one layer and widths >= 1")
        n = len(widths)
        bn = tuple(self.batch_norm) or (True,) * n
        act = tuple(self.relu) or (True,) * n
        if len(bn) != n or len(act) != n:
            raise ValueError("per-layer flags must match the number of layers")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "batch_norm", tuple(bool(b) for b in bn))
        object.__setattr__(self, "relu", tuple(bool(a) for a in act))

    @classmethod
    def uniform(cls, widths, linear_last: bool = False) -> "MlpSpec":
        n = len(widths)
        flags = tuple(not (linear_last and i == n - 1) for i in range(n))
        return cls(tuple(widths), flags, flags)

    @property
    def out_width(self) -> int:
        return self.widths[-1]


def add_mlp(store: ParamStore, prefix: str, in_width: int, spec: MlpSpec) -> None:
    prev = in_width
    for k, width in enumerate(spec.widths):
        store.glorot(f"{prefix}.{k}.w", (prev, width), prev, width)
        if spec.batch_norm[k]:
            add_batch_norm(store, f"{prefix}.{k}.bn", width)
        else:
            store.zeros(f"{prefix}.{k}.b", (width,))
        prev = width


def mlp_in_width(store: ParamStore, prefix: str) -> int:
    return store[f"{prefix}.0.w"].shape[0]


def mlp_forward(spec: MlpSpec, store: ParamStore, prefix: str, x: Tensor, mode: str) -> Tensor:
    """affine -> (BN) -> (ReLU) per layer over the last axis of ``x``."""
    expected = mlp_in_width(store, prefix)
    if x.shape[-1] != expected:
        raise ValueError(f"{prefix}: input width {x.shape[-1]} != {expected}")
    lead = x.shape[:-1]
    h = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
    for k in range(len(spec.widths)):
        h = h @ store[f"{prefix}.{k}.w"]
        if spec.batch_norm[k]:
            h = batch_norm(store, f"{prefix}.{k}.bn", h, mode)
        else:
            h = h + store[f"{prefix}.{k}.b"]
        if spec.relu[k]:
            h = T.relu(h)
    if x.ndim != 2:
        h = h.reshape(*lead, spec.out_width)
    return h


# -- LSTM --------------------------------------------------------------------------


@dataclass
class LstmState:
    """Per-layer hidden and cell vectors, each of shape (batch, width)."""

    h: list[Tensor] = field(default_factory=list)
    c: list[Tensor] = field(default_factory=list)

    @classmethod
    def zeros(cls, batch: int, widths: Sequence[int], dtype) -> "LstmState":
        return cls(
            [Tensor(np.zeros((batch, w), dtype=dtype)) for w in widths],
            [Tensor(np.zeros((batch, w), dtype=dtype)) for w in widths],
        )


def add_lstm(store: ParamStore, prefix: str, in_width: int, widths: Sequence[int]) -> None:
    prev = in_width
    for k, width in enumerate(widths):
        store.glorot(f"{prefix}.{k}.w", (prev + width, 4 * width), prev + width, 4 * width)
        store.zeros(f"{prefix}.{k}.b", (4 * width,))
        prev = width


def lstm_widths(store: ParamStore, prefix: str) -> list[int]:
    widths = []
    k = 0
    while f"{prefix}.{k}.w" in store:
        widths.append(store[f"{prefix}.{k}.b"].shape[0] // 4)
        k += 1
    return widths


def lstm_step(store: ParamStore, prefix: str, x_t: Tensor, state: LstmState) -> LstmState:
    """One time step through every stacked layer.

    Gate layout in the fused weight is (input, forget, candidate, output).
    """
    inp = x_t
    new = LstmState()
    for k, (h, c) in enumerate(zip(state.h, state.c)):
        w = store[f"{prefix}.{k}.w"]
        width = h.shape[-1]
        if inp.shape[-1] + width != w.shape[0]:
            raise ValueError(f"{prefix}.{k}: input width {inp.shape[-1]} does not match layer")
        z = T.concat([inp, h], axis=-1) @ w + store[f"{prefix}.{k}.b"]
        i = T.sigmoid(z[:, :width])
        f = T.sigmoid(z[:, width : 2 * width])
        g = T.tanh(z[:, 2 * width : 3 * width])
        o = T.sigmoid(z[:, 3 * width :])
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        new.h.append(h_new)
        new.c.append(c_new)
        inp = h_new
    return new


# -- losses ------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label]; a 1-D ``logits`` takes a scalar label."""
    labels = np.asarray(labels)
    single = logits.ndim == 1
    if single:
        logits = logits.reshape(1, -1)
        labels = labels.reshape(1)
    k = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ValueError("one label per row of logits is required")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for {k} classes")
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


def linear(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return x @ store[f"{prefix}.w"] + store[f"{prefix}.b"]


def add_linear(store: ParamStore, prefix: str, in_width: int, out_width: int) -> None:
    store.glorot(f"{prefix}.w", (in_width, out_width), in_width, out_width)
    store.zeros(f"{prefix}.b", (out_width,))
