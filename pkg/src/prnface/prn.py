"""Pairwise relational network over landmark patches.

Every unordered pair of patches goes through one shared relation MLP
(``g_theta``). The relations are summed in canonical pair order and the sum
is mapped by a second MLP (``f_phi``) to the relational descriptor. The
conditioned variant appends an identity-state vector, produced by a stacked
LSTM over the landmark-ordered patch sequence (``e_psi``), to every pair
input.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from .numerics import nn
from .numerics import tensor as T
from .numerics.nn import LstmState, MlpSpec, ParamStore
from .numerics.tensor import Tensor

G_THETA = "g_theta"
F_PHI = "f_phi"
E_PSI = "e_psi"
COMBINER = "combiner"

VARIANTS = ("model_a", "model_b", "model_c", "prn", "prn_plus")


@dataclass(frozen=True)
class PrnConfig:
    g_theta: MlpSpec = field(default_factory=lambda: MlpSpec.uniform((64, 64, 64)))
    f_phi: MlpSpec = field(default_factory=lambda: MlpSpec.uniform((64, 64, 32), linear_last=True))
    lstm_widths: tuple[int, ...] = (32, 32)
    sid_width: int = 16
    combiner_width: int = 64

    @classmethod
    def full_scale(cls) -> "PrnConfig":
        return cls(
            g_theta=MlpSpec.uniform((1000, 1000, 1000)),
            f_phi=MlpSpec.uniform((1000, 1000, 1000), linear_last=True),
            lstm_widths=(2048, 2048),
            sid_width=256,
            combiner_width=1024,
        )


@dataclass(frozen=True)
class PairSet:
    """All pairs (i, j), i < j, in lexicographic order."""

    pairs: np.ndarray

    @property
    def first(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def second(self) -> np.ndarray:
        return self.pairs[:, 1]

    def __len__(self) -> int:
        return len(self.pairs)


def enumerate_pairs(n: int) -> PairSet:
    if n < 2:
        raise ValueError("at least two patches are needed to form a pair")
    pairs = np.array(list(itertools.combinations(range(n), 2)), dtype=np.int64)
    return PairSet(pairs)


@dataclass
class RelationBundle:
    relations: Tensor  # (B, P, H)
    aggregate: Tensor  # (B, H)
    output: Tensor  # (B, D)
    pairs: PairSet


@dataclass
class Embedding:
    vector: Tensor
    tag: str


# -- parameters -----------------------------------------------------------------


def build_prn(store: ParamStore, cfg: PrnConfig, patch_width: int, conditioned: bool) -> None:
    in_width = 2 * patch_width + (cfg.sid_width if conditioned else 0)
    nn.add_mlp(store, G_THETA, in_width, cfg.g_theta)
    nn.add_mlp(store, F_PHI, cfg.g_theta.out_width, cfg.f_phi)


def build_prn_head(store: ParamStore, cfg: PrnConfig, n_classes: int) -> None:
    nn.add_linear(store, f"{F_PHI}.head", cfg.f_phi.out_width, n_classes)


def build_identity_encoder(store: ParamStore, cfg: PrnConfig, patch_width: int, n_classes: int) -> None:
    nn.add_lstm(store, f"{E_PSI}.lstm", patch_width, cfg.lstm_widths)
    nn.add_mlp(store, f"{E_PSI}.fc1", cfg.lstm_widths[-1], _sid_spec(cfg))
    nn.add_linear(store, f"{E_PSI}.head", cfg.sid_width, n_classes)


def build_combiner(store: ParamStore, cfg: PrnConfig, global_width: int, n_classes: int) -> None:
    width = global_width + cfg.f_phi.out_width
    nn.add_linear(store, f"{COMBINER}.fc", width, cfg.combiner_width)
    nn.add_linear(store, f"{COMBINER}.head", cfg.combiner_width, n_classes)


def _sid_spec(cfg: PrnConfig) -> MlpSpec:
    return MlpSpec((cfg.sid_width,), (True,), (True,))


def is_conditioned(store: ParamStore, patch_width: int) -> bool:
    return nn.mlp_in_width(store, G_THETA) > 2 * patch_width


# -- forward ----------------------------------------------------------------------


def _as_vectors(patches) -> Tensor:
    if isinstance(patches, bb.LocalPatchSet):
        patches = patches.vectors
    if not isinstance(patches, Tensor):
        patches = Tensor(np.asarray(patches))
    if patches.ndim == 2:
        patches = patches.reshape(1, *patches.shape)
    return patches


def relate(patch_i, patch_j, s_id, store: ParamStore, cfg: PrnConfig, mode: str) -> Tensor:
    """Relation vectors for patch pairs sharing a leading batch shape."""
    parts = [patch_i, patch_j] + ([s_id] if s_id is not None else [])
    return nn.mlp_forward(cfg.g_theta, store, G_THETA, T.concat(parts, axis=-1), mode)


def aggregate(relations, pairs: np.ndarray | None = None) -> Tensor:
    """Sum relations over the pair axis in canonical pair order.

    ``relations`` is a list of vectors or a (P, H) / (B, P, H) tensor. When
    ``pairs`` is given, relations are first sorted into (i, j) order.
    """
    if isinstance(relations, (list, tuple)):
        if not relations:
            raise ValueError("cannot aggregate an empty relation list")
        relations = T.stack([r if isinstance(r, Tensor) else Tensor(r) for r in relations])
    axis = relations.ndim - 2
    if relations.shape[axis] == 0:
        raise ValueError("cannot aggregate an empty relation list")
    if pairs is not None:
        order = np.lexsort((np.asarray(pairs)[:, 1], np.asarray(pairs)[:, 0]))
        relations = relations[(slice(None),) * axis + (order,)]
    return relations.sum(axis=axis)


def prn_forward(patches, store: ParamStore, cfg: PrnConfig, mode: str, s_id: Tensor | None = None):
    """F_phi(sum over pairs of G_theta(pair [, s_id])) -> (RelationBundle, Embedding)."""
    x = _as_vectors(patches)
    bsz, n, _ = x.shape
    pairs = enumerate_pairs(n)
    left = x[:, pairs.first]
    right = x[:, pairs.second]
    cond = None
    if s_id is not None:
        cond = T.broadcast_to(s_id.reshape(bsz, 1, s_id.shape[-1]), (bsz, len(pairs), s_id.shape[-1]))
    relations = relate(left, right, cond, store, cfg, mode)
    f_agg = aggregate(relations)
    out = nn.mlp_forward(cfg.f_phi, store, F_PHI, f_agg, mode)
    tag = "prn" if s_id is None else "prn_plus"
    return RelationBundle(relations, f_agg, out, pairs), Embedding(out, tag)


def identity_state(patches, store: ParamStore, cfg: PrnConfig, mode: str) -> Tensor:
    """Final top-layer LSTM hidden state over the N-step patch sequence,
    through the first FC layer."""
    x = _as_vectors(patches)
    bsz, n, _ = x.shape
    if n == 0:
        raise ValueError("empty patch sequence")
    widths = nn.lstm_widths(store, f"{E_PSI}.lstm")
    state = LstmState.zeros(bsz, widths, x.dtype)
    for t in range(n):
        state = nn.lstm_step(store, f"{E_PSI}.lstm", x[:, t], state)
    return nn.mlp_forward(_sid_spec(cfg), store, f"{E_PSI}.fc1", state.h[-1], mode)


def identity_logits(store: ParamStore, s_id: Tensor) -> Tensor:
    return nn.linear(store, f"{E_PSI}.head", s_id)


def prn_plus_forward(patches, store: ParamStore, cfg: PrnConfig, mode: str, s_id: Tensor | None = None):
    x = _as_vectors(patches)
    if s_id is None:
        s_id = identity_state(x, store, cfg, mode)
    return prn_forward(x, store, cfg, mode, s_id=s_id)


def prn_logits(store: ParamStore, embedding: Tensor) -> Tensor:
    return nn.linear(store, f"{F_PHI}.head", embedding)


def combine(store: ParamStore, global_feature: Tensor, relational: Tensor) -> Tensor:
    return nn.linear(store, f"{COMBINER}.fc", T.concat([global_feature, relational], axis=-1))


def combiner_logits(store: ParamStore, embedding: Tensor) -> Tensor:
    return nn.linear(store, f"{COMBINER}.head", embedding)


def required_namespaces(variant: str) -> tuple[str, ...]:
    need = {
        "model_a": (bb.PREFIX,),
        "prn": (bb.PREFIX, G_THETA, F_PHI),
        "prn_plus": (bb.PREFIX, G_THETA, F_PHI, E_PSI),
        "model_b": (bb.PREFIX, G_THETA, F_PHI, COMBINER),
        "model_c": (bb.PREFIX, G_THETA, F_PHI, E_PSI, COMBINER),
    }
    if variant not in need:
        raise ValueError(f"unknown variant {variant!r}")
    return need[variant]


def embed_from_features(
    variant: str,
    global_feature: Tensor,
    patches,
    store: ParamStore,
    cfg: PrnConfig,
    mode: str,
) -> Embedding:
    """Embedding for ``variant`` given backbone outputs."""
    for ns in required_namespaces(variant):
        if not store.has_namespace(ns + "."):
            raise KeyError(f"variant {variant} needs parameters under {ns}.*")
    if variant == "model_a":
        return Embedding(global_feature, variant)
    if variant in ("prn", "model_b"):
        _, emb = prn_forward(patches, store, cfg, mode)
    else:
        _, emb = prn_plus_forward(patches, store, cfg, mode)
    if variant in ("prn", "prn_plus"):
        return emb
    return Embedding(combine(store, global_feature, emb.vector), variant)


def combined_forward(
    faces,
    landmarks,
    variant: str,
    store: ParamStore,
    bcfg: bb.BackboneConfig,
    cfg: PrnConfig,
    mode: str,
    m: float,
) -> Embedding:
    """Aligned faces (B, H, W, 3) and aligned landmarks (B, N, 2) -> embedding."""
    maps, fg = bb.backbone_forward(faces, store, bcfg, mode)
    patches = bb.extract_patches(maps, landmarks, bcfg.input_side, m)
    return embed_from_features(variant, fg, patches, store, cfg, mode)
