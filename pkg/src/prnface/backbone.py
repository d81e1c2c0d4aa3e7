"""Residual-bottleneck CNN producing the final feature maps, the globally
averaged appearance feature, and landmark patches gathered from the maps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import roi_project
from .numerics import nn
from .numerics import tensor as T
from .numerics.nn import ParamStore
from .numerics.tensor import Tensor

PREFIX = "backbone"


@dataclass(frozen=True)
class BackboneConfig:
    """Stem conv (stride 1, same padding) -> 3x3/2 max pool -> bottleneck stages.

    ``stage_widths`` are stage output channels; each block's inner width is
    ``width // bottleneck_divisor``. The stride of a stage is applied by the
    3x3 conv of its first block.
    """

    input_side: int = 64
    stem_channels: int = 16
    stem_kernel: int = 5
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1)
    strides: tuple[int, ...] = (1, 2, 2)
    bottleneck_divisor: int = 2

    def __post_init__(self):
        n = len(self.stage_widths)
        if not (len(self.blocks) == len(self.strides) == n):
            raise ValueError("stage_widths, blocks and strides must have equal length")
        if min(self.stage_widths + (self.stem_channels,)) < 1 or min(self.strides) < 1:
            raise ValueError("channel widths and strides must be >= 1")

    @classmethod
    def full_scale(cls) -> "BackboneConfig":
        return cls(
            input_side=140,
            stem_channels=64,
            stem_kernel=5,
            stage_widths=(256, 512, 1024, 2048),
            blocks=(3, 4, 23, 3),
            strides=(1, 2, 2, 2),
            bottleneck_divisor=4,
        )

    @property
    def channels(self) -> int:
        return self.stage_widths[-1]

    @property
    def output_sides(self) -> list[int]:
        """Spatial side after conv1, after the pool, and after each stage."""
        side = self.input_side
        sides = [side]
        side = math.ceil(side / 2)
        sides.append(side)
        for stride in self.strides:
            side = math.ceil(side / stride)
            sides.append(side)
        return sides

    @property
    def map_side(self) -> int:
        return self.output_sides[-1]


def _conv_bn(store: ParamStore, prefix: str, k: int, cin: int, cout: int) -> None:
    store.glorot(f"{prefix}.w", (k, k, cin, cout), k * k * cin, k * k * cout)
    nn.add_batch_norm(store, f"{prefix}.bn", cout)


def build(store: ParamStore, cfg: BackboneConfig, n_classes: int | None = None) -> None:
    """Register backbone parameters, plus a softmax head if ``n_classes``."""
    p = PREFIX
    _conv_bn(store, f"{p}.conv1", cfg.stem_kernel, 3, cfg.stem_channels)
    cin = cfg.stem_channels
    for s, (width, nblocks, stride) in enumerate(zip(cfg.stage_widths, cfg.blocks, cfg.strides)):
        mid = max(1, width // cfg.bottleneck_divisor)
        for b in range(nblocks):
            q = f"{p}.stage{s}.block{b}"
            _conv_bn(store, f"{q}.a", 1, cin, mid)
            _conv_bn(store, f"{q}.b", 3, mid, mid)
            _conv_bn(store, f"{q}.c", 1, mid, width)
            if cin != width or (b == 0 and stride != 1):
                _conv_bn(store, f"{q}.proj", 1, cin, width)
            cin = width
    if n_classes is not None:
        nn.add_linear(store, f"{p}.head", cfg.channels, n_classes)


def _apply_conv_bn(store, prefix, x, mode, stride=1, relu=True):
    w = store[f"{prefix}.w"]
    k = w.shape[0]
    h = T.conv2d(x, w, stride=stride, padding=k // 2)
    h = nn.batch_norm(store, f"{prefix}.bn", h, mode)
    return T.relu(h) if relu else h


def backbone_forward(pixels, store: ParamStore, cfg: BackboneConfig, mode: str):
    """Faces (B, H, W, 3) -> (feature maps (B, S, S, C), global feature (B, C))."""
    x = pixels if isinstance(pixels, Tensor) else Tensor(np.asarray(pixels, dtype=store.dtype))
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.shape[1:] != (cfg.input_side, cfg.input_side, 3):
        raise ValueError(f"expected faces of side {cfg.input_side}, got {x.shape[1:]}")
    p = PREFIX
    h = _apply_conv_bn(store, f"{p}.conv1", x, mode)
    h = T.max_pool2d(h, 3, 2, 1)
    for s, (nblocks, stride) in enumerate(zip(cfg.blocks, cfg.strides)):
        for b in range(nblocks):
            q = f"{p}.stage{s}.block{b}"
            st = stride if b == 0 else 1
            y = _apply_conv_bn(store, f"{q}.a", h, mode)
            y = _apply_conv_bn(store, f"{q}.b", y, mode, stride=st)
            y = _apply_conv_bn(store, f"{q}.c", y, mode, relu=False)
            if f"{q}.proj.w" in store:
                short = _apply_conv_bn(store, f"{q}.proj", h, mode, stride=st, relu=False)
            else:
                short = h
            h = T.relu(y + short)
    return h, global_average_pool(h)


def global_average_pool(maps: Tensor) -> Tensor:
    """Channel-wise spatial mean of (B, S, S, C) maps."""
    return maps.mean(axis=(1, 2))


def classify(store: ParamStore, fg: Tensor) -> Tensor:
    return nn.linear(store, f"{PREFIX}.head", fg)


@dataclass
class LocalPatchSet:
    """Per-landmark patch vectors (B, N, C * extent**2) and their source cells."""

    vectors: Tensor
    cells: np.ndarray
    extent: int

    @property
    def n_patches(self) -> int:
        return self.vectors.shape[1]


def project_landmarks(landmarks, image_side: float, map_side: int, m: float) -> tuple[np.ndarray, int]:
    """Cells (B, N, 2) as (row, col) for landmarks (B, N, 2) given as (x, y)."""
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.ndim == 2:
        lm = lm[None]
    cells = np.zeros(lm.shape[:2] + (2,), dtype=np.int64)
    extent = 1
    for b in range(lm.shape[0]):
        for i in range(lm.shape[1]):
            cell = roi_project(lm[b, i], image_side, map_side, m)
            cells[b, i] = (cell.row, cell.col)
            extent = cell.extent
    return cells, extent


def extract_patches(maps: Tensor, landmarks, image_side: float, m: float) -> LocalPatchSet:
    """Gather the extent x extent x C block around each projected landmark,
    flattened in (row, col, channel) order. Blocks are shifted to stay inside
    the map."""
    bsz, side, _, c = maps.shape
    cells, extent = project_landmarks(landmarks, image_side, side, m)
    if cells.shape[0] != bsz:
        raise ValueError("one landmark set per feature map is required")
    n = cells.shape[1]
    offset = (extent - 1) // 2
    top = np.clip(cells[..., 0] - offset, 0, side - extent)
    left = np.clip(cells[..., 1] - offset, 0, side - extent)
    span = np.arange(extent)
    rows = top[:, :, None, None] + span[None, None, :, None]
    cols = left[:, :, None, None] + span[None, None, None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    bidx = np.broadcast_to(np.arange(bsz)[:, None, None, None], rows.shape)
    block = maps[bidx, rows, cols]
    return LocalPatchSet(block.reshape(bsz, n, extent * extent * c), cells, extent)
