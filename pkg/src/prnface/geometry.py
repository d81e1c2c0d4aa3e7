"""Landmark-driven face alignment and image-to-feature-map projection.

Coordinates are continuous pixel coordinates: origin at the top-left image
corner, x to the right, y downward, and pixel ``(row, col)`` covering
``[col, col + 1) x [row, row + 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage


class GeometryError(ValueError):
    """Degenerate landmark geometry (coincident eyes, empty index sets...)."""


class AlignmentError(GeometryError):
    """The face cannot be aligned; callers discard the sample."""


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GeometryError(f"landmarks must have shape (N, 2), got {pts.shape}")
        if len(pts) < 3:
            raise GeometryError("at least 3 landmarks are required")
        if not np.isfinite(pts).all():
            raise GeometryError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * R(rotation) @ p + translation``."""

    rotation: float
    scale: float
    translation: tuple[float, float]

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not -math.pi < self.rotation <= math.pi:
            raise ValueError("rotation must lie in (-pi, pi]")

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        a = self.scale * np.array([[c, -s], [s, c]])
        return np.column_stack([a, np.asarray(self.translation)])

    def apply(self, points) -> np.ndarray:
        m = self.matrix
        return np.asarray(points, dtype=np.float64) @ m[:, :2].T + m[:, 2]

    def inverse_apply(self, points) -> np.ndarray:
        m = self.matrix
        return (np.asarray(points, dtype=np.float64) - m[:, 2]) @ np.linalg.inv(m[:, :2]).T


@dataclass(frozen=True)
class AlignedFace:
    pixels: np.ndarray

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class RoiCell:
    row: int
    col: int
    extent: int = 1


def _indices(idx: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(i) for i in idx)


@dataclass(frozen=True)
class AlignConfig:
    """Output geometry and the landmark index sets used as anchors.

    Defaults follow the common 68-point layout (eyes 36-47, mouth 48-67).
    """

    output_size: int = 140
    eye_row: float = 0.30
    mouth_from_bottom: float = 0.35
    left_eye: tuple[int, ...] = field(default=tuple(range(36, 42)))
    right_eye: tuple[int, ...] = field(default=tuple(range(42, 48)))
    mouth: tuple[int, ...] = field(default=tuple(range(48, 68)))

    def __post_init__(self):
        for name in ("left_eye", "right_eye", "mouth"):
            object.__setattr__(self, name, _indices(getattr(self, name)))
        if self.output_size < 1:
            raise ValueError("output_size must be positive")
        if not 0 <= self.eye_row < 1 - self.mouth_from_bottom <= 1:
            raise ValueError("eye row must lie above the mouth row")

    @property
    def eyes(self) -> tuple[int, ...]:
        return self.left_eye + self.right_eye

    @property
    def mouth_row(self) -> float:
        return (1.0 - self.mouth_from_bottom) * self.output_size


def _check_index_set(idx: Sequence[int], n: int, what: str) -> np.ndarray:
    arr = np.asarray(idx, dtype=int)
    if arr.size == 0:
        raise GeometryError(f"{what} index set is empty")
    if arr.min() < 0 or arr.max() >= n:
        raise GeometryError(f"{what} index set out of range for {n} landmarks")
    return arr


def anchor_points(landmarks: LandmarkSet, eye_indices, mouth_indices):
    """Return (face_center, eye_center, mouth_center).

    The face center is the midpoint of the leftmost and rightmost landmarks
    (ties on x go to the lowest index); eye and mouth centers are means.
    """
    pts = landmarks.points
    eyes = _check_index_set(eye_indices, len(pts), "eye")
    mouth = _check_index_set(mouth_indices, len(pts), "mouth")
    left = pts[np.argmin(pts[:, 0])]
    right = pts[np.argmax(pts[:, 0])]
    return (left + right) / 2, pts[eyes].mean(axis=0), pts[mouth].mean(axis=0)


def upright_rotation(eye_left, eye_right) -> float:
    """Rotation angle (radians, in (-pi, pi]) that makes the eye line horizontal
    with the left eye on the left."""
    d = np.asarray(eye_right, dtype=np.float64) - np.asarray(eye_left, dtype=np.float64)
    if not np.any(d):
        raise GeometryError("eye points coincide")
    angle = -math.atan2(d[1], d[0])
    if angle <= -math.pi:
        angle += 2 * math.pi
    return angle


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return points @ np.array([[c, -s], [s, c]]).T


def alignment_transform(landmarks: LandmarkSet, cfg: AlignConfig) -> SimilarityTransform:
    pts = landmarks.points
    left = pts[_check_index_set(cfg.left_eye, len(pts), "left eye")].mean(axis=0)
    right = pts[_check_index_set(cfg.right_eye, len(pts), "right eye")].mean(axis=0)
    angle = upright_rotation(left, right)
    rotated = LandmarkSet(_rotate(pts, angle))
    face_c, eye_c, mouth_c = anchor_points(rotated, cfg.eyes, cfg.mouth)
    span = mouth_c[1] - eye_c[1]
    size = cfg.output_size
    target_span = cfg.mouth_row - cfg.eye_row * size
    if not span > 1e-9:
        raise AlignmentError("mouth center is not below the eye center after rotation")
    scale = target_span / span
    tx = size / 2 - scale * face_c[0]
    ty = cfg.eye_row * size - scale * eye_c[1]
    return SimilarityTransform(angle, scale, (tx, ty))


def warp_image(image: np.ndarray, transform: SimilarityTransform, size: int) -> np.ndarray:
    """Resample ``image`` (H, W, C) onto a ``size`` x ``size`` grid through the
    inverse of ``transform``; bilinear, zero outside the source."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    centers = np.arange(size) + 0.5
    xs, ys = np.meshgrid(centers, centers)
    src = transform.inverse_apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    rows = src[:, 1] - 0.5
    cols = src[:, 0] - 0.5
    h, w = img.shape[:2]
    inside = (rows > -1) & (rows < h) & (cols > -1) & (cols < w)
    if not inside.any():
        raise AlignmentError("aligned crop does not overlap the source image")
    out = np.empty((size * size, img.shape[2]))
    coords = np.stack([rows, cols])
    for ch in range(img.shape[2]):
        out[:, ch] = ndimage.map_coordinates(img[..., ch], coords, order=1, mode="grid-constant", cval=0.0)
    return out.reshape(size, size, img.shape[2])


def align_face(image: np.ndarray, landmarks: LandmarkSet, cfg: AlignConfig = AlignConfig()):
    """Rotate the eyes level, center on x, pin the eye and mouth rows, resize,
    and normalize pixels to [0, 1].

    Returns ``(AlignedFace, aligned LandmarkSet, SimilarityTransform)``.
    """
    transform = alignment_transform(landmarks, cfg)
    pixels = warp_image(image, transform, cfg.output_size) / 255.0
    np.clip(pixels, 0.0, 1.0, out=pixels)
    aligned = LandmarkSet(transform.apply(landmarks.points))
    return AlignedFace(pixels), aligned, transform


def roi_project(landmark, image_side: float, map_side: int, m: float) -> RoiCell:
    """Feature-map cell containing ``landmark`` and the projected region side."""
    if map_side < 1:
        raise ValueError("map_side must be >= 1")
    x, y = float(landmark[0]), float(landmark[1])
    ratio = map_side / image_side
    col = min(max(math.floor(x * ratio), 0), map_side - 1)
    row = min(max(math.floor(y * ratio), 0), map_side - 1)
    extent = min(max(1, round(m * ratio)), map_side)
    return RoiCell(row, col, extent)


def read_landmarks(path, n_points: int | None = None) -> LandmarkSet:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'x y'")
        rows.append((float(parts[0]), float(parts[1])))
    if n_points is not None and len(rows) != n_points:
        raise ValueError(f"{path}: expected {n_points} landmarks, found {len(rows)}")
    return LandmarkSet(np.array(rows))


def write_landmarks(path, landmarks: LandmarkSet) -> None:
    lines = [f"{x!r} {y!r}" for x, y in landmarks.points.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")
