"""Procedural landmark-annotated identities and dataset plumbing.

Each synthetic identity is a 15-part face layout (contour, brows, eyes,
nose, mouth) with its own part offsets and colours. A sample renders the
layout as soft Gaussian blobs on a soft-edged skin ellipse under a random
in-plane rotation, translation, illumination gain and pixel noise. Every
landmark is the exact centre of its blob.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import AlignConfig, LandmarkSet, read_landmarks, write_landmarks


class DatasetError(ValueError):
    pass


# Canonical layout in face half-width units, y down.
TEMPLATE = np.array(
    [
        (-1.00, 0.00),  # 0 left contour
        (1.00, 0.00),  # 1 right contour
        (0.00, 1.10),  # 2 chin
        (0.00, -0.90),  # 3 forehead
        (-0.55, -0.30),  # 4 left eye outer
        (-0.25, -0.30),  # 5 left eye inner
        (0.25, -0.30),  # 6 right eye inner
        (0.55, -0.30),  # 7 right eye outer
        (-0.40, -0.55),  # 8 left brow
        (0.40, -0.55),  # 9 right brow
        (0.00, -0.12),  # 10 nose bridge
        (0.00, 0.20),  # 11 nose tip
        (-0.30, 0.55),  # 12 mouth left
        (0.30, 0.55),  # 13 mouth right
        (0.00, 0.62),  # 14 mouth centre
    ]
)
LEFT_EYE = (4, 5)
RIGHT_EYE = (6, 7)
MOUTH = (12, 13, 14)


def synthetic_align_config(output_size: int = 64) -> AlignConfig:
    return AlignConfig(output_size=output_size, left_eye=LEFT_EYE, right_eye=RIGHT_EYE, mouth=MOUTH)


@dataclass(frozen=True)
class SynthConfig:
    image_side: int = 80
    face_half_width: float = 22.0
    part_sigma: float = 2.2
    geometry_jitter: float = 0.10  # identity offsets, half-width units
    min_latent_distance: float = 0.8
    rotation_deg: float = 30.0
    translation_px: float = 4.0
    gain_range: tuple[float, float] = (0.9, 1.1)
    noise_std: float = 3.0  # in 0..255 units
    sample_jitter: float = 0.0  # per-sample landmark offsets, half-width units
    color_jitter: float = 0.0  # per-sample part colour offsets, 0..255 units
    background: float = 20.0

    def __post_init__(self):
        if self.part_sigma <= 0 or self.face_half_width <= 0 or self.image_side < 8:
            raise DatasetError("degenerate synthetic config (zero-size parts or image)")

    @classmethod
    def preset(cls, name: str) -> "SynthConfig":
        if name == "easy":
            return cls()
        if name == "medium":
            return cls(
                geometry_jitter=0.07,
                min_latent_distance=0.5,
                noise_std=10.0,
                gain_range=(0.75, 1.25),
                sample_jitter=0.04,
                color_jitter=25.0,
            )
        if name == "static":
            return cls(rotation_deg=0.0, translation_px=0.0, gain_range=(1.0, 1.0), noise_std=0.0)
        raise DatasetError(f"unknown synthetic preset {name!r}")


@dataclass(frozen=True)
class SyntheticIdentity:
    identity: int
    geometry: np.ndarray  # (N, 2) layout, half-width units
    appearance: np.ndarray  # (N + 1, 3) part colours then skin, 0..255

    def latent(self) -> np.ndarray:
        return np.concatenate([self.geometry.ravel(), self.appearance.ravel() / 255.0])


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    landmarks: LandmarkSet
    identity: int
    perturbation: dict = field(default_factory=dict)
    path: str | None = None


@dataclass
class Dataset:
    samples: list[Sample]
    identities: list[int]

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], list(self.identities))


def _sample_identities(n: int, cfg: SynthConfig, rng: np.random.Generator) -> list[SyntheticIdentity]:
    out: list[SyntheticIdentity] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise DatasetError("cannot satisfy the minimum latent distance; lower it")
        geom = TEMPLATE + rng.normal(0.0, cfg.geometry_jitter, TEMPLATE.shape)
        colors = rng.uniform(40.0, 235.0, (len(TEMPLATE), 3))
        skin = rng.uniform(70.0, 200.0, (1, 3))
        cand = SyntheticIdentity(len(out), geom, np.vstack([colors, skin]))
        lat = cand.latent()
        if all(np.linalg.norm(lat - o.latent()) >= cfg.min_latent_distance for o in out):
            out.append(cand)
    return out


def render(
    identity: SyntheticIdentity,
    cfg: SynthConfig,
    rotation: float = 0.0,
    translation=(0.0, 0.0),
    gain: float = 1.0,
    noise: np.ndarray | None = None,
    geometry: np.ndarray | None = None,
    colors: np.ndarray | None = None,
) -> tuple[np.ndarray, LandmarkSet]:
    """Rasterize one face; returns (uint8 image, landmarks at blob centres)."""
    side = cfg.image_side
    geom = identity.geometry if geometry is None else geometry
    parts = identity.appearance[:-1] if colors is None else colors
    skin = identity.appearance[-1]
    c, s = math.cos(rotation), math.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    center = np.array([side / 2 + translation[0], side / 2 + translation[1]])
    pts = center + (geom * cfg.face_half_width) @ rot.T

    grid = np.arange(side) + 0.5
    xs, ys = np.meshgrid(grid, grid)
    img = np.full((side, side, 3), cfg.background)

    # Skin ellipse in the face frame, soft edge about one pixel wide.
    dx, dy = xs - center[0], ys - center[1]
    u = (c * dx + s * dy) / (1.15 * cfg.face_half_width)
    v = (-s * dx + c * dy - 0.1 * cfg.face_half_width) / (1.35 * cfg.face_half_width)
    radius = np.sqrt(u * u + v * v)
    edge = 1.0 / (1.0 + np.exp((radius - 1.0) * cfg.face_half_width / 1.5))
    img = img * (1 - edge[..., None]) + skin * edge[..., None]

    inv = 1.0 / (2 * cfg.part_sigma**2)
    for (px, py), color in zip(pts, parts):
        alpha = 0.9 * np.exp(-((xs - px) ** 2 + (ys - py) ** 2) * inv)
        img = img * (1 - alpha[..., None]) + color * alpha[..., None]

    img = img * gain
    if noise is not None:
        img = img + noise
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), LandmarkSet(pts)


def synth_generate(n_identities: int, samples_per_identity: int, cfg: SynthConfig = SynthConfig(), seed: int = 0) -> Dataset:
    """Deterministic per seed; each sample draws from its own (seed, id, k) stream."""
    if n_identities < 2:
        raise DatasetError("need at least two identities")
    if samples_per_identity < 1:
        raise DatasetError("need at least one sample per identity")
    identities = _sample_identities(n_identities, cfg, np.random.default_rng([seed, 0xFACE]))
    samples = []
    for ident in identities:
        for k in range(samples_per_identity):
            rng = np.random.default_rng([seed, ident.identity, k])
            rot = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
            shift = rng.uniform(-cfg.translation_px, cfg.translation_px, 2)
            gain = rng.uniform(*cfg.gain_range)
            geom = ident.geometry + rng.normal(0.0, cfg.sample_jitter, ident.geometry.shape) if cfg.sample_jitter else None
            colors = None
            if cfg.color_jitter:
                colors = np.clip(ident.appearance[:-1] + rng.normal(0.0, cfg.color_jitter, (len(TEMPLATE), 3)), 0, 255)
            noise = rng.normal(0.0, cfg.noise_std, (cfg.image_side, cfg.image_side, 3)) if cfg.noise_std else None
            image, lms = render(ident, cfg, rot, shift, gain, noise, geom, colors)
            pert = {"rotation": rot, "translation": tuple(shift), "gain": gain, "noise": cfg.noise_std}
            samples.append(Sample(image, lms, ident.identity, pert))
    return Dataset(samples, [i.identity for i in identities])


def dataset_split(dataset: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per-identity stratified (train, validation) split."""
    if not 0 < fraction < 1:
        raise DatasetError("validation fraction must lie in (0, 1)")
    labels = dataset.labels
    train, val = [], []
    for ident in np.unique(labels):
        idx = np.flatnonzero(labels == ident)
        if len(idx) < 2:
            raise DatasetError(f"identity {ident} has fewer than 2 samples")
        n_val = min(max(1, round(fraction * len(idx))), len(idx) - 1)
        perm = np.random.default_rng([seed, int(ident)]).permutation(idx)
        val.extend(sorted(perm[:n_val].tolist()))
        train.extend(sorted(perm[n_val:].tolist()))
    return dataset.subset(sorted(train)), dataset.subset(sorted(val))


# -- on-disk layout -----------------------------------------------------------------

MANIFEST = "manifest.txt"


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path, pixels: np.ndarray) -> None:
    from PIL import Image

    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def landmarks_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".landmarks.txt")


def save_dataset(dataset: Dataset, root) -> Path:
    """Write ``root/<identity>/sample_<k>.png`` + ``.landmarks.txt`` and a manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counters: dict[int, int] = {}
    lines = []
    for sample in dataset.samples:
        k = counters.get(sample.identity, 0)
        counters[sample.identity] = k + 1
        rel = Path(f"{sample.identity:04d}") / f"sample_{k}.png"
        (root / rel.parent).mkdir(exist_ok=True)
        save_image(root / rel, sample.image)
        write_landmarks(landmarks_path(root / rel), sample.landmarks)
        lines.append(f"{rel.as_posix()} {sample.identity}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return root / MANIFEST


def read_manifest(path) -> list[tuple[str, int]]:
    """Lines of ``path identity_id``."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected 'path identity_id'")
        rows.append((parts[0], int(parts[1])))
    return rows


def load_sample(path, identity: int = -1) -> Sample:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return Sample(load_image(path), read_landmarks(landmarks_path(path)), identity, path=str(path))


def load_dataset(root) -> Dataset:
    root = Path(root)
    rows = read_manifest(root / MANIFEST)
    samples = [load_sample(root / rel, ident) for rel, ident in rows]
    return Dataset(samples, sorted({s.identity for s in samples}))


def with_config(cfg: SynthConfig, **changes) -> SynthConfig:
    return replace(cfg, **changes)
