"""Staged training: backbone -> identity encoder -> PRN / PRN+ -> combiner.

With the backbone frozen its outputs are computed once (eval mode) and the
relational stages train on cached patches. ``joint=True`` instead runs the
backbone (and every upstream module) inside each step's graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import prn
from .config import RunConfig
from .data import Dataset, dataset_split, load_dataset, synth_generate, SynthConfig, synthetic_align_config
from .geometry import AlignConfig, AlignmentError, align_face
from .losses import LossBreakdown, sample_triplets, total_loss
from .numerics import checkpoint, nn
from .numerics.nn import EVAL, TRAIN, ParamStore
from .numerics.optim import sgd_step
from .numerics.tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

STAGES = ("backbone", "epsi", "prn", "prn_plus", "combined")
STAGE_CODES = {name: i + 1 for i, name in enumerate(STAGES)}
EVAL_CHUNK = 128


class TrainingError(RuntimeError):
    pass


class PrerequisiteError(TrainingError):
    pass


# -- data -------------------------------------------------------------------------


def align_config_for(n_points: int, size: int) -> AlignConfig:
    if n_points == 68:
        return AlignConfig(output_size=size)
    if n_points == 15:
        return synthetic_align_config(size)
    raise ValueError(f"no default landmark layout for {n_points} points")


@dataclass
class FaceBatch:
    pixels: np.ndarray  # (n, S, S, 3) float32 in [0, 1]
    landmarks: np.ndarray  # (n, N, 2) aligned coordinates
    labels: np.ndarray  # (n,) identity ids
    dropped: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def prepare_faces(dataset: Dataset, size: int, align_cfg: AlignConfig | None = None) -> FaceBatch:
    """Align every sample; failures are discarded and their indices recorded."""
    pixels, lms, labels, dropped = [], [], [], []
    for i, sample in enumerate(dataset.samples):
        cfg = align_cfg or align_config_for(sample.landmarks.n_points, size)
        try:
            face, aligned, _ = align_face(sample.image, sample.landmarks, cfg)
        except AlignmentError as exc:
            log.warning("discarding sample %d: %s", i, exc)
            dropped.append(i)
            continue
        pixels.append(face.pixels.astype(np.float32))
        lms.append(aligned.points)
        labels.append(sample.identity)
    if not pixels:
        raise TrainingError("no sample could be aligned")
    return FaceBatch(np.stack(pixels), np.stack(lms), np.array(labels, dtype=np.int64), dropped)


def load_run_dataset(run: RunConfig) -> Dataset:
    if run.dataset.startswith("synth:"):
        cfg = SynthConfig.preset(run.dataset.split(":", 1)[1])
        return synth_generate(run.n_identities, run.samples_per_identity, cfg, run.seed)
    return load_dataset(run.dataset)


def load_splits(run: RunConfig) -> tuple[FaceBatch, FaceBatch]:
    train, val = dataset_split(load_run_dataset(run), run.val_fraction, run.seed)
    return prepare_faces(train, run.image_size), prepare_faces(val, run.image_size)


def class_index(labels: np.ndarray, classes: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(classes, labels)
    if (idx >= len(classes)).any() or (classes[np.minimum(idx, len(classes) - 1)] != labels).any():
        raise ValueError("label outside the training classes")
    return idx


# -- model --------------------------------------------------------------------------


@dataclass
class Model:
    run: RunConfig
    store: ParamStore
    classes: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def bcfg(self) -> bb.BackboneConfig:
        return self.run.backbone

    @property
    def pcfg(self) -> prn.PrnConfig:
        return self.run.prn

    def seed_stage(self, stage: str) -> None:
        self.store.rng = np.random.default_rng([self.run.seed, STAGE_CODES[stage]])

    # -- features ----------------------------------------------------------

    def backbone_features(self, pixels: np.ndarray, landmarks: np.ndarray, mode: str = EVAL):
        maps, fg = bb.backbone_forward(pixels, self.store, self.bcfg, mode)
        patches = bb.extract_patches(maps, landmarks, self.bcfg.input_side, self.run.roi_m)
        return fg, patches.vectors

    def cached_features(self, faces: FaceBatch) -> "Features":
        fgs, pats = [], []
        for start in range(0, len(faces), EVAL_CHUNK):
            sl = slice(start, start + EVAL_CHUNK)
            fg, patches = self.backbone_features(faces.pixels[sl], faces.landmarks[sl])
            fgs.append(fg.data)
            pats.append(patches.data)
        return Features(np.concatenate(fgs), np.concatenate(pats), faces.labels)

    def embed_features(self, variant: str, fg: Tensor, patches: Tensor, mode: str) -> Tensor:
        return prn.embed_from_features(variant, fg, patches, self.store, self.pcfg, mode).vector

    def embed(self, faces: FaceBatch, variant: str | None = None) -> np.ndarray:
        variant = variant or self.run.variant
        out = []
        for start in range(0, len(faces), EVAL_CHUNK):
            sl = slice(start, start + EVAL_CHUNK)
            fg, patches = self.backbone_features(faces.pixels[sl], faces.landmarks[sl])
            out.append(self.embed_features(variant, fg, patches, EVAL).data)
        return np.concatenate(out).astype(np.float64)

    def logits(self, variant: str, embedding: Tensor, fg: Tensor | None = None, s_id=None) -> Tensor:
        if variant == "model_a":
            return bb.classify(self.store, embedding)
        if variant in ("prn", "prn_plus"):
            return prn.prn_logits(self.store, embedding)
        return prn.combiner_logits(self.store, embedding)

    def predict(self, faces: FaceBatch, variant: str | None = None) -> np.ndarray:
        """Softmax-head class predictions (as identity ids)."""
        variant = variant or self.run.variant
        emb = self.embed(faces, variant)
        logits = self.logits(variant, Tensor(emb.astype(self.store.dtype))).data
        return self.classes[np.argmax(logits, axis=1)]

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        state = self.store.state_dict()
        state["meta.classes"] = self.classes.astype(np.float32)
        checkpoint.save(path, state)
        header = self.run.header_lines()
        Path(str(path) + ".config").write_text("\n".join(line[2:] for line in header) + "\n")

    @classmethod
    def load(cls, path, run: RunConfig | None = None) -> "Model":
        path = Path(path)
        if run is None:
            cfg_path = Path(str(path) + ".config")
            if not cfg_path.exists():
                raise PrerequisiteError(f"missing config sidecar {cfg_path}")
            run = RunConfig.load(cfg_path)
        state = checkpoint.load(path)
        classes = state.pop("meta.classes").astype(np.int64)
        store = ParamStore(np.float32, seed=run.seed)
        for name, value in state.items():
            buffer = name.endswith(".running_mean") or name.endswith(".running_var")
            store.add(name, value, buffer=buffer)
        return cls(run, store, classes)


@dataclass
class Features:
    fg: np.ndarray
    patches: np.ndarray
    labels: np.ndarray


def new_model(run: RunConfig, labels: np.ndarray) -> Model:
    return Model(run, ParamStore(np.float32, seed=run.seed), np.unique(labels))


# -- loops ---------------------------------------------------------------------------

LOG_FIELDS = ("step", "L_t", "L_p", "L_id", "total", "lr")


def _run_sgd(model: Model, steps: int, step_fn, stage: str) -> list[dict]:
    rows = []
    for step in range(1, steps + 1):
        model.store.zero_grad()
        try:
            br: LossBreakdown = step_fn(step)
        except NonFiniteError as exc:
            raise TrainingError(f"{stage} step {step}: {exc}") from None
        if not np.isfinite(br.total.item()):
            raise TrainingError(f"{stage} step {step}: non-finite loss")
        br.total.backward()
        sgd_step(model.store, model.run.lr)
        rows.append({"step": step, **br.as_dict(), "lr": model.run.lr})
        if step == 1 or step % 50 == 0 or step == steps:
            log.info("%s step %d: %s", stage, step, {k: round(v, 4) for k, v in br.as_dict().items()})
    return rows


def _softmax_only(logits: Tensor, targets: np.ndarray, weight: float = 1.0) -> LossBreakdown:
    lid = nn.softmax_cross_entropy(logits, targets)
    return LossBreakdown(lid * weight, 0.0, 0.0, lid.item())


def train_backbone(model: Model, faces: FaceBatch) -> list[dict]:
    """Softmax identity pretraining of the backbone (model A)."""
    run = model.run
    model.seed_stage("backbone")
    if not model.store.has_namespace(bb.PREFIX + "."):
        bb.build(model.store, model.bcfg, model.n_classes)
    targets = class_index(faces.labels, model.classes)

    def step(i):
        rng = np.random.default_rng([run.seed, STAGE_CODES["backbone"], i])
        idx = np.sort(rng.choice(len(faces), size=min(run.batch_size, len(faces)), replace=False))
        _, fg = bb.backbone_forward(faces.pixels[idx], model.store, model.bcfg, TRAIN)
        return _softmax_only(bb.classify(model.store, fg), targets[idx])

    return _run_sgd(model, run.steps_backbone, step, "backbone")


def train_identity_encoder(model: Model, feats: Features) -> list[dict]:
    """Softmax training of e_psi on frozen-backbone patch sequences."""
    run = model.run
    model.seed_stage("epsi")
    if not model.store.has_namespace(prn.E_PSI + "."):
        prn.build_identity_encoder(model.store, model.pcfg, feats.patches.shape[-1], model.n_classes)
    model.store.freeze(bb.PREFIX)
    targets = class_index(feats.labels, model.classes)

    def step(i):
        rng = np.random.default_rng([run.seed, STAGE_CODES["epsi"], i])
        idx = np.sort(rng.choice(len(targets), size=min(run.batch_size, len(targets)), replace=False))
        s_id = prn.identity_state(Tensor(feats.patches[idx]), model.store, model.pcfg, TRAIN)
        return _softmax_only(prn.identity_logits(model.store, s_id), targets[idx])

    return _run_sgd(model, run.steps_epsi, step, "epsi")


def _triplet_indices(model: Model, labels: np.ndarray, stage: str, step: int):
    run = model.run
    trips = sample_triplets(
        labels, run.batch_size, "random", seed=[run.seed, STAGE_CODES[stage], step]
    )
    flat = np.array([[t.anchor, t.positive, t.negative] for t in trips])
    uniq, inverse = np.unique(flat, return_inverse=True)
    return uniq, inverse.reshape(flat.shape)


def _semi_hard_indices(model: Model, labels: np.ndarray, stage: str, step: int, embed_fn):
    run = model.run
    rng = np.random.default_rng([run.seed, STAGE_CODES[stage], step, 1])
    pool = np.sort(rng.choice(len(labels), size=min(3 * run.batch_size, len(labels)), replace=False))
    emb = embed_fn(pool)
    trips = sample_triplets(
        labels[pool], run.batch_size, "semi-hard", seed=[run.seed, STAGE_CODES[stage], step],
        embeddings=emb, margin=run.margin,
    )
    flat = pool[np.array([[t.anchor, t.positive, t.negative] for t in trips])]
    uniq, inverse = np.unique(flat, return_inverse=True)
    return uniq, inverse.reshape(flat.shape)


def _metric_step(model: Model, labels, stage, step, forward, embed_eval):
    """Sample triplets, run ``forward(unique_indices) -> (embedding, logits)``,
    and return the combined loss."""
    targets = class_index(labels, model.classes)
    if model.run.mining == "semi-hard":
        uniq, inv = _semi_hard_indices(model, labels, stage, step, embed_eval)
    else:
        uniq, inv = _triplet_indices(model, labels, stage, step)
    emb, logits = forward(uniq)
    a, p, n = emb[inv[:, 0]], emb[inv[:, 1]], emb[inv[:, 2]]
    return total_loss(a, p, n, logits, targets[uniq], model.run.loss_weights)


def train_relational(model: Model, feats: Features, conditioned: bool, faces: FaceBatch | None = None) -> list[dict]:
    """Triplet-ratio, pairwise and softmax loss on the PRN (or PRN+) descriptor.

    The backbone stays frozen unless ``run.joint``; then ``faces`` is required.
    """
    run = model.run
    stage = "prn_plus" if conditioned else "prn"
    variant = stage
    model.seed_stage(stage)
    if conditioned and not model.store.has_namespace(prn.E_PSI + "."):
        raise PrerequisiteError("prn_plus needs a trained identity encoder (stage epsi)")
    if not model.store.has_namespace(prn.G_THETA + "."):
        prn.build_prn(model.store, model.pcfg, feats.patches.shape[-1], conditioned)
        prn.build_prn_head(model.store, model.pcfg, model.n_classes)
    model.store.freeze(bb.PREFIX)
    model.store.freeze(prn.E_PSI)
    if run.joint:
        if faces is None:
            raise TrainingError("joint training needs the aligned faces")
        model.store.unfreeze(bb.PREFIX)
        model.store.unfreeze(prn.E_PSI)
        model.store.freeze(bb.PREFIX + ".head")
        model.store.freeze(prn.E_PSI + ".head")

    s_cache = None
    if conditioned and not run.joint:
        s_cache = _identity_cache(model, feats.patches)

    def forward(idx, mode=TRAIN):
        if run.joint:
            _, patches = model.backbone_features(faces.pixels[idx], faces.landmarks[idx], mode)
        else:
            patches = Tensor(feats.patches[idx])
        s_id = Tensor(s_cache[idx]) if s_cache is not None else None
        if conditioned:
            _, emb = prn.prn_plus_forward(patches, model.store, model.pcfg, mode, s_id=s_id)
        else:
            _, emb = prn.prn_forward(patches, model.store, model.pcfg, mode)
        return emb.vector, prn.prn_logits(model.store, emb.vector)

    def embed_eval(idx):
        return forward(idx, EVAL)[0].data

    def step(i):
        return _metric_step(model, feats.labels, stage, i, forward, embed_eval)

    rows = _run_sgd(model, run.steps_prn, step, variant)
    model.store.unfreeze(prn.E_PSI)
    model.store.unfreeze(bb.PREFIX)
    return rows


def _identity_cache(model: Model, patches: np.ndarray) -> np.ndarray:
    out = []
    for start in range(0, len(patches), EVAL_CHUNK):
        s = prn.identity_state(Tensor(patches[start : start + EVAL_CHUNK]), model.store, model.pcfg, EVAL)
        out.append(s.data)
    return np.concatenate(out)


def _relational_cache(model: Model, patches: np.ndarray, conditioned: bool) -> np.ndarray:
    out = []
    for start in range(0, len(patches), EVAL_CHUNK):
        chunk = Tensor(patches[start : start + EVAL_CHUNK])
        if conditioned:
            _, emb = prn.prn_plus_forward(chunk, model.store, model.pcfg, EVAL)
        else:
            _, emb = prn.prn_forward(chunk, model.store, model.pcfg, EVAL)
        out.append(emb.vector.data)
    return np.concatenate(out)


def train_combiner(model: Model, feats: Features, variant: str, faces: FaceBatch | None = None) -> list[dict]:
    """Fit the FC over [global feature, relational descriptor] (model B or C)."""
    run = model.run
    if variant not in ("model_b", "model_c"):
        raise ValueError("combined stage builds model_b or model_c")
    conditioned = variant == "model_c"
    model.seed_stage("combined")
    if not model.store.has_namespace(prn.G_THETA + "."):
        raise PrerequisiteError(f"{variant} needs a trained {'prn_plus' if conditioned else 'prn'} stage")
    if conditioned != prn.is_conditioned(model.store, feats.patches.shape[-1]):
        raise PrerequisiteError(f"{variant} needs a {'conditioned' if conditioned else 'plain'} PRN")
    if not model.store.has_namespace(prn.COMBINER + "."):
        prn.build_combiner(model.store, model.pcfg, feats.fg.shape[-1], model.n_classes)
    frozen = (bb.PREFIX, prn.E_PSI, prn.G_THETA, prn.F_PHI)
    for ns in frozen:
        model.store.freeze(ns)
    if run.joint:
        if faces is None:
            raise TrainingError("joint training needs the aligned faces")
        for ns in frozen:
            model.store.unfreeze(ns)
        for head in (bb.PREFIX + ".head", prn.E_PSI + ".head", prn.F_PHI + ".head"):
            model.store.freeze(head)
    r_cache = None if run.joint else _relational_cache(model, feats.patches, conditioned)

    def forward(idx, mode=TRAIN):
        if run.joint:
            fg, patches = model.backbone_features(faces.pixels[idx], faces.landmarks[idx], mode)
            emb = model.embed_features(variant, fg, patches, mode)
        else:
            emb = prn.combine(model.store, Tensor(feats.fg[idx]), Tensor(r_cache[idx]))
        return emb, prn.combiner_logits(model.store, emb)

    def embed_eval(idx):
        return forward(idx, EVAL)[0].data

    def step(i):
        return _metric_step(model, feats.labels, "combined", i, forward, embed_eval)

    rows = _run_sgd(model, run.steps_combined, step, variant)
    for ns in frozen:
        model.store.unfreeze(ns)
    return rows


# -- orchestration -----------------------------------------------------------------------


@dataclass
class PipelineResult:
    models: dict[str, Model]
    logs: dict[str, list[dict]]
    train: FaceBatch
    val: FaceBatch


def _snapshot(model: Model) -> Model:
    store = ParamStore(model.store.dtype, seed=model.run.seed)
    for name, value in model.store.state_dict().items():
        store.add(name, value, buffer=model.store.is_buffer(name))
    return Model(model.run, store, model.classes)


def run_pipeline(run: RunConfig, variants=("model_a", "model_b", "model_c"), splits=None) -> PipelineResult:
    """Train every stage needed for ``variants`` in-process, sharing upstream stages."""
    train, val = splits or load_splits(run)
    logs: dict[str, list[dict]] = {}
    models: dict[str, Model] = {}
    base = new_model(run, train.labels)
    logs["backbone"] = train_backbone(base, train)
    models["model_a"] = Model(run.replace(variant="model_a"), _snapshot(base).store, base.classes)
    feats = base.cached_features(train)
    need_plain = any(v in ("prn", "model_b") for v in variants)
    need_cond = any(v in ("prn_plus", "model_c") for v in variants)
    if need_plain:
        m = _snapshot(base)
        logs["prn"] = train_relational(m, feats, conditioned=False, faces=train)
        models["prn"] = Model(run.replace(variant="prn"), m.store, m.classes)
        if "model_b" in variants:
            mb = _snapshot(m)
            logs["model_b"] = train_combiner(mb, feats, "model_b", faces=train)
            models["model_b"] = Model(run.replace(variant="model_b"), mb.store, mb.classes)
    if need_cond:
        m = _snapshot(base)
        logs["epsi"] = train_identity_encoder(m, feats)
        logs["prn_plus"] = train_relational(m, feats, conditioned=True, faces=train)
        models["prn_plus"] = Model(run.replace(variant="prn_plus"), m.store, m.classes)
        if "model_c" in variants:
            mc = _snapshot(m)
            logs["model_c"] = train_combiner(mc, feats, "model_c", faces=train)
            models["model_c"] = Model(run.replace(variant="model_c"), mc.store, mc.classes)
    return PipelineResult(models, logs, train, val)


def make_pairs(labels: np.ndarray, seed: int = 0, max_genuine: int | None = None):
    """All genuine pairs (optionally subsampled) and as many random impostor pairs."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 7])
    i, j = np.triu_indices(len(labels), k=1)
    same = labels[i] == labels[j]
    gen = np.flatnonzero(same)
    imp = np.flatnonzero(~same)
    if max_genuine is not None and len(gen) > max_genuine:
        gen = np.sort(rng.choice(gen, max_genuine, replace=False))
    imp = np.sort(rng.choice(imp, min(len(gen), len(imp)), replace=False))
    keep = np.concatenate([gen, imp])
    return np.stack([i[keep], j[keep]], axis=1), same[keep]
