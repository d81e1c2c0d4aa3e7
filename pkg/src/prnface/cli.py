"""Command-line entry point: ``prnface {synth,align,train,eval}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, metrics, training
from .config import ConfigError, RunConfig
from .geometry import AlignmentError, GeometryError, align_face, read_landmarks, write_landmarks
from .numerics.checkpoint import CheckpointError

log = logging.getLogger("prnface")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")


class UsageError(Exception):
    pass


# -- synth -------------------------------------------------------------------------------


def write_protocols(dataset: data.Dataset, root: Path, val_fraction: float, seed: int) -> None:
    """Pair list, gallery and probe manifests over the validation split."""
    paths = [f"{s.identity:04d}/sample_{k}.png" for s, k in _sample_keys(dataset)]
    labels = dataset.labels
    _, val = data.dataset_split(dataset, val_fraction, seed)
    val_keys = {id(s) for s in val.samples}
    val_idx = np.array([i for i, s in enumerate(dataset.samples) if id(s) in val_keys])
    pairs, same = training.make_pairs(labels[val_idx], seed=seed)
    if not same.any():
        log.warning("validation split holds one sample per identity; pairs_val.txt is empty")
    with open(root / "pairs_val.txt", "w") as fh:
        for (i, j), y in zip(pairs, same):
            fh.write(f"{paths[val_idx[i]]} {paths[val_idx[j]]} {int(y)}\n")
    ids = sorted(set(labels[val_idx].tolist()))
    enrolled = set(ids[: max(1, (3 * len(ids)) // 4)])
    gallery, probes, seen = [], [], set()
    for i in val_idx:
        ident = int(labels[i])
        if ident in enrolled and ident not in seen:
            gallery.append(i)
            seen.add(ident)
        else:
            probes.append(i)
    (root / "gallery_val.txt").write_text("".join(f"{paths[i]} {labels[i]}\n" for i in gallery))
    (root / "probes_val.txt").write_text("".join(f"{paths[i]} {labels[i]}\n" for i in probes))


def _sample_keys(dataset: data.Dataset):
    counters: dict[int, int] = {}
    for s in dataset.samples:
        k = counters.get(s.identity, 0)
        counters[s.identity] = k + 1
        yield s, k


def cmd_synth(args) -> int:
    cfg = data.SynthConfig.preset(args.preset)
    ds = data.synth_generate(args.identities, args.samples, cfg, args.seed)
    root = Path(args.out)
    data.save_dataset(ds, root)
    write_protocols(ds, root, args.val_fraction, args.seed)
    print(f"wrote {len(ds)} samples to {root}")
    return 0


# -- align -------------------------------------------------------------------------------


def _find_landmarks(image: Path, images_root: Path, landmarks_root: Path) -> Path:
    rel = image.relative_to(images_root)
    for cand in (
        landmarks_root / rel.parent / (rel.stem + ".landmarks.txt"),
        landmarks_root / rel.parent / (rel.stem + ".txt"),
    ):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no landmark file for {image}")


def cmd_align(args) -> int:
    images_root = Path(args.images)
    landmarks_root = Path(args.landmarks or args.images)
    if not images_root.is_dir():
        raise UsageError(f"image directory {images_root} does not exist")
    images = sorted(p for p in images_root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise UsageError(f"no images found under {images_root}")
    out = Path(args.out)
    ok = 0
    for image_path in images:
        try:
            lms = read_landmarks(_find_landmarks(image_path, images_root, landmarks_root))
            cfg = training.align_config_for(lms.n_points, args.size)
            face, aligned, _ = align_face(data.load_image(image_path), lms, cfg)
        except (OSError, ValueError, GeometryError) as exc:
            kind = "alignment failed" if isinstance(exc, AlignmentError) else "skipped"
            log.warning("%s: %s (%s)", image_path, kind, exc)
            continue
        rel = image_path.relative_to(images_root).with_suffix(".png")
        (out / rel.parent).mkdir(parents=True, exist_ok=True)
        data.save_image(out / rel, face.pixels)
        write_landmarks(data.landmarks_path(out / rel), aligned)
        ok += 1
    manifest = Path(images_root) / data.MANIFEST
    if manifest.exists():
        kept = [(p, i) for p, i in data.read_manifest(manifest) if (out / p).exists()]
        (out / data.MANIFEST).write_text("".join(f"{p} {i}\n" for p, i in kept))
    print(f"aligned {ok}/{len(images)} images into {out}")
    return 0 if ok else 1


# -- train -------------------------------------------------------------------------------


def checkpoint_path(run: RunConfig, stage: str) -> Path:
    name = run.variant if stage == "combined" else stage
    return Path(run.checkpoint_dir) / f"{name}.prnc"


PREREQUISITES = {
    "backbone": None,
    "epsi": "backbone",
    "prn": "backbone",
    "prn_plus": "epsi",
}

STAGE_VARIANT = {"backbone": "model_a", "epsi": "model_a", "prn": "prn", "prn_plus": "prn_plus"}


def write_log(path: Path, run: RunConfig, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        for line in run.header_lines():
            fh.write(line + "\n")
        writer = csv.DictWriter(fh, fieldnames=training.LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if k != "step" else v) for k, v in row.items()})


def cmd_train(args) -> int:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    run = run.with_env()
    if args.joint:
        run = run.replace(joint=True)
    stage = args.stage
    if stage == "combined":
        if run.variant not in ("model_b", "model_c"):
            raise UsageError("stage combined needs variant model_b or model_c")
        prereq = "prn" if run.variant == "model_b" else "prn_plus"
    else:
        prereq = PREREQUISITES[stage]
        run = run.replace(variant=STAGE_VARIANT[stage])
    log.info("resolved config:\n%s", run.to_text())

    train, _ = training.load_splits(run)
    if prereq is None:
        model = training.new_model(run, train.labels)
    else:
        path = Path(run.checkpoint_dir) / f"{prereq}.prnc"
        if not path.exists():
            raise training.PrerequisiteError(f"stage {stage} needs checkpoint {path}")
        model = training.Model.load(path, run)
    before = {n: model.store[n].data.copy() for n in model.store.names("backbone.")}

    if stage == "backbone":
        rows = training.train_backbone(model, train)
    else:
        feats = model.cached_features(train)
        if stage == "epsi":
            rows = training.train_identity_encoder(model, feats)
        elif stage in ("prn", "prn_plus"):
            rows = training.train_relational(model, feats, stage == "prn_plus", faces=train)
        else:
            rows = training.train_combiner(model, feats, run.variant, faces=train)
    if stage != "backbone" and not run.joint:
        for name, value in before.items():
            if not np.array_equal(value, model.store[name].data):
                raise training.TrainingError(f"frozen parameter {name} changed during {stage}")

    out = checkpoint_path(run, stage)
    model.save(out)
    log_name = run.variant if stage == "combined" else stage
    write_log(out.parent / f"{log_name}_log.csv", run, rows)
    print(f"wrote {out}")
    return 0


# -- eval --------------------------------------------------------------------------------


def _resolve(manifest: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else manifest.parent / p


def _load_faces(paths: list[Path], size: int) -> training.FaceBatch:
    missing = [p for p in paths if not p.exists() or not data.landmarks_path(p).exists()]
    if missing:
        raise UsageError(f"manifest references missing files, e.g. {missing[0]}")
    samples = [data.load_sample(p) for p in paths]
    faces = training.prepare_faces(data.Dataset(samples, []), size)
    if faces.dropped:
        raise training.TrainingError(f"{len(faces.dropped)} evaluation images failed to align")
    return faces


def read_pair_list(path) -> list[tuple[str, str, int]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise UsageError(f"{path}:{lineno}: expected 'path_a path_b label(0|1)'")
        rows.append((parts[0], parts[1], int(parts[2])))
    return rows


def _write_csv(path: Path, run: RunConfig, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        for line in run.header_lines():
            fh.write(line + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _embed_paths(model: training.Model, paths: list[Path]) -> np.ndarray:
    uniq = sorted(set(paths))
    faces = _load_faces(uniq, model.run.image_size)
    emb = model.embed(faces)
    index = {p: i for i, p in enumerate(uniq)}
    return emb[[index[p] for p in paths]]


def evaluate_pairs(model, manifest: Path, folds: int, fars) -> tuple[list, dict]:
    rows = read_pair_list(manifest)
    if not rows:
        raise UsageError(f"{manifest} lists no pairs")
    a = [_resolve(manifest, r[0]) for r in rows]
    b = [_resolve(manifest, r[1]) for r in rows]
    emb = _embed_paths(model, a + b)
    dist = metrics.squared_l2(emb[: len(rows)], emb[len(rows) :])
    same = np.array([r[2] == 1 for r in rows])
    fr = metrics.fold_accuracy(dist, same, min(folds, len(rows)), model.run.seed)
    roc = metrics.verification_roc(dist, same)
    out = [("fold_accuracy_mean", folds, fr.mean), ("fold_accuracy_std", folds, fr.std)]
    out += [("tar_at_far", float(f), roc.tar_at_far(f)) for f in fars]
    curves = {"roc.csv": (["threshold", "tar", "far"], list(roc.rows()))}
    return out, curves


def _labeled(manifest: Path):
    rows = data.read_manifest(manifest)
    return [_resolve(manifest, p) for p, _ in rows], np.array([i for _, i in rows])


def evaluate_identification(model, probes: Path, gallery: Path, protocol: str, fpirs) -> tuple[list, dict]:
    ppaths, pids = _labeled(probes)
    gpaths, gids = _labeled(gallery)
    emb = _embed_paths(model, ppaths + gpaths)
    pemb, gemb = emb[: len(ppaths)], emb[len(ppaths) :]
    if protocol == "cmc":
        cmc = metrics.identification_cmc(pemb, pids, gemb, gids)
        out = [("rank", n, float(cmc[n - 1])) for n in (1, 5, 10) if n <= len(cmc)]
        return out, {"cmc.csv": (["rank", "rate"], [(n + 1, float(v)) for n, v in enumerate(cmc)])}
    res = metrics.open_set_tpir(pemb, pids, gemb, gids, fpirs)
    out = [("tpir_at_fpir", float(f), float(t)) for f, t in zip(res.fpir_targets, res.tpir)]
    return out, {}


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    model = training.Model.load(ckpt)
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise UsageError(f"manifest {manifest} does not exist")
    if args.protocol == "pairs":
        rows, curves = evaluate_pairs(model, manifest, args.folds, args.far)
    else:
        if not args.gallery:
            raise UsageError(f"protocol {args.protocol} needs --gallery")
        rows, curves = evaluate_identification(model, manifest, Path(args.gallery), args.protocol, args.fpir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", model.run, ["metric", "operating_point", "value"], rows)
    for name, (header, curve) in curves.items():
        _write_csv(out / name, model.run, header, curve)
    for metric, op, value in rows:
        print(f"{metric},{op},{value:.6f}")
    return 0


# -- entry point ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prnface", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset and evaluation manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="easy")
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("align", help="align images by their landmarks")
    p.add_argument("--images", required=True)
    p.add_argument("--landmarks", default=None, help="defaults to the image directory")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=140)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--config", default=None)
    p.add_argument("--stage", required=True, choices=training.STAGES)
    p.add_argument("--joint", action="store_true", help="fine-tune upstream modules end to end")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True, choices=("pairs", "cmc", "openset"))
    p.add_argument("--manifest", required=True, help="pair list, or probe manifest for cmc/openset")
    p.add_argument("--gallery", default=None)
    p.add_argument("--out", default="eval_out")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--far", type=_floats, default=[0.001, 0.01, 0.1])
    p.add_argument("--fpir", type=_floats, default=[0.01, 0.1])
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, training.PrerequisiteError, data.DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (training.TrainingError, FloatingPointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
