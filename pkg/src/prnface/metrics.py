"""Verification and identification metrics on squared-L2 distances.

A pair or probe is accepted when its squared distance ``d <= t``. Threshold
sweeps use the midpoints between consecutive distinct distances plus the
two infinite sentinels, which enumerates every distinct decision rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class PairTrial:
    a: np.ndarray
    b: np.ndarray
    same: bool


def squared_l2(a, b) -> float | np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"embedding widths differ: {a.shape[-1]} vs {b.shape[-1]}")
    d = a - b
    return (d * d).sum(axis=-1)


def pairwise_squared_l2(x, y) -> np.ndarray:
    """(len(x), len(y)) matrix of squared distances."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError("embedding widths differ")
    return ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)


def sweep_thresholds(distances) -> np.ndarray:
    d = np.unique(np.asarray(distances, dtype=np.float64))
    mids = (d[:-1] + d[1:]) / 2
    return np.concatenate([[-np.inf], mids, [np.inf]])


def trials_to_arrays(trials: Sequence[PairTrial]) -> tuple[np.ndarray, np.ndarray]:
    dist = np.array([squared_l2(t.a, t.b) for t in trials], dtype=np.float64)
    same = np.array([bool(t.same) for t in trials])
    return dist, same


@dataclass
class RocCurve:
    """Rows sorted by threshold; TAR and FAR are non-decreasing."""

    thresholds: np.ndarray
    tar: np.ndarray
    far: np.ndarray
    n_genuine: int
    n_impostor: int

    def tar_at_far(self, far: float) -> float:
        """TAR at the largest threshold whose FAR does not exceed ``far``."""
        ok = np.flatnonzero(self.far <= far + 1e-12)
        return float(self.tar[ok[-1]]) if ok.size else 0.0

    def rows(self):
        return zip(self.thresholds.tolist(), self.tar.tolist(), self.far.tolist())


def verification_roc(distances, same=None) -> RocCurve:
    """ROC over squared distances; accepts a list of PairTrial as ``distances``."""
    if same is None:
        distances, same = trials_to_arrays(distances)
    d = np.asarray(distances, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    n_gen, n_imp = int(same.sum()), int((~same).sum())
    if n_gen == 0 or n_imp == 0:
        raise ValueError("ROC needs at least one genuine and one impostor trial")
    thr = sweep_thresholds(d)
    gen = np.sort(d[same])
    imp = np.sort(d[~same])
    tar = np.searchsorted(gen, thr, side="right") / n_gen
    far = np.searchsorted(imp, thr, side="right") / n_imp
    return RocCurve(thr, tar, far, n_gen, n_imp)


def best_threshold(distances, same) -> tuple[float, float]:
    """(threshold, accuracy) maximizing accuracy; the smallest such threshold wins ties."""
    d = np.asarray(distances, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    thr = sweep_thresholds(d)
    gen = np.sort(d[same])
    imp = np.sort(d[~same])
    correct = np.searchsorted(gen, thr, side="right") + (len(imp) - np.searchsorted(imp, thr, side="right"))
    k = int(np.argmax(correct))
    return float(thr[k]), float(correct[k] / len(d))


def accuracy_at(distances, same, threshold: float) -> float:
    d = np.asarray(distances, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    return float(np.mean((d <= threshold) == same))


@dataclass
class FoldResult:
    accuracies: np.ndarray
    thresholds: np.ndarray
    folds: list[np.ndarray]

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std(self) -> float:
        return float(self.accuracies.std())


def fold_assignment(n: int, k: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def fold_accuracy(distances, same, k: int = 10, seed: int = 0) -> FoldResult:
    """k-fold protocol: each fold is scored at the threshold chosen on the other k - 1."""
    d = np.asarray(distances, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > len(d):
        raise ValueError("more folds than trials")
    folds = fold_assignment(len(d), k, seed)
    accs, thrs = [], []
    for f in folds:
        mask = np.ones(len(d), dtype=bool)
        mask[f] = False
        t, _ = best_threshold(d[mask], same[mask])
        thrs.append(t)
        accs.append(accuracy_at(d[f], same[f], t))
    return FoldResult(np.array(accs), np.array(thrs), folds)


def _ranked_gallery(probes, gallery) -> tuple[np.ndarray, np.ndarray]:
    dist = pairwise_squared_l2(probes, gallery)
    order = np.argsort(dist, axis=1, kind="stable")
    return dist, order


def identification_cmc(probes, probe_ids, gallery, gallery_ids, max_rank: int | None = None) -> np.ndarray:
    """``cmc[n - 1]`` = fraction of mated probes whose identity is among the n
    nearest gallery entries. Probes absent from the gallery are ignored."""
    gallery = np.asarray(gallery, dtype=np.float64)
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    mated = np.isin(probe_ids, gallery_ids)
    if not mated.any():
        raise ValueError("no probe identity is present in the gallery")
    probes = np.asarray(probes, dtype=np.float64)[mated]
    probe_ids = probe_ids[mated]
    max_rank = len(gallery) if max_rank is None else min(max_rank, len(gallery))
    _, order = _ranked_gallery(probes, gallery)
    hits = gallery_ids[order] == probe_ids[:, None]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), len(gallery))
    return np.array([(first < n).mean() for n in range(1, max_rank + 1)])


@dataclass
class OpenSetResult:
    fpir_targets: np.ndarray
    tpir: np.ndarray
    thresholds: np.ndarray
    achieved_fpir: np.ndarray


def open_set_tpir(probes, probe_ids, gallery, gallery_ids, fpir_targets) -> OpenSetResult:
    """TPIR at the largest nearest-match threshold whose FPIR stays within target.

    A mated probe counts when its nearest gallery entry is within threshold
    and carries its identity; an impostor probe is a false positive when its
    nearest entry is within threshold.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    mated = np.isin(probe_ids, gallery_ids)
    n_imp = int((~mated).sum())
    n_mated = int(mated.sum())
    if n_imp == 0:
        raise ValueError("open-set evaluation needs impostor probes")
    if n_mated == 0:
        raise ValueError("open-set evaluation needs mated probes")
    dist, order = _ranked_gallery(probes, gallery)
    nearest = order[:, 0]
    dmin = dist[np.arange(len(dist)), nearest]
    correct = gallery_ids[nearest] == probe_ids
    thr = sweep_thresholds(dmin)
    imp_d = np.sort(dmin[~mated])
    good_d = np.sort(dmin[mated & correct])
    fpir = np.searchsorted(imp_d, thr, side="right") / n_imp
    tpir = np.searchsorted(good_d, thr, side="right") / n_mated
    targets = np.asarray(fpir_targets, dtype=np.float64)
    out_t, out_thr, out_f = [], [], []
    for target in targets:
        k = np.flatnonzero(fpir <= target + 1e-12)[-1]
        out_t.append(tpir[k])
        out_thr.append(thr[k])
        out_f.append(fpir[k])
    return OpenSetResult(targets, np.array(out_t), np.array(out_thr), np.array(out_f))
