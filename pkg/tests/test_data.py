import numpy as np
import pytest

from prnface import data
from prnface.data import DatasetError, SynthConfig


def test_static_samples_of_one_identity_are_identical():
    ds = data.synth_generate(2, 3, SynthConfig.preset("static"), seed=4)
    np.testing.assert_array_equal(ds[0].image, ds[1].image)
    np.testing.assert_array_equal(ds[0].image, ds[2].image)
    assert not np.array_equal(ds[0].image, ds[3].image)


def test_generation_is_deterministic():
    a = data.synth_generate(3, 4, SynthConfig.preset("medium"), seed=7)
    b = data.synth_generate(3, 4, SynthConfig.preset("medium"), seed=7)
    for x, y in zip(a.samples, b.samples):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.landmarks.points.tobytes() == y.landmarks.points.tobytes()
    c = data.synth_generate(3, 4, SynthConfig.preset("medium"), seed=8)
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_sample_stream_does_not_depend_on_dataset_size():
    small = data.synth_generate(3, 2, seed=1)
    large = data.synth_generate(3, 5, seed=1)
    np.testing.assert_array_equal(small[2].image, large[5].image)


def test_landmarks_sit_on_part_centres():
    # narrow, well separated parts so neighbouring blobs do not bias the centroid
    cfg = data.with_config(SynthConfig.preset("static"), image_side=120, face_half_width=40.0, part_sigma=1.5)
    ident = data._sample_identities(2, cfg, np.random.default_rng([0, 0xFACE]))[1]
    base = ident.appearance[:-1]
    grid = np.arange(cfg.image_side) + 0.5
    xs, ys = np.meshgrid(grid, grid)
    for k in range(len(data.TEMPLATE)):
        colors = base.copy()
        colors[k] = np.clip(colors[k] + np.where(colors[k] > 128, -100, 100), 0, 255)
        a, lms = data.render(ident, cfg, rotation=0.3, colors=base)
        b, _ = data.render(ident, cfg, rotation=0.3, colors=colors)
        w = np.abs(a.astype(float) - b.astype(float)).sum(axis=-1)
        centroid = np.array([(w * xs).sum(), (w * ys).sum()]) / w.sum()
        assert np.linalg.norm(centroid - lms.points[k]) < 0.5


def test_identities_respect_minimum_latent_distance():
    cfg = SynthConfig()
    ids = data._sample_identities(20, cfg, np.random.default_rng([0, 0xFACE]))
    lat = np.array([i.latent() for i in ids])
    d = np.linalg.norm(lat[:, None] - lat[None], axis=-1)
    assert d[np.triu_indices(20, 1)].min() >= cfg.min_latent_distance


def test_nearest_centroid_beats_chance():
    ds = data.synth_generate(8, 10, SynthConfig(), seed=3)
    train, val = data.dataset_split(ds, 0.3, seed=3)
    x_tr = np.stack([s.image.astype(float).ravel() for s in train.samples])
    x_va = np.stack([s.image.astype(float).ravel() for s in val.samples])
    ids = np.unique(train.labels)
    centroids = np.stack([x_tr[train.labels == i].mean(axis=0) for i in ids])
    pred = ids[np.argmin(((x_va[:, None] - centroids[None]) ** 2).sum(-1), axis=1)]
    assert (pred == val.labels).mean() > 2.0 / len(ids)


def test_split_takes_five_of_fifty():
    ds = data.synth_generate(3, 50, SynthConfig.preset("static"), seed=0)
    train, val = data.dataset_split(ds, 0.1, seed=2)
    for ident in range(3):
        assert (val.labels == ident).sum() == 5
        assert (train.labels == ident).sum() == 45
    ids_tr = {id(s) for s in train.samples}
    assert not ids_tr & {id(s) for s in val.samples}
    again_tr, again_val = data.dataset_split(ds, 0.1, seed=2)
    assert [id(s) for s in again_val.samples] == [id(s) for s in val.samples]


def test_split_errors():
    ds = data.synth_generate(2, 1, SynthConfig.preset("static"))
    with pytest.raises(DatasetError):
        data.dataset_split(ds, 0.5)
    ds = data.synth_generate(2, 4, SynthConfig.preset("static"))
    with pytest.raises(DatasetError):
        data.dataset_split(ds, 0.0)


def test_generation_errors():
    with pytest.raises(DatasetError):
        data.synth_generate(1, 3)
    with pytest.raises(DatasetError):
        SynthConfig(part_sigma=0.0)
    with pytest.raises(DatasetError):
        SynthConfig.preset("impossible")


def test_disk_round_trip(tmp_path):
    ds = data.synth_generate(2, 3, seed=5)
    manifest = data.save_dataset(ds, tmp_path)
    assert (tmp_path / "0001" / "sample_2.png").exists()
    assert (tmp_path / "0001" / "sample_2.landmarks.txt").exists()
    assert data.read_manifest(manifest)[4] == ("0001/sample_1.png", 1)
    back = data.load_dataset(tmp_path)
    assert back.labels.tolist() == ds.labels.tolist()
    for a, b in zip(ds.samples, back.samples):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.landmarks.points, b.landmarks.points)


def test_bad_manifest_line(tmp_path):
    (tmp_path / data.MANIFEST).write_text("just_a_path.png\n")
    with pytest.raises(DatasetError):
        data.read_manifest(tmp_path / data.MANIFEST)
