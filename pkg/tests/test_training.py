import numpy as np
import pytest

from prnface import backbone as bb
from prnface import data, metrics, training
from prnface.config import RunConfig
from prnface.training import PrerequisiteError, TrainingError

TINY = RunConfig(
    n_identities=4,
    samples_per_identity=8,
    val_fraction=0.25,
    image_size=32,
    stem_channels=4,
    stage_widths=(8, 8),
    blocks=(1, 1),
    strides=(1, 2),
    g_theta_widths=(8, 8),
    f_phi_widths=(8, 8),
    lstm_widths=(6,),
    sid_width=4,
    combiner_width=8,
    batch_size=8,
    steps_backbone=4,
    steps_epsi=3,
    steps_prn=3,
    steps_combined=3,
)


@pytest.fixture(scope="module")
def splits():
    return training.load_splits(TINY)


@pytest.fixture(scope="module")
def trained(splits):
    train, _ = splits
    model = training.new_model(TINY, train.labels)
    training.train_backbone(model, train)
    return model


def copy_of(model):
    return training._snapshot(model)


def test_every_synthetic_face_aligns(splits):
    train, val = splits
    assert len(train) == 24 and len(val) == 8
    assert not train.dropped and not val.dropped
    eyes = train.landmarks[:, list(data.LEFT_EYE + data.RIGHT_EYE)].mean(axis=1)
    mouth = train.landmarks[:, list(data.MOUTH)].mean(axis=1)
    assert np.abs(eyes[:, 1] - 0.30 * TINY.image_size).max() < 0.5
    assert np.abs(mouth[:, 1] - 0.65 * TINY.image_size).max() < 0.5


def test_log_rows_have_the_logged_fields(trained, splits):
    rows = training.train_identity_encoder(copy_of(trained), trained.cached_features(splits[0]))
    assert len(rows) == TINY.steps_epsi
    assert all(tuple(r) == training.LOG_FIELDS for r in rows)
    assert [r["step"] for r in rows] == [1, 2, 3]


def test_backbone_loss_decreases(splits):
    train, _ = splits
    run = TINY.replace(steps_backbone=30)
    model = training.new_model(run, train.labels)
    rows = training.train_backbone(model, train)
    assert np.mean([r["total"] for r in rows[-5:]]) < np.mean([r["total"] for r in rows[:5]])


def test_relational_stage_keeps_backbone_frozen(trained, splits):
    model = copy_of(trained)
    before = {n: model.store[n].data.tobytes() for n in model.store.names("backbone.")}
    training.train_relational(model, model.cached_features(splits[0]), conditioned=False)
    assert all(model.store[n].data.tobytes() == b for n, b in before.items())
    assert model.store.has_namespace("g_theta.")


def test_joint_stage_updates_backbone(trained, splits):
    model = copy_of(trained)
    model.run = TINY.replace(joint=True)
    name = "backbone.conv1.w"
    before = model.store[name].data.copy()
    training.train_relational(model, model.cached_features(splits[0]), conditioned=False, faces=splits[0])
    assert not np.array_equal(before, model.store[name].data)


def test_joint_without_faces_rejected(trained, splits):
    model = copy_of(trained)
    model.run = TINY.replace(joint=True)
    with pytest.raises(TrainingError):
        training.train_relational(model, model.cached_features(splits[0]), conditioned=False)


def test_prerequisites_enforced(trained, splits):
    feats = trained.cached_features(splits[0])
    with pytest.raises(PrerequisiteError):
        training.train_relational(copy_of(trained), feats, conditioned=True)
    with pytest.raises(PrerequisiteError):
        training.train_combiner(copy_of(trained), feats, "model_b")
    plain = copy_of(trained)
    training.train_relational(plain, feats, conditioned=False)
    with pytest.raises(PrerequisiteError):
        training.train_combiner(plain, feats, "model_c")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_huge_learning_rate_is_reported(splits):
    train, _ = splits
    run = TINY.replace(lr=1e30, steps_backbone=20)
    with pytest.raises(TrainingError):
        training.train_backbone(training.new_model(run, train.labels), train)


def test_identity_free_embeddings_verify_at_chance(splits):
    _, val = splits
    labels = np.repeat(np.arange(10), 6)
    emb = np.random.default_rng(0).normal(size=(len(labels), 16))
    pairs, same = training.make_pairs(labels, seed=0)
    d = metrics.squared_l2(emb[pairs[:, 0]], emb[pairs[:, 1]])
    assert abs(metrics.fold_accuracy(d, same, k=10).mean - 0.5) <= 0.1


def test_random_init_backbone_already_separates_easy_identities():
    # random convolutions keep the pixel-space identity separation of the easy preset
    run = TINY.replace(n_identities=10, samples_per_identity=6, val_fraction=0.5)
    tr, va = training.load_splits(run)
    model = training.new_model(run, tr.labels)
    bb.build(model.store, model.bcfg, model.n_classes)
    emb = model.embed(va, "model_a")
    pairs, same = training.make_pairs(va.labels, seed=0)
    d = metrics.squared_l2(emb[pairs[:, 0]], emb[pairs[:, 1]])
    assert metrics.fold_accuracy(d, same, k=5).mean > 0.6


def test_make_pairs_is_balanced_and_seeded():
    labels = np.repeat(np.arange(4), 3)
    pairs, same = training.make_pairs(labels, seed=1)
    assert same.sum() == (~same).sum() == 12
    assert (labels[pairs[same, 0]] == labels[pairs[same, 1]]).all()
    assert (labels[pairs[~same, 0]] != labels[pairs[~same, 1]]).all()
    again, _ = training.make_pairs(labels, seed=1)
    np.testing.assert_array_equal(pairs, again)


def test_checkpoint_round_trip(trained, tmp_path):
    path = tmp_path / "backbone.prnc"
    trained.save(path)
    back = training.Model.load(path)
    assert back.run == trained.run
    np.testing.assert_array_equal(back.classes, trained.classes)
    for name in trained.store:
        assert back.store[name].data.tobytes() == trained.store[name].data.tobytes()


def test_missing_sidecar_is_a_prerequisite_error(trained, tmp_path):
    path = tmp_path / "m.prnc"
    trained.save(path)
    (tmp_path / "m.prnc.config").unlink()
    with pytest.raises(PrerequisiteError):
        training.Model.load(path)
