import csv

import numpy as np
import pytest

from prnface import data
from prnface.cli import main
from prnface.config import RunConfig
from prnface.geometry import read_landmarks
from prnface.numerics import checkpoint


def tiny_config(root, **kw):
    run = RunConfig(
        dataset=str(root / "ds"),
        n_identities=6,
        samples_per_identity=20,
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
        steps_backbone=3,
        steps_epsi=2,
        steps_prn=2,
        steps_combined=2,
        checkpoint_dir=str(root / "run"),
    ).replace(**kw)
    path = root / "run.cfg"
    path.write_text(run.to_text())
    return path


def read_rows(path):
    lines = [line for line in path.read_text().splitlines() if not line.startswith("#")]
    return list(csv.reader(lines))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "ds"), "--identities", "6", "--samples", "20"]) == 0
    cfg = tiny_config(root)
    for stage in ("backbone", "epsi", "prn_plus", "combined"):
        assert main(["train", "--config", str(cfg), "--stage", stage]) == 0
    return root


def test_synth_writes_manifest_and_protocols(workspace):
    ds = workspace / "ds"
    assert len(data.read_manifest(ds / data.MANIFEST)) == 120
    pairs = (ds / "pairs_val.txt").read_text().splitlines()
    assert pairs and {line.split()[2] for line in pairs} == {"0", "1"}
    gallery = data.read_manifest(ds / "gallery_val.txt")
    probes = data.read_manifest(ds / "probes_val.txt")
    assert len({i for _, i in gallery}) == len(gallery)
    assert {i for _, i in probes} - {i for _, i in gallery}  # open-set distractors exist


def test_train_writes_checkpoints_and_logs(workspace):
    run = workspace / "run"
    for name in ("backbone", "epsi", "prn_plus", "model_c"):
        assert (run / f"{name}.prnc").exists()
        assert (run / f"{name}.prnc.config").exists()
    text = (run / "model_c_log.csv").read_text()
    assert text.startswith("# variant = model_c")
    rows = read_rows(run / "model_c_log.csv")
    assert rows[0] == ["step", "L_t", "L_p", "L_id", "total", "lr"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]


def test_backbone_unchanged_by_later_stages(workspace):
    base = checkpoint.load(workspace / "run" / "backbone.prnc")
    final = checkpoint.load(workspace / "run" / "model_c.prnc")
    for name, value in base.items():
        if name.startswith("backbone."):
            assert value.tobytes() == final[name].tobytes()


def test_eval_pairs_writes_metrics_and_roc(workspace):
    out = workspace / "eval_pairs"
    argv = ["eval", "--checkpoint", str(workspace / "run" / "model_c.prnc"), "--protocol", "pairs"]
    assert main(argv + ["--manifest", str(workspace / "ds" / "pairs_val.txt"), "--out", str(out), "--folds", "3"]) == 0
    rows = read_rows(out / "metrics.csv")
    assert rows[0] == ["metric", "operating_point", "value"]
    assert [r[0] for r in rows[1:]] == ["fold_accuracy_mean", "fold_accuracy_std"] + ["tar_at_far"] * 3
    assert all(0.0 <= float(r[2]) <= 1.0 for r in rows[1:])
    roc = read_rows(out / "roc.csv")
    assert roc[0] == ["threshold", "tar", "far"]
    assert (out / "metrics.csv").read_text().startswith("# variant = model_c")


@pytest.mark.parametrize("protocol, metric", [("cmc", "rank"), ("openset", "tpir_at_fpir")])
def test_eval_identification(workspace, protocol, metric):
    out = workspace / f"eval_{protocol}"
    ds = workspace / "ds"
    argv = ["eval", "--checkpoint", str(workspace / "run" / "model_c.prnc"), "--protocol", protocol]
    argv += ["--manifest", str(ds / "probes_val.txt"), "--gallery", str(ds / "gallery_val.txt"), "--out", str(out)]
    assert main(argv) == 0
    rows = read_rows(out / "metrics.csv")
    assert {r[0] for r in rows[1:]} == {metric}
    if protocol == "cmc":
        rates = [float(r[1]) for r in read_rows(out / "cmc.csv")[1:]]
        assert rates == sorted(rates) and rates[-1] <= 1.0


def test_missing_prerequisite_exits_2(tmp_path, capsys):
    cfg = tiny_config(tmp_path, dataset="synth:easy")
    assert main(["train", "--config", str(cfg), "--stage", "prn"]) == 2
    assert "backbone.prnc" in capsys.readouterr().err


def test_combined_stage_needs_pair_variant(tmp_path):
    cfg = tiny_config(tmp_path, dataset="synth:easy", variant="model_a")
    assert main(["train", "--config", str(cfg), "--stage", "combined"]) == 2


def test_bad_config_exits_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key = 3\n")
    assert main(["train", "--config", str(cfg), "--stage", "backbone"]) == 2


def test_align_empty_directory_exits_2(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["align", "--images", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2
    assert main(["align", "--images", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_align_aligns_every_synthetic_face(workspace, tmp_path):
    out = tmp_path / "aligned"
    assert main(["align", "--images", str(workspace / "ds"), "--out", str(out), "--size", "48"]) == 0
    files = sorted(out.rglob("*.png"))
    assert len(files) == 120
    assert len(data.read_manifest(out / data.MANIFEST)) == 120
    for f in files[::17]:
        lms = read_landmarks(data.landmarks_path(f)).points
        eyes = lms[list(data.LEFT_EYE + data.RIGHT_EYE)].mean(axis=0)
        assert abs(eyes[1] - 0.30 * 48) < 0.5
        assert data.load_image(f).shape == (48, 48, 3)


def test_align_skips_unreadable_inputs(tmp_path):
    src = tmp_path / "imgs"
    src.mkdir()
    (src / "broken.png").write_bytes(b"not an image")
    img = np.zeros((40, 40, 3), dtype=np.uint8)
    data.save_image(src / "nolandmarks.png", img)
    assert main(["align", "--images", str(src), "--out", str(tmp_path / "o")]) == 1


def test_eval_missing_checkpoint_exits_2(tmp_path):
    argv = ["eval", "--checkpoint", str(tmp_path / "x.prnc"), "--protocol", "pairs", "--manifest", str(tmp_path / "p")]
    assert main(argv) == 2


def test_seed_override_from_environment(workspace, tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path, dataset=str(workspace / "ds"))
    monkeypatch.setenv("PRN_SEED", "5")
    assert main(["train", "--config", str(cfg), "--stage", "backbone"]) == 0
    saved = RunConfig.load(tmp_path / "run" / "backbone.prnc.config")
    assert saved.seed == 5
