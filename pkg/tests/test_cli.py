import filecmp
from pathlib import Path

import numpy as np
import pytest

from cellprop.cli import EXIT_INPUT, main
from cellprop.detector import NetConfig, build_network
from cellprop.pngio import read_labels, write_image8, write_labels

SMALL_SPEC = "size = 32\ncount_range = 1, 3\nradius_range = 4.0, 5.5\nmin_separation = 7.0\n"
SMALL_NET = "depth = 2\nbase_channels = 4\ninput_size = 32\nbatch_size = 2\n"


def tree(root):
    return sorted(p.relative_to(root) for p in Path(root).rglob("*") if p.is_file())


def test_synth_zero_count_writes_manifest_only(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--count", "0", "--seed", "1"]) == 0
    files = [str(p) for p in tree(tmp_path / "d")]
    assert "manifest.txt" in files
    assert not any(f.endswith(".png") for f in files)


def test_synth_rerun_bit_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--count", "3", "--seed", "7"]) == 0
    files = [p for p in tree(tmp_path / "a") if p.name != "manifest.txt"]
    assert len([p for p in files if p.suffix == ".png"]) == 6
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", [str(p) for p in files], shallow=False)
    assert not mismatch and not errors


def test_synth_impossible_spec(tmp_path, capsys):
    spec = tmp_path / "spec.txt"
    spec.write_text("count_range = 30, 30\nmin_separation = 40\n")
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d"), "--count", "1"]) == EXIT_INPUT
    assert "could only place" in capsys.readouterr().err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.txt"
    spec.write_text(SMALL_SPEC)
    cfg = root / "net.txt"
    cfg.write_text(SMALL_NET)
    assert main(["synth", "--spec", str(spec), "--out", str(root / "data"), "--count", "2", "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset):
    model = dataset / "model.bin"
    args = ["train", "--config", str(dataset / "net.txt"), "--data", str(dataset / "data"),
            "--out", str(model), "--steps", "200", "--seed", "5"]
    assert main(args) == 0
    return model, args


def test_train_loss_decreases(trained):
    model, _ = trained
    lines = model.with_name(model.name + ".loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 201
    losses = [float(line.split(",")[1]) for line in lines[1:]]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    manifest = model.with_name(model.name + ".manifest.txt").read_text()
    assert "config.steps = 200" in manifest and "seed = 5" in manifest


def test_train_rerun_same_checksum(trained, tmp_path):
    model, args = trained
    again = tmp_path / "again.bin"
    assert main(args[:-4] + ["--out", str(again)] + args[-4:]) == 0
    assert model.read_bytes() == again.read_bytes()


def test_train_missing_annotation(dataset, tmp_path, capsys):
    data = tmp_path / "data"
    (data / "images").mkdir(parents=True)
    (data / "annotations").mkdir()
    write_image8(data / "images" / "x.png", np.zeros((32, 32)))
    code = main(["train", "--config", str(dataset / "net.txt"), "--data", str(data), "--out", str(tmp_path / "m.bin")])
    assert code == EXIT_INPUT
    assert "missing annotation" in capsys.readouterr().err


def test_segment_blank_image_gives_empty_labeling(tmp_path):
    net = build_network(NetConfig(base_channels=2, input_size=32))
    net.params[-1]["bias"][:] = -5.0  # likelihood clamps to zero everywhere
    net.save(tmp_path / "m.bin")
    write_image8(tmp_path / "blank.png", np.full((32, 32), 0.5))
    out = tmp_path / "out"
    assert main(["segment", "--model", str(tmp_path / "m.bin"), "--image", str(tmp_path / "blank.png"),
                 "--out", str(out)]) == 0
    labels = read_labels(out / "labels" / "blank.png")
    assert labels.shape == (32, 32) and not labels.any()
    assert "warning = blank: no cells detected" in (out / "manifest.txt").read_text()


def test_segment_trained_model_runs(trained, dataset, tmp_path):
    model, _ = trained
    out = tmp_path / "out"
    assert main(["segment", "--model", str(model), "--image", str(dataset / "data" / "images"),
                 "--out", str(out), "--jobs", "1"]) == 0
    assert len(list((out / "labels").glob("*.png"))) == 2
    assert len((out / "report.txt").read_text().splitlines()) == 2


def test_segment_corrupt_model(tmp_path):
    (tmp_path / "m.bin").write_bytes(b"not a model")
    write_image8(tmp_path / "x.png", np.zeros((32, 32)))
    assert main(["segment", "--model", str(tmp_path / "m.bin"), "--image", str(tmp_path / "x.png"),
                 "--out", str(tmp_path / "o")]) == EXIT_INPUT


def labels_dir(root, name, arrays):
    d = root / name
    d.mkdir()
    for i, lab in enumerate(arrays):
        write_labels(d / f"img{i}.png", lab)
    return d


def read_rows(path):
    lines = Path(path).read_text().splitlines()
    assert lines[0] == "image,metric,value"
    return {(a, b): float(c) for a, b, c in (line.split(",") for line in lines[1:])}


def two_cells():
    lab = np.zeros((20, 20), np.int64)
    lab[2:7, 2:7] = 1
    lab[10:16, 9:15] = 2
    return lab


def test_eval_identity(tmp_path):
    truth = labels_dir(tmp_path, "truth", [two_cells()])
    pred = labels_dir(tmp_path, "pred", [two_cells()])
    assert main(["eval", "--pred", str(pred), "--truth", str(truth), "--out", str(tmp_path / "s.csv")]) == 0
    rows = read_rows(tmp_path / "s.csv")
    assert rows[("ALL", "mDice")] == 1.0 and rows[("ALL", "F-measure")] == 1.0
    assert (tmp_path / "s.txt").exists() and (tmp_path / "s.manifest.txt").exists()


def test_eval_empty_prediction(tmp_path):
    truth = labels_dir(tmp_path, "truth", [two_cells()])
    pred = labels_dir(tmp_path, "pred", [np.zeros((20, 20), np.int64)])
    assert main(["eval", "--pred", str(pred), "--truth", str(truth), "--out", str(tmp_path / "s.csv")]) == 0
    rows = read_rows(tmp_path / "s.csv")
    assert rows[("ALL", "mDice")] == 0.0 and rows[("ALL", "F-measure")] == 0.0


def test_eval_four_pixel_case(tmp_path):
    truth = np.zeros((6, 6), np.int64)
    truth[1:3, 1:3] = 1
    pred = truth.copy()
    pred[2, 2] = 0
    pred[3, 1] = 1
    t = labels_dir(tmp_path, "truth", [truth])
    p = labels_dir(tmp_path, "pred", [pred])
    assert main(["eval", "--pred", str(p), "--truth", str(t), "--out", str(tmp_path / "s.csv")]) == 0
    rows = read_rows(tmp_path / "s.csv")
    assert rows[("img0", "mDice")] == 0.75


def test_eval_unpaired(tmp_path, capsys):
    t = labels_dir(tmp_path, "truth", [two_cells(), two_cells()])
    p = labels_dir(tmp_path, "pred", [two_cells()])
    assert main(["eval", "--pred", str(p), "--truth", str(t), "--out", str(tmp_path / "s.csv")]) == EXIT_INPUT
    assert "img1.png" in capsys.readouterr().err
