import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml
from PIL import Image

from hfrae.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_RUNTIME, main
from hfrae.export import load_map_png16, save_map_png16
from hfrae.metrics import EvalReport, aupro, pixel_auroc, write_report_csv


def write_config(path, root, **train):
    cfg = {
        "backbone": {"architecture": "resnet18", "weights_source": "random", "allow_download": False},
        "train": {"epochs": 2, "batch_size": 4, "seed": 0, **train},
        "data": {"root": str(root), "kind": "mvtec", "categories": ["tiny"], "resolution": 32},
        "inference": {"sigma": 2.0},
    }
    path.write_text(yaml.safe_dump(cfg))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained_run(small_fixture, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp / "cfg.yaml", small_fixture)
    assert main(["train", "--config", str(cfg), "--out", str(tmp / "runs")]) == EXIT_OK
    (run_dir,) = (tmp / "runs").iterdir()
    return cfg, run_dir


def test_train_writes_run_directory(trained_run):
    _, run_dir = trained_run
    assert (run_dir / "config.yaml").is_file()
    target = run_dir / "tiny"
    for name in ("checkpoint.pt", "loss.csv", "metadata.json"):
        assert (target / name).is_file()
    assert len(read_csv(target / "loss.csv")) == 2
    meta = json.loads((target / "metadata.json").read_text())
    assert meta["seed"] == 0 and meta["config"]["data"]["resolution"] == 32
    assert meta["backbone_pretrained"] is False and len(meta["dataset_fingerprint"]) == 64


def test_config_echo_reproduces_run(trained_run, tmp_path):
    _, run_dir = trained_run
    echo = yaml.safe_load((run_dir / "config.yaml").read_text())
    assert echo["train"]["learning_rate"] == 0.4
    assert main(["train", "--config", str(run_dir / "config.yaml"), "--out", str(tmp_path)]) == EXIT_OK
    (rerun,) = tmp_path.iterdir()
    assert (rerun / "tiny" / "loss.csv").read_bytes() == (run_dir / "tiny" / "loss.csv").read_bytes()


def test_seed_flag_changes_run(trained_run, tmp_path):
    cfg, run_dir = trained_run
    assert main(["train", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path)]) == EXIT_OK
    (rerun,) = tmp_path.iterdir()
    assert yaml.safe_load((rerun / "config.yaml").read_text())["train"]["seed"] == 5
    assert (rerun / "tiny" / "loss.csv").read_bytes() != (run_dir / "tiny" / "loss.csv").read_bytes()


def test_eval_report_with_mean_row(trained_run, tmp_path, capsys):
    cfg, run_dir = trained_run
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(run_dir), "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "report.csv")
    assert [r["category"] for r in rows] == ["tiny", "Mean"]
    assert all(0 <= float(rows[0][k]) <= 1 for k in ("detection_auroc", "localization_auroc", "aupro"))
    scores = read_csv(tmp_path / "tiny" / "scores.csv")
    assert len(scores) == 7 and {s["label"] for s in scores} == {"normal", "anomalous"}
    assert (tmp_path / "tiny" / "roc.csv").is_file() and (tmp_path / "tiny" / "pro.csv").is_file()
    assert "Mean" in capsys.readouterr().out


def test_eval_refuses_other_backbone_weights(trained_run, tmp_path, capsys):
    cfg, run_dir = trained_run
    code = main(["eval", "--config", str(cfg), "--set", "backbone.weights_source=random:3",
                 "--checkpoint", str(run_dir / "tiny" / "checkpoint.pt"), "--out", str(tmp_path)])
    assert code == EXIT_CONFIG
    assert "hash mismatch" in capsys.readouterr().err


def test_infer_directory_of_three(trained_run, tmp_path):
    _, run_dir = trained_run
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        Image.fromarray(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)).save(imgs / f"{i}.png")
    out = tmp_path / "out"
    assert main(["infer", "--checkpoint", str(run_dir / "tiny" / "checkpoint.pt"), "--out", str(out), str(imgs)]) == EXIT_OK
    rows = read_csv(out / "scores.csv")
    assert len(rows) == 3
    assert len(list((out / "maps").glob("*.png"))) == 3
    for r in rows:
        stem = r["image_path"].rsplit("/", 1)[-1][:-4]
        raw = np.load(out / "maps" / f"{stem}.npy")
        assert float(r["score"]) == raw.max()
        q = load_map_png16(out / "maps" / f"{stem}.png")
        assert q.shape == (32, 32) and np.abs(q - raw).max() < 1e-3 * raw.max() + 1e-12


def test_infer_same_image_twice_and_blank(trained_run, tmp_path):
    _, run_dir = trained_run
    img = tmp_path / "x.png"
    Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(img)
    ck = str(run_dir / "tiny" / "checkpoint.pt")
    assert main(["infer", "--checkpoint", ck, "--out", str(tmp_path / "a"), str(img)]) == EXIT_OK
    assert main(["infer", "--checkpoint", ck, "--out", str(tmp_path / "b"), str(img)]) == EXIT_OK
    a = read_csv(tmp_path / "a" / "scores.csv")[0]["score"]
    b = read_csv(tmp_path / "b" / "scores.csv")[0]["score"]
    assert a == b and np.isfinite(float(a))


def test_visualize_writes_overlays(trained_run, small_fixture, tmp_path):
    _, run_dir = trained_run
    img = next((small_fixture / "tiny" / "test" / "blob").glob("*.png"))
    out = tmp_path / "vis"
    assert main(["visualize", "--checkpoint", str(run_dir / "tiny" / "checkpoint.pt"), "--out", str(out), str(img)]) == EXIT_OK
    overlay = Image.open(out / "overlays" / f"{img.stem}.png")
    assert overlay.size == (32, 32) and overlay.mode == "RGB"


def test_infer_partial_and_total_failure(trained_run, tmp_path):
    _, run_dir = trained_run
    ck = str(run_dir / "tiny" / "checkpoint.pt")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"nope")
    good = tmp_path / "good.png"
    Image.fromarray(np.full((32, 32, 3), 128, np.uint8)).save(good)
    assert main(["infer", "--checkpoint", ck, "--out", str(tmp_path / "p"), str(bad), str(good)]) == EXIT_OK
    assert len(read_csv(tmp_path / "p" / "scores.csv")) == 1
    assert main(["infer", "--checkpoint", ck, "--out", str(tmp_path / "f"), str(bad)]) == EXIT_RUNTIME


def test_missing_data_root_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("backbone:\n  weights_source: random\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
    assert "data.root" in capsys.readouterr().err


def test_unknown_field_exit_2(small_fixture, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", small_fixture)
    assert main(["train", "--config", str(cfg), "--set", "train.epoch=3"]) == EXIT_CONFIG
    assert "epoch" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg), "--set", "train.epochs=0"]) == EXIT_CONFIG


def test_missing_dataset_exit_3(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", tmp_path / "nowhere")
    args = ["train", "--config", str(cfg), "--set", "data.categories=[bottle]", "--out", str(tmp_path / "r")]
    assert main(args) == EXIT_DATA


def test_missing_weights_exit_3(small_fixture, tmp_path, monkeypatch):
    monkeypatch.setenv("HFRAE_WEIGHTS_DIR", str(tmp_path))
    cfg = write_config(tmp_path / "c.yaml", small_fixture)
    code = main(["train", "--config", str(cfg), "--set", "backbone.weights_source=imagenet", "--out", str(tmp_path / "r")])
    assert code == EXIT_DATA


def test_make_fixture_command(tmp_path):
    args = ["make-fixture", "--out", str(tmp_path), "--n-train", "2", "--n-good", "1", "--n-defect", "2", "--image-size", "32"]
    assert main(args) == EXIT_OK
    assert len(list((tmp_path / "synthetic" / "train" / "good").glob("*.png"))) == 2


def test_benchmark_command(small_fixture, tmp_path):
    cfg = write_config(tmp_path / "c.yaml", small_fixture, epochs=1)
    assert main(["benchmark", "--config", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_OK
    (run_dir,) = (tmp_path / "r").iterdir()
    assert read_csv(run_dir / "report.csv")[-1]["category"] == "Mean"


def test_perfect_maps_report_row(tmp_path):
    masks = [np.zeros((8, 8), bool) for _ in range(2)]
    masks[0][2:5, 2:5] = True
    maps = [m.astype(float) for m in masks]
    report = EvalReport("perfect", 1.0, pixel_auroc(maps, masks), aupro(maps, masks).aupro)
    rows = read_csv(write_report_csv([report], tmp_path / "r.csv"))
    assert rows[0]["aupro"] == "1.000" and rows[-1]["category"] == "Mean"


def test_png16_round_trip(tmp_path):
    m = np.linspace(0, 0.02, 64).reshape(8, 8)
    p = save_map_png16(m, tmp_path / "m.png", 0.02)
    assert np.asarray(Image.open(p)).dtype == np.uint16
    np.testing.assert_allclose(load_map_png16(p), m, atol=0.02 / 65535)


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "hfrae.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "eval", "infer", "visualize", "benchmark", "make-fixture"):
        assert cmd in out.stdout
