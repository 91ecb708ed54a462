import json
import subprocess
import sys

import numpy as np
import pytest

from greedyfool.cli import main
from greedyfool.data import load_digits, read_jsonl, write_cifar_binary, write_idx
from greedyfool.report import read_csv

TRAIN = ["--epochs", "2", "--widths", "4,8", "--hidden", "16", "--batch-size", "16"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def mnist_dir(tmp_path_factory):
    """Small IDX dataset in the MNIST file layout, built from the bundled digits."""
    root = tmp_path_factory.mktemp("mnist")
    for split, prefix, n in (("train", "train", 300), ("test", "t10k", 80)):
        data = load_digits(split)
        write_idx(root / f"{prefix}-images-idx3-ubyte", np.rint(data.images[:n, 0]))
        write_idx(root / f"{prefix}-labels-idx1-ubyte", data.labels[:n])
    return root


@pytest.fixture(scope="module")
def trained(mnist_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    code = main(["train", "--dataset", "mnist", "--data-dir", str(mnist_dir), "--out", str(out),
                 "--seed", "7", *TRAIN])
    assert code == 0
    return out / "classifier.ckpt"


def test_train_writes_checkpoint_and_is_deterministic(capsys, mnist_dir, trained, tmp_path):
    code, out, _ = run(capsys, "train", "--dataset", "mnist", "--data-dir", mnist_dir,
                       "--out", tmp_path, "--seed", 7, *TRAIN)
    assert code == 0
    info = summary(out)
    assert info["status"] == "ok" and 0 <= info["test_accuracy"] <= 1
    assert (tmp_path / "classifier.ckpt").read_bytes() == trained.read_bytes()
    assert len(read_csv(tmp_path / "classifier_curve.csv")) == 2


def test_missing_dataset_fails(capsys, tmp_path):
    code, out, err = run(capsys, "train", "--dataset", "mnist", "--data-dir", tmp_path / "nope")
    assert code == 1 and "does not exist" in err and out == ""
    code, _, err = run(capsys, "train", "--dataset", "mnist")
    assert code == 1 and "--data-dir" in err


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["attack"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["attack", "--model", "m.ckpt", "--bogus"])
    assert e.value.code == 2


def test_attack_outputs(capsys, mnist_dir, trained, tmp_path):
    code, out, _ = run(capsys, "attack", "--dataset", "mnist", "--data-dir", mnist_dir,
                       "--model", trained, "--images", 3, "--eps", 255, "--dump", 2,
                       "--out", tmp_path)
    assert code == 0
    info = summary(out)
    assert info["fooling_rate"] == 100 and info["attempted"] == 3
    records = list(read_jsonl(tmp_path / "results.jsonl"))
    assert len(records) == 3 and all(r["success"] for r in records)
    assert {"image_id", "pixel_count", "eps", "kappa"} <= set(records[0])
    for name in ("static.csv", "static.png", "examples.png"):
        assert (tmp_path / name).exists()
    assert len(list((tmp_path / "images").iterdir())) == 2


def test_attack_target_class(capsys, mnist_dir, trained, tmp_path):
    code, out, _ = run(capsys, "attack", "--dataset", "mnist", "--data-dir", mnist_dir,
                       "--model", trained, "--images", 3, "--target-class", 3, "--out", tmp_path)
    assert code == 0 and summary(out)["kind"] == "target"
    for r in list(read_jsonl(tmp_path / "results.jsonl")):
        assert r["target"] == 3 and (not r["success"] or r["predicted"] == 3)


def test_kappa_with_reduce_warns(capsys, mnist_dir, trained, tmp_path):
    code, out, err = run(capsys, "attack", "--dataset", "mnist", "--data-dir", mnist_dir,
                         "--model", trained, "--images", 2, "--kappa", 1, "--reduce",
                         "--out", tmp_path)
    assert code == 0 and "reduce stage is skipped" in err
    assert summary(out)["reduce"] is False
    assert all(r["iterations"]["stage2"] == 0 for r in list(read_jsonl(tmp_path / "results.jsonl")))


def test_config_file_and_flag_precedence(capsys, mnist_dir, trained, tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(f"dataset: mnist\ndata-dir: {mnist_dir}\nimages: 2\neps: 100\nmax-iter: 50\n")
    code, out, _ = run(capsys, "attack", "--config", cfg, "--model", trained, "--eps", 255,
                       "--out", tmp_path / "o")
    info = summary(out)
    assert code == 0 and info["eps"] == 255 and info["attempted"] == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epz": 3}))
    with pytest.raises(SystemExit) as e:
        main(["attack", "--config", str(bad), "--model", str(trained)])
    assert e.value.code == 2


def test_shape_mismatch_rejected(capsys, trained, tmp_path):
    cifar = tmp_path / "cifar"
    cifar.mkdir()
    code, _, err = run(capsys, "attack", "--dataset", "cifar10", "--data-dir", cifar,
                       "--model", trained, "--out", tmp_path)
    assert code == 1 and "test_batch.bin" in err
    rng = np.random.default_rng(0)
    write_cifar_binary(cifar / "test_batch.bin", rng.integers(0, 256, (4, 3, 32, 32)),
                       rng.integers(0, 10, 4))
    code, _, err = run(capsys, "attack", "--dataset", "cifar10", "--data-dir", cifar,
                       "--model", trained, "--out", tmp_path)
    assert code == 1 and "expects images (1, 28, 28)" in err


def test_ablate_direction_and_components(capsys, mnist_dir, trained, tmp_path):
    base = ["--dataset", "mnist", "--data-dir", mnist_dir, "--model", trained, "--images", 2,
            "--eps", 255]
    code, out, _ = run(capsys, "ablate", *base, "--mode", "direction", "--q", "0,100",
                       "--emit-plot-data", "--out", tmp_path)
    assert code == 0
    rows = read_csv(tmp_path / "direction.csv")
    assert [float(r["q"]) for r in rows] == [0.0, 100.0]
    triples = list(read_jsonl(tmp_path / "direction_plot.jsonl"))
    assert set(triples[0]) == {"q", "cosine", "mean_pixels"}
    code, _, err = run(capsys, "ablate", *base, "--out", tmp_path)
    assert code == 1 and "needs --distortion" in err
    code, out, _ = run(capsys, "ablate", *base, "--distortion", "variance",
                       "--detector-epochs", 1, "--out", tmp_path)
    assert code == 0
    assert [r["variant"] for r in read_csv(tmp_path / "components.csv")] == [
        "Incr", "Incr+Reduce", "Incr+Dis", "Incr+Reduce+Dis"]


def test_evaluate_transfer(capsys, mnist_dir, trained, tmp_path):
    code, out, _ = run(capsys, "evaluate", "--dataset", "mnist", "--data-dir", mnist_dir,
                       "--model", trained, "--transfer", trained, "--images", 2,
                       "--kappa-grid", "0..1", "--eps", 255, "--out", tmp_path)
    assert code == 0
    rows = read_csv(tmp_path / "transfer.csv")
    assert [r["kappa"] for r in rows] == ["0.0", "1.0"]
    assert all(float(r["transfer_classifier"]) == 100 for r in rows)
    assert (tmp_path / "kappa.png").exists()


def test_distortion_train(capsys, mnist_dir, tmp_path):
    code, out, _ = run(capsys, "distortion-train", "--dataset", "mnist", "--data-dir", mnist_dir,
                       "--images", 20, "--epochs", 1, "--width", 4, "--lambda", 1e-5,
                       "--delta", 0.0314, "--maps", 2, "--out", tmp_path)
    assert code == 0 and summary(out)["delta"] == 0.0314
    assert (tmp_path / "generator.ckpt").exists()
    assert len(list((tmp_path / "maps").glob("rho_*.png"))) == 2


def test_gan_distortion_needs_generator(capsys, mnist_dir, trained, tmp_path):
    code, _, err = run(capsys, "attack", "--dataset", "mnist", "--data-dir", mnist_dir,
                       "--model", trained, "--images", 1, "--distortion", "gan", "--out", tmp_path)
    assert code == 1 and "--generator" in err


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "greedyfool", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    for cmd in ("train", "distortion-train", "attack", "evaluate", "ablate"):
        assert cmd in proc.stdout
