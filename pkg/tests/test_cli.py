import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from backend.main import build_parser, main
from backend.services import evaluation_service
from backend.services.autodiff import save_checkpoint
from backend.services.dataset_service import mask_to_pgm, read_pgm, write_pgm
from backend.services.training_service import TrainingService
from conftest import disk_mask
from shared.models import Arm, TrainConfig

STAR_FLAGS = ["--num-lines", "8", "--points-per-line", "16", "--radius", "14"]
GEN_FLAGS = ["--height", "32", "--width", "32", "--harmonic-amplitude", "0.05", "--delta", "3", *STAR_FLAGS]
TRAIN_FLAGS = [
    "--batch", "2", "--iters", "2", "--noise-samples", "2", "--inner-steps", "2", "--delta", "2",
    "--window", "3", "--eval-every", "1", "--depth", "1", "--base-channels", "2",
    "--approx-base-channels", "2", "--lr", "0.001", *STAR_FLAGS,
]


def gen_data(data_dir, seed=7, n_train=4, n_val=2):
    return main(["gen-data", "--quiet", "--data-dir", str(data_dir), "--seed", str(seed),
                 "--n-train", str(n_train), "--n-val", str(n_val), *GEN_FLAGS])


def train(data_dir, output_dir, *extra):
    return main(["train", "--quiet", "--data-dir", str(data_dir), "--output-dir", str(output_dir),
                 *TRAIN_FLAGS, *extra])


def files_under(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def cli_data(tmp_path):
    data_dir = tmp_path / "data"
    assert gen_data(data_dir) == 0
    return data_dir


@pytest.fixture
def trained_run(tmp_path, cli_data):
    output_dir = tmp_path / "run"
    assert train(cli_data, output_dir) == 0
    return output_dir


# gen-data
def test_gen_data_creates_nested_directories(tmp_path):
    data_dir = tmp_path / "deep" / "data"
    assert gen_data(data_dir, n_train=2, n_val=1) == 0
    assert (data_dir / "manifest.json").exists()
    assert "n_train=2" in (data_dir / "resolved-config.txt").read_text().splitlines()
    assert len(list(data_dir.rglob("*.pgm"))) == 6


def test_gen_data_is_byte_identical_for_a_seed(tmp_path):
    assert gen_data(tmp_path / "a", seed=3, n_train=2, n_val=1) == 0
    assert gen_data(tmp_path / "b", seed=3, n_train=2, n_val=1) == 0
    a, b = files_under(tmp_path / "a"), files_under(tmp_path / "b")
    # the resolved config records the data directory itself
    for files in (a, b):
        del files[Path("resolved-config.txt")]
    assert a == b


# train
def test_train_writes_its_artifacts(trained_run):
    for name in ("best.ckpt", "log.csv", "evals.json", "resolved-config.txt"):
        assert (trained_run / name).exists()
    log = pd.read_csv(trained_run / "log.csv")
    assert list(log.columns) == ["iteration", "inner_loss", "outer_loss"]
    assert list(log["iteration"]) == [1, 2]
    evals = json.loads((trained_run / "evals.json").read_text())
    assert evals["best_iteration"] in (1, 2)
    assert [e["iteration"] for e in evals["evals"]] == [1, 2]


def test_train_with_zero_iterations_writes_only_the_checkpoint(tmp_path, cli_data):
    output_dir = tmp_path / "run0"
    assert train(cli_data, output_dir, "--iters", "0") == 0
    assert (output_dir / "best.ckpt").exists()
    assert not (output_dir / "log.csv").exists()
    assert not (output_dir / "evals.json").exists()


def test_train_is_reproducible(tmp_path, cli_data):
    for name in ("r1", "r2"):
        assert train(cli_data, tmp_path / name, "--arm", "unet") == 0
    for artifact in ("best.ckpt", "log.csv", "evals.json"):
        assert (tmp_path / "r1" / artifact).read_bytes() == (tmp_path / "r2" / artifact).read_bytes()


def test_train_size_larger_than_dataset_is_a_config_error(tmp_path, cli_data):
    assert train(cli_data, tmp_path / "big", "--train-size", "50") == 2


def test_train_without_dataset_is_a_data_error(tmp_path):
    assert train(tmp_path / "missing", tmp_path / "run") == 3


# Configuration layering
def test_flags_override_config_file(tmp_path, cli_data):
    config = tmp_path / "run.txt"
    config.write_text("# quick run\nsigma=0.5\nseed=5\n")
    output_dir = tmp_path / "layered"
    assert train(cli_data, output_dir, "--config", str(config), "--seed", "6") == 0
    lines = (output_dir / "resolved-config.txt").read_text().splitlines()
    assert "seed=6" in lines
    assert "sigma=0.5" in lines
    assert "iters=2" in lines
    assert "edge_polarity=as-printed" in lines


def test_unknown_config_key_is_rejected(tmp_path, cli_data):
    config = tmp_path / "bad.txt"
    config.write_text("learning_speed=3\n")
    assert train(cli_data, tmp_path / "x", "--config", str(config)) == 2


def test_invalid_flag_value_is_rejected(tmp_path, cli_data):
    assert train(cli_data, tmp_path / "x", "--window", "4") == 2
    assert train(cli_data, tmp_path / "x", "--edge-polarity", "sideways") == 2


def test_unknown_flag_exits_with_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag", "1"])
    assert exc.value.code == 2


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "--points-per-line" in text
    assert "(default: 32)" in text
    assert "(default: as-printed)" in text


def test_every_command_is_registered():
    actions = [a for a in build_parser()._actions if a.dest == "command"]
    assert set(actions[0].choices) == {"gen-data", "train", "eval", "segment", "ablate", "jitter"}


# eval
def test_eval_is_repeatable_and_uses_the_checkpoint_arm(tmp_path, cli_data, trained_run):
    outputs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        assert main(["eval", "--quiet", "--data-dir", str(cli_data), "--output-dir", str(out),
                     "--checkpoint", str(trained_run / "best.ckpt"), *TRAIN_FLAGS]) == 0
        outputs.append((out / "eval-val.json").read_bytes())
    assert outputs[0] == outputs[1]
    report = json.loads(outputs[0])
    assert len(report["samples"]) == 2
    assert 0.0 <= report["dice_mean"] <= 1.0


def test_eval_on_the_train_split(tmp_path, cli_data, trained_run):
    out = tmp_path / "e"
    assert main(["eval", "--quiet", "--data-dir", str(cli_data), "--output-dir", str(out), "--split", "train",
                 "--checkpoint", str(trained_run / "best.ckpt"), *TRAIN_FLAGS]) == 0
    assert len(json.loads((out / "eval-train.json").read_text())["samples"]) == 4


def test_eval_with_a_broken_checkpoint(tmp_path, cli_data):
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"not a checkpoint")
    assert main(["eval", "--data-dir", str(cli_data), "--checkpoint", str(bogus),
                 "--output-dir", str(tmp_path / "e")]) == 3


# segment
def identity_checkpoint(path):
    """Depth-1 network whose output map is image - 0.5."""
    model = TrainingService(TrainConfig(depth=1, base_channels=2, approx_base_channels=2), progress=False).init_model(Arm.EDPCNN)
    for tensor in model.seg.tensors.values():
        tensor.values = np.zeros_like(tensor.values)
    for name in ("enc0.conv1.w", "enc0.conv2.w", "dec0.conv1.w", "dec0.conv2.w"):
        model.seg.tensors[name].values[0, 0, 1, 1] = 1.0
    model.seg.tensors["head.w"].values[0, 0, 0, 0] = 1.0
    model.seg.tensors["head.b"].values[0] = -0.5
    save_checkpoint(path, model.checkpoint_arrays())


def test_segment_traces_a_disk(tmp_path):
    checkpoint = tmp_path / "identity.ckpt"
    identity_checkpoint(checkpoint)
    image_path = tmp_path / "disk.pgm"
    write_pgm(image_path, mask_to_pgm(disk_mask((40, 40), (20, 20), 10.5)))
    out = tmp_path / "seg"

    assert main(["segment", "--quiet", "--checkpoint", str(checkpoint), "--image", str(image_path),
                 "--center", "20,20", "--output-dir", str(out),
                 "--num-lines", "8", "--points-per-line", "16", "--radius", "16"]) == 0

    contour = json.loads((out / "contour.json").read_text())
    assert contour["v"] == [11] * 8
    radii = [np.hypot(x - 20, y - 20) for x, y in contour["polygon"]]
    assert max(abs(r - 11) for r in radii) <= 1.0
    overlay = read_pgm(out / "overlay.pgm")
    assert overlay.shape == (40, 40)
    assert overlay[20, 31] == 255


def test_segment_needs_a_center(tmp_path):
    checkpoint = tmp_path / "identity.ckpt"
    identity_checkpoint(checkpoint)
    image_path = tmp_path / "disk.pgm"
    write_pgm(image_path, mask_to_pgm(disk_mask((40, 40), (20, 20), 10.5)))
    assert main(["segment", "--checkpoint", str(checkpoint), "--image", str(image_path),
                 "--output-dir", str(tmp_path / "seg")]) == 2
    assert main(["segment", "--checkpoint", str(checkpoint), "--image", str(image_path), "--center", "20",
                 "--output-dir", str(tmp_path / "seg")]) == 2


def test_segment_without_a_finite_contour_exits_with_numerical_error(tmp_path, monkeypatch):
    checkpoint = tmp_path / "identity.ckpt"
    identity_checkpoint(checkpoint)
    image_path = tmp_path / "disk.pgm"
    write_pgm(image_path, mask_to_pgm(disk_mask((40, 40), (20, 20), 10.5)))
    monkeypatch.setattr(evaluation_service, "orient_map", lambda g, polarity: np.full(np.shape(g), np.nan))
    assert main(["segment", "--quiet", "--checkpoint", str(checkpoint), "--image", str(image_path),
                 "--center", "20,20", "--output-dir", str(tmp_path / "seg"), *STAR_FLAGS]) == 4


def test_segment_with_an_unreadable_image(tmp_path):
    checkpoint = tmp_path / "identity.ckpt"
    identity_checkpoint(checkpoint)
    assert main(["segment", "--checkpoint", str(checkpoint), "--image", str(tmp_path / "none.pgm"),
                 "--center", "1,1", "--output-dir", str(tmp_path / "seg")]) == 3


# Protocols
def test_ablate_writes_table_and_chart(tmp_path, cli_data):
    out = tmp_path / "ablation"
    assert main(["ablate", "--quiet", "--data-dir", str(cli_data), "--output-dir", str(out),
                 "--sizes", "2,4", "--arms", "edpcnn,unet", *TRAIN_FLAGS, "--iters", "1"]) == 0
    table = pd.read_csv(out / "ablation.csv")
    assert len(table) == 4
    assert list(table["arm"]) == ["edpcnn", "unet", "edpcnn", "unet"]
    assert "ablation-chart" in (out / "ablation.html").read_text()


def test_jitter_writes_table_and_chart(tmp_path, cli_data, trained_run):
    assert main(["jitter", "--quiet", "--data-dir", str(cli_data), "--output-dir", str(trained_run),
                 "--fractions", "0,0.2", "--seeds", "2", *TRAIN_FLAGS]) == 0
    table = pd.read_csv(trained_run / "jitter.csv")
    assert list(table["fraction"]) == [0.0, 0.2]
    assert (table["seeds"] == 2).all()
    assert (trained_run / "jitter.html").exists()


@pytest.mark.slow
def test_default_gen_data(tmp_path):
    data_dir = tmp_path / "data"
    assert main(["gen-data", "--quiet", "--data-dir", str(data_dir), "--workers", "4"]) == 0
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert len(manifest["entries"]) == 260
    assert len(list(data_dir.rglob("*.pgm"))) == 520
