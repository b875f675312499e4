import csv
import json
import os

import numpy as np
import pytest

from ililt.cli import LOCK_NAME, main
from ililt.raster import GrayImage, load_png, save_png

SMALL_BOUNDS = {"side": 64, "margin": 64.0, "min_width": 40.0, "max_width": 160.0, "min_space": 48.0, "max_rects": 2}
SMALL_BACKBONE = {"patch_size": 16, "modes": 4, "channels": 4, "pool": 2}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error: ")
    return json.loads(err[len("error: ") :])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    k = root / "k.bin"
    assert main(["gen-kernels", "--out", str(k), "--n", "2", "--size", "9", "--sigma-nm", "16", "--seed", "1"]) == 0
    dcfg = write_json(root / "d.json", {"bounds": SMALL_BOUNDS, "ilt": {"max_iters": 5}})
    assert main(["gen-dataset", "--out", str(root / "ds"), "--n", "2", "--kernels", str(k), "--config", dcfg, "--seed", "3"]) == 0
    tcfg = write_json(root / "t.json", {"backbone": SMALL_BACKBONE, "T": 2, "epochs": 1})
    assert main(["train", "--dataset", str(root / "ds"), "--out", str(root / "run"), "--config", tcfg, "--seed", "0"]) == 0
    return root


def test_gen_kernels_writes_config(pipeline):
    cfg = json.loads((pipeline / "gen-kernels.config.json").read_text())
    assert cfg == {"seed": 1, "n": 2, "size": 9, "sigma_nm": 16.0, "pixel_size": 8.0}
    assert (pipeline / "k.bin.json").exists()


def test_dataset_and_train_outputs(pipeline):
    assert (pipeline / "ds" / "manifest.json").exists()
    assert (pipeline / "run" / "model.bin").exists()
    report = json.loads((pipeline / "run" / "report.json").read_text())
    assert len(report["epoch_loss"]) == 1
    resolved = json.loads((pipeline / "run" / "train.config.json").read_text())
    assert resolved["lr"] == 0.004 and resolved["backbone"]["channels"] == 4
    assert not (pipeline / "run" / LOCK_NAME).exists()


def test_eval_csv(pipeline, capsys):
    out = pipeline / "eval" / "metrics.csv"
    os.makedirs(out.parent, exist_ok=True)
    assert main(["eval", "--dataset", str(pipeline / "ds"), "--ckpt", str(pipeline / "run" / "model.bin"), "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["tile_id", "EPE", "PVB", "Throughput"] and len(rows) == 4
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(printed) == {"EPE", "PVB", "Throughput"}


def test_infer_dataset_and_single(pipeline):
    ckpt = str(pipeline / "run" / "model.bin")
    assert main(["infer", "--dataset", str(pipeline / "ds"), "--ckpt", ckpt, "--out", str(pipeline / "inf"), "--t-max", "3"]) == 0
    res = json.loads((pipeline / "inf" / "residuals.json").read_text())
    assert len(res) == 2 and all(len(r) == 3 for r in res.values())
    design = pipeline / "ds" / "designs" / "tile_00000.png"
    out = pipeline / "inf1"
    assert main(["infer", "--design", str(design), "--kernels", str(pipeline / "k.bin"), "--ckpt", ckpt, "--out", str(out)]) == 0
    assert load_png(out / "tile_00000_mask.png").shape == (64, 64)


def test_simulate(pipeline):
    out = pipeline / "sim"
    design = pipeline / "ds" / "designs" / "tile_00000.png"
    assert main(["simulate", "--mask", str(design), "--kernels", str(pipeline / "k.bin"), "--out", str(out)]) == 0
    wafer = load_png(out / "wafer.png").data
    assert set(np.unique(wafer)) <= {0.0, 1.0} and (out / "intensity.png").exists()


def test_ilt(pipeline):
    out = pipeline / "ilt"
    design = pipeline / "ds" / "designs" / "tile_00001.png"
    cfg = write_json(pipeline / "ilt.json", {"snapshot_every": 2})
    assert main(["ilt", "--design", str(design), "--kernels", str(pipeline / "k.bin"), "--out", str(out), "--iters", "4", "--config", cfg]) == 0
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "iter,loss" and len(lines) == 5
    assert sorted(p.name for p in out.glob("snapshot_*.png")) == ["snapshot_00000.png", "snapshot_00002.png"]


def test_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "composite_3layer" in out and "FAIL" not in out


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as err:
        main(["gradcheck", "--bogus"])
    assert err.value.code != 0


def test_missing_input_error_line(tmp_path, capsys):
    code = main(["simulate", "--mask", str(tmp_path / "nope.png"), "--kernels", str(tmp_path / "k.bin"), "--out", str(tmp_path / "o")])
    assert code == 1
    err = error_line(capsys)
    assert err["command"] == "simulate" and err["type"] == "FileNotFoundError"


def test_failure_cleans_partial_outputs(pipeline, tmp_path, capsys, monkeypatch):
    import ililt.model

    real_infer, calls = ililt.model.infer, []

    def flaky(*a, **kw):
        calls.append(1)
        if len(calls) == 2:
            raise ValueError("injected failure on the second tile")
        return real_infer(*a, **kw)

    monkeypatch.setattr(ililt.model, "infer", flaky)
    out = tmp_path / "partial"
    code = main(["infer", "--dataset", str(pipeline / "ds"), "--ckpt", str(pipeline / "run" / "model.bin"), "--out", str(out)])
    assert code == 1 and error_line(capsys)["type"] == "ValueError"
    assert len(calls) == 2 and not out.exists()


def test_failure_keeps_preexisting_files(pipeline, tmp_path, capsys):
    out = tmp_path / "existing"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    save_png(GrayImage(np.zeros((40, 40)), 8.0), tmp_path / "odd.png")
    code = main(["infer", "--design", str(tmp_path / "odd.png"), "--kernels", str(pipeline / "k.bin"), "--ckpt", str(pipeline / "run" / "model.bin"), "--out", str(out)])
    assert code == 1 and error_line(capsys)["type"] == "ValueError"
    assert sorted(p.name for p in out.iterdir()) == ["keep.txt"]


def test_lock_file_blocks_second_run(pipeline, tmp_path, capsys):
    out = tmp_path / "locked"
    out.mkdir()
    (out / LOCK_NAME).write_text("123")
    code = main(["simulate", "--mask", str(pipeline / "ds" / "designs" / "tile_00000.png"), "--kernels", str(pipeline / "k.bin"), "--out", str(out)])
    assert code == 1 and "locked" in error_line(capsys)["message"]
    assert (out / LOCK_NAME).exists() and not (out / "wafer.png").exists()


def test_bad_config(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", [1, 2])
    assert main(["gradcheck", "--config", cfg]) == 1
    assert error_line(capsys)["type"] == "CliError"
