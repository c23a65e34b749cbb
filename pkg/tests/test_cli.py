import os

import numpy as np
import pytest
from PIL import Image

import tgvseg.ops
from tgvseg.cli import main
from tgvseg.data import Sample, save_dataset, synth_blobs


def run_cli(*argv):
    return main(list(argv))


SMOKE = [
    "--synthetic", "6", "--size", "16", "--depth", "2", "--base-channels", "2",
    "--epochs", "2", "--lr", "1e-3", "--batch-size", "2", "--seed", "4",
]


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run_cli("train", *SMOKE, "--out", str(out))
    assert code == 0
    return out


class TestTrain:
    def test_outputs_exist(self, trained_run):
        for name in ("curve.csv", "manifest.ini", "best.ckpt", "final.ckpt"):
            assert (trained_run / name).exists()

    def test_curve_schema(self, trained_run):
        lines = (trained_run / "curve.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr,dice,iou"
        assert len(lines) == 3  # header + 2 epochs

    def test_zero_epochs_valid_run(self, tmp_path):
        out = tmp_path / "zero"
        code = run_cli(
            "train", "--synthetic", "6", "--size", "16", "--depth", "2",
            "--base-channels", "2", "--epochs", "0", "--batch-size", "2",
            "--out", str(out),
        )
        assert code == 0
        lines = (out / "curve.csv").read_text().strip().splitlines()
        assert lines == ["epoch,train_loss,val_loss,lr,dice,iou"]

    def test_missing_dataset_is_config_error(self, tmp_path):
        code = run_cli("train", "--epochs", "1", "--out", str(tmp_path / "x"))
        assert code == 1

    def test_determinism_byte_identical(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run_cli("train", *SMOKE, "--out", str(out_a)) == 0
        assert run_cli("train", *SMOKE, "--out", str(out_b)) == 0
        assert (out_a / "curve.csv").read_bytes() == (out_b / "curve.csv").read_bytes()
        assert (out_a / "final.ckpt").read_bytes() == (out_b / "final.ckpt").read_bytes()

    def test_manifest_relaunch_identical(self, trained_run, tmp_path):
        out2 = tmp_path / "relaunch"
        code = run_cli("train", "--config", str(trained_run / "manifest.ini"), "--out", str(out2))
        assert code == 0
        assert (out2 / "curve.csv").read_bytes() == (trained_run / "curve.csv").read_bytes()
        assert (out2 / "final.ckpt").read_bytes() == (trained_run / "final.ckpt").read_bytes()

    def test_kfold(self, tmp_path):
        out = tmp_path / "kf"
        code = run_cli(
            "train", "--synthetic", "8", "--size", "16", "--depth", "2",
            "--base-channels", "2", "--epochs", "1", "--batch-size", "2",
            "--kfold", "--config", _folds_config(tmp_path), "--out", str(out),
        )
        assert code == 0
        summary = (out / "kfold_summary.csv").read_text().strip().splitlines()
        assert summary[0].startswith("fold,")
        assert len(summary) == 1 + 4 + 1  # header + folds + mean
        for k in range(4):
            assert (out / f"fold{k}" / "best.ckpt").exists()


def _folds_config(tmp_path) -> str:
    path = tmp_path / "folds.ini"
    path.write_text("[training]\nfolds = 4\n")
    return str(path)


class TestEval:
    def test_eval_after_train(self, trained_run, tmp_path):
        out = tmp_path / "ev"
        code = run_cli(
            "eval", "--checkpoint", str(trained_run / "best.ckpt"),
            "--synthetic", "6", "--size", "16", "--seed", "4", "--out", str(out),
        )
        assert code == 0
        text = (out / "metrics.csv").read_text()
        assert text.splitlines()[0].startswith("dataset,combo,threshold")
        assert (out / "metrics.txt").exists()

    def test_threshold_zero_like_gives_full_recall(self, trained_run, tmp_path):
        # threshold just above 0: everything predicted positive
        out = tmp_path / "ev0"
        code = run_cli(
            "eval", "--checkpoint", str(trained_run / "best.ckpt"),
            "--synthetic", "6", "--size", "16", "--seed", "4",
            "--threshold", "1e-9", "--out", str(out),
        )
        assert code == 0
        row = (out / "metrics.csv").read_text().strip().splitlines()[1].split(",")
        recall = float(row[6])
        assert recall == 1.0

    def test_corrupted_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        code = run_cli("eval", "--checkpoint", str(bad), "--synthetic", "4", "--size", "16")
        assert code == 2

    def test_combo_eval(self, trained_run, tmp_path):
        root = tmp_path / "threesrc"
        samples = []
        for src in ("alpha", "beta", "gamma"):
            for s in synth_blobs(4, 16, seed=hash(src) % 100):
                samples.append(Sample(image=s.image, mask=s.mask, source=src,
                                      volume_id=f"{src}_vol"))
        save_dataset(samples, root)
        out = tmp_path / "combo"
        code = run_cli(
            "eval", "--checkpoint", str(trained_run / "best.ckpt"),
            "--data", str(root), "--combo", "alpha=0.5,beta=0.25,gamma=0.25",
            "--combo-total", "8", "--out", str(out),
        )
        assert code == 0
        row = (out / "metrics.csv").read_text().strip().splitlines()[1]
        assert "alpha=0.5" in row


class TestPredict:
    def test_masks_written(self, trained_run, tmp_path):
        img_path = tmp_path / "probe.png"
        arr = (synth_blobs(1, 16, seed=8)[0].image * 255).astype(np.uint8)
        Image.fromarray(arr, "L").save(img_path)
        out = tmp_path / "pred"
        code = run_cli(
            "predict", "--checkpoint", str(trained_run / "best.ckpt"),
            "--out", str(out), "--overlay", str(img_path),
        )
        assert code == 0
        assert (out / "probe_mask.png").exists()
        assert (out / "probe_overlay.png").exists()
        mask = np.asarray(Image.open(out / "probe_mask.png"))
        assert set(np.unique(mask)) <= {0, 255}

    def test_blank_input_no_crash(self, trained_run, tmp_path):
        img_path = tmp_path / "blank.png"
        Image.fromarray(np.zeros((16, 16), dtype=np.uint8), "L").save(img_path)
        out = tmp_path / "pred2"
        code = run_cli(
            "predict", "--checkpoint", str(trained_run / "best.ckpt"),
            "--out", str(out), str(img_path),
        )
        assert code == 0
        assert (out / "blank_mask.png").exists()

    def test_indivisible_size_suggests_crop(self, trained_run, tmp_path, capsys):
        img_path = tmp_path / "odd.png"
        Image.fromarray(np.zeros((15, 16), dtype=np.uint8), "L").save(img_path)
        code = run_cli(
            "predict", "--checkpoint", str(trained_run / "best.ckpt"),
            "--out", str(tmp_path / "p3"), str(img_path),
        )
        assert code == 1
        assert "crop" in capsys.readouterr().err

    def test_unreadable_file_named(self, trained_run, tmp_path, capsys):
        bogus = tmp_path / "nope.png"
        bogus.write_text("not an image")
        code = run_cli(
            "predict", "--checkpoint", str(trained_run / "best.ckpt"),
            "--out", str(tmp_path / "p4"), str(bogus),
        )
        assert code == 2
        assert "nope.png" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_stock_build_passes(self, capsys):
        assert run_cli("gradcheck") == 0
        assert "PASS" in capsys.readouterr().out

    def test_loose_tolerance_superset(self):
        assert run_cli("gradcheck", "--tolerance", "1e-2") == 0

    def test_broken_backward_detected(self, monkeypatch):
        real_relu = tgvseg.ops.relu

        def corrupted(x):
            out = real_relu(x)
            if out._backward is not None:
                original = out._backward

                def doubled():
                    original()
                    if x.grad is not None:
                        x.grad *= 2.0

                out._backward = doubled
            return out

        monkeypatch.setattr(tgvseg.ops, "relu", corrupted)
        assert run_cli("gradcheck") == 1


class TestStats:
    def test_synthetic_stats(self, capsys):
        assert run_cli("stats", "--synthetic", "6", "--size", "16") == 0
        out = capsys.readouterr().out
        assert "pooled" in out and "synthetic" in out

    def test_half_black_half_white(self, tmp_path, capsys):
        img = np.zeros((8, 8))
        img[:4] = 1.0
        samples = [Sample(image=img, mask=np.zeros((8, 8), dtype=np.uint8),
                          source="bw", volume_id="v")]
        save_dataset(samples, tmp_path / "bw")
        assert run_cli("stats", "--data", str(tmp_path / "bw")) == 0
        out = capsys.readouterr().out
        assert "0.5000   0.5000" in out

    def test_multi_source_rows(self, tmp_path, capsys):
        samples = []
        for src in ("a", "b", "c"):
            for s in synth_blobs(2, 16, seed=ord(src)):
                samples.append(Sample(image=s.image, mask=s.mask, source=src,
                                      volume_id=src))
        save_dataset(samples, tmp_path / "multi")
        assert run_cli("stats", "--data", str(tmp_path / "multi")) == 0
        out = capsys.readouterr().out
        for src in ("a", "b", "c", "pooled"):
            assert any(line.startswith(src) for line in out.splitlines())

    def test_empty_dataset_nonzero_exit(self, tmp_path):
        (tmp_path / "empty" / "images").mkdir(parents=True)
        (tmp_path / "empty" / "masks").mkdir(parents=True)
        assert run_cli("stats", "--data", str(tmp_path / "empty")) == 2


class TestCompareUpsampling:
    def test_compare_run(self, tmp_path):
        out = tmp_path / "cmp"
        code = run_cli(
            "compare-upsampling", "--synthetic", "6", "--size", "16",
            "--depth", "2", "--base-channels", "2", "--epochs", "2",
            "--lr", "1e-3", "--batch-size", "2", "--seed", "4", "--out", str(out),
        )
        assert code == 0
        lines = (out / "compare.csv").read_text().strip().splitlines()
        assert lines[0] == "mode,final_dice,final_iou,checkerboard,wall_time_s"
        rows = {ln.split(",")[0]: ln.split(",") for ln in lines[1:]}
        assert float(rows["bilinear_tgv"][3]) == 0.0
        assert float(rows["transpose_conv"][3]) > 0.0
        for mode in ("bilinear_tgv", "transpose_conv"):
            assert (out / mode / "final.ckpt").exists()

    def test_shared_params_identical_at_init(self, tmp_path):
        from tgvseg.checkpoint import load_arrays
        from tgvseg.network import UNetPPConfig, build_network

        a = build_network(UNetPPConfig(depth=2, base_channels=2, seed=4,
                                       upsample_mode="bilinear_tgv"))
        b = build_network(UNetPPConfig(depth=2, base_channels=2, seed=4,
                                       upsample_mode="transpose_conv"))
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
