"""End-to-end command-line behavior: pipeline wiring and exit codes."""

import csv

import numpy as np
import pytest

from bayeseg.checkpoint import load_checkpoint
from bayeseg.cli import main
from bayeseg.pnm import read_labels

TINY_CONFIG = """\
num_classes = 3
stages = 2
features = 8
epochs = 2
batch_size = 4
seed = 1
"""


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Synthesized train/test data plus a trained tiny checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "train"), "--count", "12",
                 "--seed", "1", "--size", "16x16", "--classes", "3"]) == 0
    assert main(["synth", "--out", str(root / "test"), "--count", "4",
                 "--seed", "2", "--size", "16x16", "--classes", "3"]) == 0
    config = root / "run.cfg"
    config.write_text(TINY_CONFIG)
    ckpt = root / "model.ckpt"
    assert main(["train", "--config", str(config), "--data", str(root / "train"),
                 "--out", str(ckpt), "--log", str(root / "train.csv")]) == 0
    return root


class TestSynth:
    def test_writes_expected_files(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"), "--count", "4",
                     "--seed", "1", "--size", "16x16"]) == 0
        names = sorted(p.name for p in (tmp_path / "d").iterdir())
        assert "manifest.txt" in names
        assert sum(n.endswith(".ppm") for n in names) == 4
        assert sum(n.endswith(".pgm") for n in names) == 4

    def test_rerun_identical_bytes(self, tmp_path):
        args = ["--count", "3", "--seed", "5", "--size", "16x16"]
        assert main(["synth", "--out", str(tmp_path / "a")] + args) == 0
        assert main(["synth", "--out", str(tmp_path / "b")] + args) == 0
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == \
                   (tmp_path / "b" / name).read_bytes()

    def test_single_class_is_flag_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--out", str(tmp_path / "d"), "--count", "1",
                  "--classes", "1"])
        assert exc.value.code == 2

    def test_unwritable_path_is_io_error(self, tmp_path):
        blocker = tmp_path / "file.txt"
        blocker.write_text("x")
        code = main(["synth", "--out", str(blocker / "nested"), "--count", "1"])
        assert code == 3


class TestTrain:
    def test_checkpoint_loadable(self, workspace):
        model = load_checkpoint(workspace / "model.ckpt")
        assert model.config.num_classes == 3

    def test_log_emitted(self, workspace):
        lines = (workspace / "train.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[0].count(",") == 2

    def test_identical_invocations_identical_checkpoints(self, workspace, tmp_path):
        out = tmp_path / "again.ckpt"
        assert main(["train", "--config", str(workspace / "run.cfg"),
                     "--data", str(workspace / "train"), "--out", str(out)]) == 0
        assert out.read_bytes() == (workspace / "model.ckpt").read_bytes()

    def test_bad_config_is_flag_error(self, workspace, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("mystery_key = 3\n")
        code = main(["train", "--config", str(bad), "--data",
                     str(workspace / "train"), "--out", str(tmp_path / "m.ckpt")])
        assert code == 2

    def test_class_mismatch_is_exit_5(self, workspace, tmp_path):
        cfg = tmp_path / "five.cfg"
        cfg.write_text(TINY_CONFIG.replace("num_classes = 3", "num_classes = 5"))
        code = main(["train", "--config", str(cfg), "--data",
                     str(workspace / "train"), "--out", str(tmp_path / "m.ckpt")])
        assert code == 5


class TestEval:
    def test_writes_reports(self, workspace, tmp_path):
        report = tmp_path / "rep"
        assert main(["eval", "--ckpt", str(workspace / "model.ckpt"),
                     "--data", str(workspace / "test"), "--mode", "mc",
                     "--samples", "4", "--report-dir", str(report)]) == 0
        for name in ("metrics.csv", "percentiles.csv", "class_uncertainty.csv"):
            assert (report / name).exists(), name

    def test_wa_mode_deterministic(self, workspace, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            report = tmp_path / name
            assert main(["eval", "--ckpt", str(workspace / "model.ckpt"),
                         "--data", str(workspace / "test"), "--mode", "wa",
                         "--report-dir", str(report)]) == 0
            outs.append((report / "metrics.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_single_sample_zero_variance_column(self, workspace, tmp_path):
        report = tmp_path / "rep1"
        assert main(["eval", "--ckpt", str(workspace / "model.ckpt"),
                     "--data", str(workspace / "test"), "--mode", "mc",
                     "--samples", "1", "--report-dir", str(report)]) == 0
        rows = list(csv.reader((report / "class_uncertainty.csv").open()))
        for row in rows[1:-2]:
            if row[1] != "nan":
                assert float(row[1]) == 0.0

    def test_class_count_mismatch_exit_5(self, workspace, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d5"), "--count", "2",
                     "--size", "16x16", "--classes", "5"]) == 0
        code = main(["eval", "--ckpt", str(workspace / "model.ckpt"),
                     "--data", str(tmp_path / "d5"), "--mode", "wa",
                     "--report-dir", str(tmp_path / "rep")])
        assert code == 5


class TestPredict:
    def test_outputs_valid_and_deterministic(self, workspace, tmp_path):
        image = workspace / "test" / "img_00000.ppm"
        args = ["predict", "--ckpt", str(workspace / "model.ckpt"),
                "--image", str(image), "--samples", "4", "--seed", "3"]
        seg1, unc1 = tmp_path / "s1.pgm", tmp_path / "u1.pgm"
        seg2, unc2 = tmp_path / "s2.pgm", tmp_path / "u2.pgm"
        assert main(args + ["--out-seg", str(seg1), "--out-unc", str(unc1)]) == 0
        assert main(args + ["--out-seg", str(seg2), "--out-unc", str(unc2)]) == 0
        assert seg1.read_bytes() == seg2.read_bytes()
        assert unc1.read_bytes() == unc2.read_bytes()
        seg = read_labels(seg1)
        assert seg.shape == (16, 16)
        assert seg.max() < 3

    def test_variation_ratio_optional_output(self, workspace, tmp_path):
        image = workspace / "test" / "img_00001.ppm"
        vr = tmp_path / "vr.pgm"
        assert main(["predict", "--ckpt", str(workspace / "model.ckpt"),
                     "--image", str(image), "--out-seg", str(tmp_path / "s.pgm"),
                     "--out-unc", str(tmp_path / "u.pgm"), "--samples", "4",
                     "--variation-ratio", str(vr)]) == 0
        assert vr.exists()

    def test_indivisible_size_exit_5(self, workspace, tmp_path):
        from bayeseg.pnm import write_image
        odd = tmp_path / "odd.ppm"
        write_image(odd, np.zeros((3, 10, 10), np.float32))
        code = main(["predict", "--ckpt", str(workspace / "model.ckpt"),
                     "--image", str(odd), "--out-seg", str(tmp_path / "s.pgm"),
                     "--out-unc", str(tmp_path / "u.pgm")])
        assert code == 5

    def test_variant_none_constant_uncertainty(self, workspace, tmp_path):
        cfg = tmp_path / "none.cfg"
        cfg.write_text(TINY_CONFIG + "dropout_variant = none\n")
        ckpt = tmp_path / "none.ckpt"
        assert main(["train", "--config", str(cfg), "--data",
                     str(workspace / "train"), "--out", str(ckpt)]) == 0
        unc = tmp_path / "u.pgm"
        assert main(["predict", "--ckpt", str(ckpt),
                     "--image", str(workspace / "test" / "img_00000.ppm"),
                     "--out-seg", str(tmp_path / "s.pgm"), "--out-unc", str(unc),
                     "--samples", "3"]) == 0
        assert (read_labels(unc) == 128).all()


class TestStudy:
    def test_csv_header_and_wa_row(self, workspace, tmp_path):
        out = tmp_path / "study.csv"
        assert main(["study", "--ckpt", str(workspace / "model.ckpt"),
                     "--data", str(workspace / "test"), "--t-list", "1,2",
                     "--trials", "2", "--out", str(out)]) == 0
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["T", "mean", "std"]
        assert [r[0] for r in rows[1:]] == ["1", "2", "wa"]
        assert float(rows[-1][2]) == 0.0

    def test_malformed_t_list_exit_5(self, workspace, tmp_path):
        code = main(["study", "--ckpt", str(workspace / "model.ckpt"),
                     "--data", str(workspace / "test"), "--t-list", "1,x",
                     "--trials", "2", "--out", str(tmp_path / "s.csv")])
        assert code == 5


class TestGradcheck:
    def test_default_run_passes(self, capsys):
        assert main(["gradcheck", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert out.count("max relative error") == 6

    def test_fault_injection_exits_one(self, capsys):
        assert main(["gradcheck", "--seed", "0", "--inject-fault"]) == 1
        assert "conv" in capsys.readouterr().err

    def test_fixed_seed_identical_output(self, capsys):
        assert main(["gradcheck", "--seed", "4"]) == 0
        first = capsys.readouterr().out
        assert main(["gradcheck", "--seed", "4"]) == 0
        assert capsys.readouterr().out == first


def test_unknown_flag_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--bogus"])
    assert exc.value.code == 2


def test_missing_checkpoint_is_io_error(tmp_path):
    code = main(["predict", "--ckpt", str(tmp_path / "missing.ckpt"),
                 "--image", str(tmp_path / "x.ppm"),
                 "--out-seg", str(tmp_path / "s.pgm"),
                 "--out-unc", str(tmp_path / "u.pgm")])
    assert code == 3
