import csv

import numpy as np
import pytest

from deformnet.cli import main
from deformnet.erf import read_pgm
from deformnet.serialize import read_config


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().out


class TestConfigCommand:
    def test_variant_t_writes_expected_fields(self, tmp_path, capsys):
        out = tmp_path / "t.conf"
        code, text = run(capsys, "config", "--variant", "T", "--out", str(out))
        assert code == 0
        cfg = read_config(out)
        assert (cfg.stack.c1, cfg.stack.cprime, cfg.stack.l1, cfg.stack.l3) == (64, 16, 4, 18)
        assert "valid" in text and "params" in text

    def test_invalid_stack_fails_with_violation(self, tmp_path, capsys):
        out = tmp_path / "bad.conf"
        code, text = run(
            capsys, "config", "--c1", "64", "--cprime", "16", "--l1", "5", "--l3", "4",
            "--out", str(out),
        )
        assert code != 0
        assert "L1 <= L3" in text
        assert not out.exists()

    def test_scale_from_t_phi_one(self, tmp_path, capsys):
        out = tmp_path / "s.conf"
        code, text = run(capsys, "config", "--scale-from", "T", "--phi", "1", "--out", str(out))
        assert code == 0
        cfg = read_config(out)
        assert (cfg.stack.c1, cfg.stack.cprime, cfg.stack.l1, cfg.stack.l3) == (80, 16, 4, 21)

    def test_unknown_variant(self, tmp_path, capsys):
        code, text = run(capsys, "config", "--variant", "Q", "--out", str(tmp_path / "q.conf"))
        assert code == 2 and "unknown variant" in text


class TestParamsCommand:
    def test_variant_t_within_tolerance(self, capsys):
        code, text = run(capsys, "params", "--variant", "T")
        assert code == 0
        assert "30M" in text and "within 15%" in text

    def test_variant_h_within_tolerance(self, capsys):
        code, text = run(capsys, "params", "--variant", "H")
        assert code == 0
        assert "1080M" in text and "within 15%" in text

    def test_toy_config_exact_enumeration(self, tmp_path, capsys):
        conf = tmp_path / "toy.conf"
        run(
            capsys, "config", "--c1", "16", "--cprime", "16", "--l1", "1", "--l3", "1",
            "--num-classes", "10", "--out", str(conf),
        )
        code, text = run(capsys, "params", "--config", str(conf))
        assert code == 0
        assert "exact match" in text


class TestGradcheckCommand:
    def test_quick_op_scope_passes(self, capsys):
        code, text = run(capsys, "gradcheck", "--scope", "op", "--coords", "8", "--seed", "3")
        assert code == 0
        assert "all gradient checks passed" in text

    def test_large_step_warns(self, capsys):
        code, text = run(
            capsys, "gradcheck", "--scope", "op", "--coords", "4", "--step", "1e-2",
        )
        assert "truncation" in text


class TestOracleCommand:
    def test_pass_and_determinism(self, capsys):
        code1, text1 = run(capsys, "oracle", "--trials", "15", "--seed", "4")
        code2, text2 = run(capsys, "oracle", "--trials", "15", "--seed", "4")
        assert code1 == 0 and code2 == 0
        strip = lambda t: t.split(" in ")[0]  # timing differs run to run
        assert strip(text1) == strip(text2)
        assert "max 0 ulp" in text1

    def test_v2_mode(self, capsys):
        code, text = run(capsys, "oracle", "--trials", "8", "--toggles", "dcnv2")
        assert code == 0 and "dcnv2" in text


class TestBenchCommand:
    def test_csv_schema_and_speedup(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        code, text = run(
            capsys, "bench", "--op", "dcnv3", "--shape", "1,16,10,10", "--reps", "5",
            "--out", str(out),
        )
        assert code == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [
            "op", "shape", "reps", "min_s", "median_s", "mean_s",
            "images_per_s", "speedup_vs_naive",
        ]
        byop = {r[0]: r for r in rows[1:]}
        assert float(byop["dcnv3"][6]) > 0
        assert float(byop["dcnv3"][7]) >= 1.0  # vectorized at least matches the naive loops

    def test_conv_op(self, capsys):
        code, text = run(capsys, "bench", "--op", "conv2d", "--shape", "1,8,12,12", "--reps", "5")
        assert code == 0 and "conv2d" in text


class TestErfCommand:
    def test_map_files_and_support(self, tmp_path, capsys):
        conf = tmp_path / "tiny.conf"
        run(
            capsys, "config", "--c1", "16", "--cprime", "16", "--l1", "1", "--l3", "1",
            "--num-classes", "10", "--out", str(conf),
        )
        prefix = tmp_path / "erf1"
        code, text = run(
            capsys, "erf", "--config", str(conf), "--stage", "1", "--pixel", "31,33",
            "--image-size", "64", "--out-prefix", str(prefix),
        )
        assert code == 0
        pgm = read_pgm(f"{prefix}.pgm")
        assert pgm.shape == (64, 64)
        raw = np.loadtxt(f"{prefix}.csv", delimiter=",")
        assert raw.shape == (64, 64)
        assert raw.min() >= 0.0
        assert "static receptive field" in text

    def test_out_of_bounds_pixel(self, tmp_path, capsys):
        conf = tmp_path / "tiny.conf"
        run(
            capsys, "config", "--c1", "16", "--cprime", "16", "--l1", "1", "--l3", "1",
            "--num-classes", "10", "--out", str(conf),
        )
        code, text = run(
            capsys, "erf", "--config", str(conf), "--stage", "1", "--pixel", "99,0",
            "--image-size", "64", "--out-prefix", str(tmp_path / "x"),
        )
        assert code == 2 and "outside" in text


class TestTrainToyCommand:
    def test_loss_descends_and_csv_schema(self, tmp_path, capsys):
        out = tmp_path / "loss.csv"
        code, text = run(
            capsys, "train-toy", "--steps", "6", "--lr", "0.05", "--seed", "3",
            "--out", str(out),
        )
        assert code == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "loss"]
        losses = [float(r[1]) for r in rows[1:]]
        assert len(losses) == 6
        assert losses[-1] < losses[0]

    def test_zero_learning_rate_constant_loss(self, tmp_path, capsys):
        out = tmp_path / "flat.csv"
        code, _ = run(
            capsys, "train-toy", "--steps", "4", "--lr", "0", "--seed", "3", "--out", str(out),
        )
        assert code == 0
        with open(out) as fh:
            losses = [r[1] for r in csv.reader(fh)][1:]
        assert len(set(losses)) == 1

    def test_same_seed_identical_curves(self, tmp_path, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run(capsys, "train-toy", "--steps", "4", "--lr", "0.05", "--seed", "9", "--out", str(a))
        run(capsys, "train-toy", "--steps", "4", "--lr", "0.05", "--seed", "9", "--out", str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_guardrail_refuses_big_configs(self, tmp_path, capsys):
        conf = tmp_path / "big.conf"
        run(
            capsys, "config", "--variant", "T", "--num-classes", "10", "--out", str(conf),
        )
        code, text = run(
            capsys, "train-toy", "--config", str(conf), "--steps", "1", "--lr", "0.1",
            "--out", str(tmp_path / "no.csv"),
        )
        assert code == 2 and "guardrail" in text
