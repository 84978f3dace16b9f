import csv
import subprocess
import sys

import numpy as np
import pytest

from gfmud.cli import main
from gfmud.config import ConfigError, config_hash, load_config
from gfmud.codes import load_codeset, validate_factor_graph

TINY = ["--set", "train.D=1500", "--set", "train.epochs=1", "--set", "sweep.test_size=60"]


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    return lines[0].split("=", 1)[1], list(csv.DictReader(lines[1:]))


class TestConfig:
    def test_defaults_and_preset(self):
        cfg = load_config(preset="scma150")
        assert (cfg.scheme.K, cfg.scheme.N, cfg.scheme.U) == (60, 90, 2)

    def test_ini_and_override(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[scheme]\nK = 7\n[network]\nX = 2\n[output]\ndir = foo\n")
        cfg = load_config(p, overrides=["train.epochs=3", "channel.normalize_power=no"])
        assert cfg.scheme.K == 7 and cfg.network.X == 2 and cfg.output == "foo"
        assert cfg.train.epochs == 3 and cfg.channel.normalize_power is False

    @pytest.mark.parametrize("bad", ["scheme.K=x", "nosection=1", "foo.bar=1", "scheme.nokey=2",
                                     "scheme.name=cdma", "train.n_values=30"])
    def test_errors(self, bad):
        with pytest.raises(ConfigError):
            load_config(overrides=[bad])

    def test_hash_ignores_output(self):
        a = load_config(overrides=["output=a"])
        b = load_config(overrides=["output=b"])
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(load_config(overrides=["scheme.seed=4"]))


class TestGenCodes:
    def test_musa(self, tmp_path):
        out = tmp_path / "new" / "dir"
        assert main(["gen-codes", "--preset", "musa150", "--out", str(out)]) == 0
        _, rows = read_csv(out / "correlation.csv")
        G = np.array([[float(r[str(j)]) for j in range(21)] for r in rows])
        np.fill_diagonal(G, 0)
        assert G.shape == (21, 21) and G.max() <= 0.6
        cs = load_codeset(out / "codes.nmcs")
        Phi = cs.signatures()
        C = np.abs(Phi.conj().T @ Phi)
        np.fill_diagonal(C, 0)
        np.testing.assert_allclose(C, G, atol=1e-12)

    def test_scma(self, tmp_path):
        assert main(["gen-codes", "--preset", "scma-small", "--out", str(tmp_path)]) == 0
        cs = load_codeset(tmp_path / "codes.nmcs")
        F = (np.abs(cs.codewords).sum(axis=2) > 0).T.astype(int)
        assert cs.codewords.shape == (8, 6, 4) and validate_factor_graph(F, 3)


class TestPipeline:
    def test_sweep_and_determinism(self, tmp_path):
        args = ["sweep", "--preset", "musa150", "--deterministic", "--out", str(tmp_path)] + TINY
        assert main(args) == 0
        h, rows = read_csv(tmp_path / "sweep_snr.csv")
        assert len(rows) == 5 * 3
        assert [r["algorithm"] for r in rows[:3]] == ["dnn", "stomp", "ls-bomp"]
        assert all(0 <= float(r["recall"]) <= 1 for r in rows)
        _, nrows = read_csv(tmp_path / "sweep_n.csv")
        assert len(nrows) == 6 * 3
        first = (tmp_path / "sweep_snr.csv").read_bytes()
        assert main(["eval", "--preset", "musa150", "--deterministic", "--out", str(tmp_path)]
                    + TINY) == 0
        assert (tmp_path / "sweep_snr.csv").read_bytes() == first

    def test_gen_data_train_eval(self, tmp_path):
        base = ["--preset", "musa300", "--out", str(tmp_path)] + TINY
        assert main(["gen-codes"] + base) == 0
        assert main(["gen-data", "--test-snr", "10"] + base) == 0
        assert main(["train", "--data", str(tmp_path / "train.nmud")] + base) == 0
        assert main(["eval", "--algorithms", "dnn", "--var", "n"] + base
                    + ["--set", "sweep.activity_grid=1,2,3,4,5,6,7,8,9"]) == 0
        _, rows = read_csv(tmp_path / "sweep_n.csv")
        assert [int(r["n"]) for r in rows] == list(range(1, 10))
        assert main(["analyze", "--data", str(tmp_path / "test.nmud"),
                     "--checkpoint", str(tmp_path / "model.nmnn")] + base) == 0
        _, cal = read_csv(tmp_path / "calibration.csv")
        assert sum(int(r["count"]) for r in cal) == 60 * 21
        _, log = read_csv(tmp_path / "train_log.csv")
        assert len(log) == 1

    def test_checkpoint_mismatch_refused(self, tmp_path):
        base = ["--preset", "musa300", "--out", str(tmp_path)] + TINY
        assert main(["train"] + base) == 0
        bad = base + ["--set", "scheme.seed=5", "--codes", str(tmp_path / "other.nmcs")]
        main(["gen-codes", "--preset", "musa300", "--set", "scheme.seed=5", "--out",
              str(tmp_path / "o")])
        (tmp_path / "o" / "codes.nmcs").rename(tmp_path / "other.nmcs")
        assert main(["eval", "--algorithms", "dnn"] + bad) == 2


class TestAnalyze:
    def test_predictions_csv(self, tmp_path):
        p = tmp_path / "pred.csv"
        rows = ["sample,device,prob,label"]
        rng = np.random.default_rng(0)
        for s in range(30):
            for d in range(4):
                y = int(rng.random() < 0.3)
                rows.append(f"{s},{d},{0.8 if y else 0.1},{y}")
        p.write_text("\n".join(rows) + "\n")
        assert main(["analyze", "--predictions", str(p), "--out", str(tmp_path)]) == 0
        _, m = read_csv(tmp_path / "metrics.csv")
        assert float(m[0]["recall"]) == 1.0 and float(m[0]["auc"]) == 1.0

    def test_missing_inputs(self, tmp_path):
        assert main(["analyze", "--out", str(tmp_path)]) == 2


class TestSmallCommands:
    def test_flops(self, tmp_path):
        assert main(["flops", "--L", "4", "--width", "128", "--K", "6", "--N", "21",
                     "--out", str(tmp_path)]) == 0
        _, rows = read_csv(tmp_path / "flops.csv")
        vals = {r["term"]: int(r["flops"]) for r in rows}
        assert vals["sum"] == vals["closed_form"] == 544212

    def test_coverage(self, tmp_path):
        assert main(["coverage", "--N", "21", "--n", "2", "--alpha-max", "5",
                     "--out", str(tmp_path)]) == 0
        _, rows = read_csv(tmp_path / "coverage.csv")
        assert len(rows) == 5 and {"bound", "mc", "mc_stderr"} <= set(rows[0])

    def test_coverage_usage_error(self, tmp_path):
        assert main(["coverage", "--N", "5", "--n", "5", "--out", str(tmp_path)]) == 2

    def test_channel_probe(self, tmp_path):
        assert main(["channel-probe", "--scenario", "SH", "--points", "20",
                     "--out", str(tmp_path)]) == 0
        _, rows = read_csv(tmp_path / "channel_SH.csv")
        p = np.array([float(r["Pr_LOS"]) for r in rows])
        assert list(rows[0]) == ["r2D", "Pr_LOS", "PL_LOS", "PL_NLOS"]
        assert np.all(np.diff(p) < 0)
        assert all(float(r["PL_NLOS"]) >= float(r["PL_LOS"]) for r in rows)

    def test_unknown_scenario(self, tmp_path):
        assert main(["channel-probe", "--scenario", "QQ", "--out", str(tmp_path)]) == 2

    def test_bad_flag_is_config_error(self):
        assert main(["flops", "--bogus"]) == 2

    def test_runtime_failure(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "missing.nmud"),
                     "--out", str(tmp_path)]) == 3

    def test_module_entry(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "gfmud", "flops", "--out", str(tmp_path)],
                           capture_output=True)
        assert r.returncode == 0 and (tmp_path / "flops.csv").exists()
