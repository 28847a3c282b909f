import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

import platoon_gen.cli as cli
from platoon_gen.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, resolve_config
from platoon_gen.data import load_dataset
from platoon_gen.evaluation import mae, mmaae
from platoon_gen.network import load_params
from platoon_gen.training import TrainingDiverged

SMALL = ["--set", "synth.n_platoons=12"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--seed", "3"] + SMALL) == EXIT_OK
    return out


def _train_args(synth_dir, out, *extra):
    return ["train", "--out", str(out), "--set", f"data.train={synth_dir / 'train.json'}",
            "--set", f"data.val={synth_dir / 'val.json'}", "--set", "model.layer_sizes=[4, 3]", *extra]


class TestConfig:
    def test_dump_defaults(self, capsys):
        assert main(["config"]) == EXIT_OK
        doc = yaml.safe_load(capsys.readouterr().out)
        assert doc == resolve_config()
        assert doc["model"]["layer_sizes"] == [10, 10, 5] and doc["train"]["schedule"]["family"] == "inverse_sigmoid"

    def test_file_and_overrides(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("seed: 4\ntrain:\n  epochs: 7\n  schedule:\n    family: linear\n")
        cfg = resolve_config(f, seed=9, sets=["train.lr=0.5"])
        assert cfg["seed"] == 9 and cfg["train"]["epochs"] == 7 and cfg["train"]["lr"] == 0.5
        assert cfg["train"]["schedule"]["family"] == "linear" and cfg["train"]["schedule"]["c"] == 25.0

    def test_unknown_key_names_path(self, tmp_path, capsys):
        f = tmp_path / "c.yaml"
        f.write_text("train:\n  schedule:\n    slope: 3\n")
        assert main(["config", "--config", str(f)]) == EXIT_USAGE
        assert "train.schedule.slope" in capsys.readouterr().err

    def test_bad_command(self):
        assert main(["fly"]) == EXIT_USAGE


class TestSynth:
    def test_outputs_and_manifest(self, synth_dir):
        man = json.loads((synth_dir / "manifest.json").read_text())
        assert man["counts"] == {"train": 10, "val": 1, "eval": 1}
        for name in ("train.json", "val.json", "eval.json", "config.yaml"):
            assert (synth_dir / name).exists() and name in man["files"]
        assert yaml.safe_load((synth_dir / "config.yaml").read_text())["seed"] == 3

    def test_pinned_seed_identical(self, synth_dir, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--seed", "3"] + SMALL) == EXIT_OK
        for name in ("train.json", "val.json", "eval.json", "config.yaml"):
            assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()

    def test_bad_profile(self, tmp_path, capsys):
        code = main(["synth", "--out", str(tmp_path), "--set", "synth.profile=[{kind: wobble, duration: 5, speed: 3}]"])
        assert code == EXIT_USAGE and "wobble" in capsys.readouterr().err

    def test_negative_speed_profile(self, tmp_path):
        code = main(["synth", "--out", str(tmp_path), "--set",
                     "synth.profile=[{kind: oscillation, duration: 100, speed: 2, amplitude: 9}]"])
        assert code == EXIT_DATA


class TestIngest:
    def test_fixture(self, data_dir, tmp_path):
        code = main(["ingest", "--out", str(tmp_path), "--set", f"data.csv={data_dir / 'chain5_25s.csv'}"])
        assert code == EXIT_OK
        assert len(load_dataset(tmp_path / "train.json")) == 1
        assert len(load_dataset(tmp_path / "eval.json")) == 0

    def test_missing_csv_setting(self, tmp_path):
        assert main(["ingest", "--out", str(tmp_path)]) == EXIT_USAGE


class TestTrain:
    def test_one_epoch(self, synth_dir, tmp_path):
        assert main(_train_args(synth_dir, tmp_path, "--set", "train.epochs=1")) == EXIT_OK
        rows = (tmp_path / "train_loss.csv").read_text().splitlines()
        assert len(rows) == 2
        for name in ("model.json", "model_final.json", "checkpoint.json", "config.yaml", "manifest.json"):
            assert (tmp_path / name).exists()

    def test_deterministic(self, synth_dir, tmp_path):
        for d in ("a", "b"):
            assert main(_train_args(synth_dir, tmp_path / d, "--set", "train.epochs=2",
                                    "--set", "train.batch_size=4")) == EXIT_OK
        for name in ("model.json", "model_final.json", "train_loss.csv", "checkpoint.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_resume(self, synth_dir, tmp_path):
        args = ["--set", "train.batch_size=4", "--set", "train.schedule.family=linear", "--set", "train.schedule.w=-0.3"]
        assert main(_train_args(synth_dir, tmp_path / "full", "--set", "train.epochs=3", *args)) == EXIT_OK
        assert main(_train_args(synth_dir, tmp_path / "cut", "--set", "train.epochs=1", *args)) == EXIT_OK
        assert main(_train_args(synth_dir, tmp_path / "cut", "--set", "train.epochs=3", "--resume", *args)) == EXIT_OK
        for name in ("model.json", "model_final.json", "train_loss.csv"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "cut" / name).read_bytes()

    def test_platoon_mode_on_pairs_matches_pair_mode(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"), "--set", "synth.n_platoons=6",
                     "--set", "synth.platoon_size=2"]) == EXIT_OK
        base = ["--set", "train.epochs=3", "--set", "train.optimizer=sgd"]
        pair = _train_args(tmp_path / "d", tmp_path / "pair", *base, "--set", "train.mode=pair",
                           "--set", "train.lr=0.001")
        plat = _train_args(tmp_path / "d", tmp_path / "plat", *base, "--set", "train.mode=platoon",
                           "--set", "train.lr=0.002", "--set", "train.schedule.family=always_actual",
                           "--set", "train.schedule.c=1.0")
        assert main(pair) == EXIT_OK and main(plat) == EXIT_OK
        a = load_params(tmp_path / "pair" / "model_final.json")
        b = load_params(tmp_path / "plat" / "model_final.json")
        np.testing.assert_allclose(a.flat(), b.flat(), rtol=0, atol=1e-12)

    def test_sweep(self, synth_dir, tmp_path):
        code = main(_train_args(synth_dir, tmp_path, "--set", "train.epochs=1",
                                "--set", f"data.eval={synth_dir / 'eval.json'}",
                                "--set", "train.sweep=[always_actual, inverse_sigmoid]"))
        assert code == EXIT_OK
        rows = list(csv.reader((tmp_path / "sweep.csv").open()))
        assert rows[0] == ["family", "mae", "mmaae", "best_epoch"]
        assert [r[0] for r in rows[1:]] == ["always_actual", "inverse_sigmoid"]
        assert (tmp_path / "inverse_sigmoid" / "model.json").exists()

    def test_missing_dataset(self, tmp_path):
        code = main(["train", "--out", str(tmp_path), "--set", f"data.train={tmp_path / 'nope.json'}"])
        assert code == EXIT_DATA

    def test_unset_dataset(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_bad_mode(self, synth_dir, tmp_path):
        assert main(_train_args(synth_dir, tmp_path, "--set", "train.mode=both")) == EXIT_USAGE

    def test_divergence_exit_code(self, synth_dir, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise TrainingDiverged("loss became nan twice")
        monkeypatch.setattr(cli, "fit", diverge)
        assert main(_train_args(synth_dir, tmp_path, "--set", "train.epochs=1")) == EXIT_NUMERIC


class TestGenerateEvaluate:
    def test_idm_equilibrium_fixture(self, tmp_path):
        hold = "synth.profile=[{kind: hold, duration: 100, speed: 15}]"
        assert main(["synth", "--out", str(tmp_path / "d"), "--set", "synth.n_platoons=2", "--set", hold,
                     "--set", "synth.jitter=0.0", "--set", "synth.profile_variation=0.0",
                     "--set", "synth.eval_fraction=1.0", "--set", "synth.val_fraction=0.0"]) == EXIT_OK
        out = tmp_path / "g"
        assert main(["generate", "--out", str(out), "--set", "model.kind=idm",
                     "--set", f"data.eval={tmp_path / 'd' / 'eval.json'}"]) == EXIT_OK
        files = sorted((out / "trajectories").glob("*.csv"))
        assert len(files) == 2
        for f in files:
            rows = list(csv.DictReader(f.open()))
            assert len(rows) == 5 * 40
            x = np.array([float(r["x"]) for r in rows]).reshape(5, 40)
            gaps = -np.diff(x, axis=0)
            assert np.abs(gaps - gaps[:, :1]).max() < 1e-6
            np.testing.assert_allclose([float(r["x_actual"]) for r in rows], x.ravel(), atol=1e-6)

    def test_generate_then_evaluate(self, synth_dir, tmp_path):
        assert main(_train_args(synth_dir, tmp_path / "m", "--set", "train.epochs=1")) == EXIT_OK
        common = ["--set", f"data.eval={synth_dir / 'eval.json'}"]
        for d in ("g1", "g2"):
            assert main(["generate", "--out", str(tmp_path / d), "--set",
                         f"model.file={tmp_path / 'm' / 'model.json'}", *common]) == EXIT_OK
        for f in ("generated.json",):
            assert (tmp_path / "g1" / f).read_bytes() == (tmp_path / "g2" / f).read_bytes()
        assert main(["evaluate", "--out", str(tmp_path / "e"), "--set",
                     f"eval.generated={tmp_path / 'g1' / 'generated.json'}", *common]) == EXIT_OK
        doc = json.loads((tmp_path / "e" / "metrics.json").read_text())
        actual = load_dataset(synth_dir / "eval.json").platoons
        gen = load_dataset(tmp_path / "g1" / "generated.json").platoons
        assert doc["mae"] == mae(actual, gen) and doc["mmaae"] == mmaae(actual, gen)
        vals = [float(r[0]) for r in list(csv.reader((tmp_path / "e" / "pmaae_cdf.csv").open()))[1:]]
        assert vals == sorted(vals)

    def test_identical_files_zero_metrics(self, synth_dir, tmp_path):
        code = main(["evaluate", "--out", str(tmp_path), "--set", f"data.eval={synth_dir / 'eval.json'}",
                     "--set", f"eval.generated={synth_dir / 'eval.json'}"])
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "metrics.json").read_text())
        assert doc["mae"] == 0.0 and doc["mmaae"] == 0.0

    def test_mismatched_files(self, synth_dir, tmp_path):
        code = main(["evaluate", "--out", str(tmp_path), "--set", f"data.eval={synth_dir / 'eval.json'}",
                     "--set", f"eval.generated={synth_dir / 'train.json'}"])
        assert code == EXIT_DATA

    def test_missing_model(self, synth_dir, tmp_path):
        code = main(["generate", "--out", str(tmp_path), "--set", f"model.file={tmp_path / 'none.json'}",
                     "--set", f"data.eval={synth_dir / 'eval.json'}"])
        assert code == EXIT_USAGE


class TestGradcheckCommand:
    def test_pass(self, capsys, tmp_path):
        assert main(["gradcheck", "--set", "gradcheck.trials=2", "--out", str(tmp_path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "PASS" in out and "W0" in out and "head_b" in out
        assert (tmp_path / "gradcheck.txt").exists()

    def test_fault_injection(self, capsys):
        assert main(["gradcheck", "--set", "gradcheck.trials=2", "--set", "gradcheck.fault=0.001"]) == EXIT_NUMERIC
        assert "FAIL" in capsys.readouterr().out


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "platoon_gen.cli", "config"], capture_output=True, text=True)
    assert res.returncode == 0 and "layer_sizes" in res.stdout


class TestCompare:
    def test_tiny_protocol(self, tmp_path):
        sets = ["compare.seeds=[5]", "compare.variants=[idm, lstm, int_lstm]", "compare.n_train=4",
                "compare.n_val=2", "compare.n_test=2", "compare.epochs=1", "compare.layer_sizes=[3]",
                "compare.batch_size=2"]
        args = ["compare", "--out", str(tmp_path)] + [x for s in sets for x in ("--set", s)]
        assert main(args) == EXIT_OK
        rows = list(csv.reader((tmp_path / "compare.csv").open()))
        assert rows[0] == ["seed", "variant", "mae", "mmaae", "best_epoch"]
        assert [r[1] for r in rows[1:]] == ["idm", "lstm", "int_lstm"]

    def test_unknown_variant(self, tmp_path):
        assert main(["compare", "--out", str(tmp_path), "--set", "compare.variants=[gru]"]) == EXIT_USAGE
