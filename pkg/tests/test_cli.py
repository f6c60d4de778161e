import configparser
import hashlib
import json

import numpy as np
import pytest

from hybridbnn import attribution, bayes, cli, data, nn, selective
from hybridbnn.config import ConfigError, RunConfig


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """40 volumes at side 16, one epoch, default Monte-Carlo evaluation."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "data"), "--n", "40", "--side", "16",
                     "--hard-fraction", "0.1"]) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(root / "model"),
                     "--epochs", "1"]) == 0
    assert cli.main(["eval", "--checkpoint", str(root / "model" / "model.bnck"),
                     "--data", str(root / "data"), "--n", "20"]) == 0
    return root


class TestGenData:
    def test_default_counts(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-data", "--out", tmp_path / "d", "--side", "8")
        assert code == 0
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        labels = [e["label"] for e in manifest]
        assert len(manifest) == 376
        assert labels.count(0) == labels.count(1) == 188
        assert "class0=188 class1=188" in out

    def test_n_entries(self, tmp_path, capsys):
        assert run(capsys, "gen-data", "--out", tmp_path / "d", "--n", 10, "--side", 8)[0] == 0
        assert len(json.loads((tmp_path / "d" / "manifest.json").read_text())) == 10

    def test_same_seed_same_manifest(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "gen-data", "--out", tmp_path / name, "--n", 12, "--side", 8)[0] == 0
        assert digest(tmp_path / "a" / "manifest.json") == digest(tmp_path / "b" / "manifest.json")
        for entry in json.loads((tmp_path / "a" / "manifest.json").read_text()):
            payload = entry["id"] + ".raw"
            assert digest(tmp_path / "a" / payload) == digest(tmp_path / "b" / payload)

    def test_refuses_nonempty_dir(self, tmp_path, capsys):
        (tmp_path / "keep.txt").write_text("x")
        code, _, err = run(capsys, "gen-data", "--out", tmp_path, "--n", 10, "--side", 8)
        assert code != 0
        assert err.startswith("error: FileExistsError")
        assert run(capsys, "gen-data", "--out", tmp_path, "--n", 10, "--side", 8, "--force")[0] == 0

    def test_resolved_config_written(self, tmp_path, capsys):
        run(capsys, "gen-data", "--out", tmp_path / "d", "--n", 10, "--side", 8)
        cfg = RunConfig.load(tmp_path / "d" / "config.gen-data.ini")
        assert cfg.int("data", "n_samples") == 10
        assert cfg.int("data", "side") == 8

    def test_output_root_override(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
        assert run(capsys, "gen-data", "--out", "rel", "--n", 10, "--side", 8)[0] == 0
        assert (tmp_path / "rel" / "manifest.json").is_file()


class TestTrain:
    def test_checkpoint_and_log(self, small_run):
        spec, params = nn.load_checkpoint(small_run / "model" / "model.bnck")
        assert spec.side == 16
        lines = (small_run / "model" / "train_log.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,accuracy"
        assert len(lines) - 1 == 1
        assert (small_run / "model" / "config.train.ini").is_file()

    def test_log_rows_match_epochs(self, small_run, tmp_path, capsys):
        assert run(capsys, "train", "--data", small_run / "data", "--out", tmp_path, "--epochs", 3)[0] == 0
        assert len((tmp_path / "train_log.csv").read_text().splitlines()) == 4

    def test_zero_epochs_rejected(self, small_run, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", small_run / "data", "--out", tmp_path, "--epochs", 0)
        assert code == 2
        assert "epochs" in err
        assert not (tmp_path / "model.bnck").exists()

    def test_missing_manifest(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", tmp_path, "--out", tmp_path / "m")
        assert code == 1
        assert str(tmp_path / "manifest.json") in err
        assert len(err.strip().splitlines()) == 1


class TestEval:
    def test_csv_rows(self, small_run):
        ds = data.load_dataset(small_run / "data")
        ids, preds, labels = bayes.read_predictions(small_run / "model" / "predictions.csv")
        assert len(ids) == len(ds.test)
        assert ids == [v.id for v in ds.test]

    def test_rerun_identical(self, small_run, tmp_path, capsys):
        assert run(capsys, "eval", "--checkpoint", small_run / "model" / "model.bnck",
                   "--data", small_run / "data", "--n", 20, "--out", tmp_path)[0] == 0
        assert digest(tmp_path / "predictions.csv") == digest(small_run / "model" / "predictions.csv")

    def test_zero_scale_matches_deterministic(self, small_run, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--checkpoint", small_run / "model" / "model.bnck",
                           "--data", small_run / "data", "--s", 0, "--n", 7, "--out", tmp_path)
        assert code == 0
        spec, params = nn.load_checkpoint(small_run / "model" / "model.bnck")
        ds = data.load_dataset(small_run / "data")
        probs = bayes.deterministic_predict(spec, params, [v.data for v in ds.test])
        expected = selective.compute_metrics(probs, [v.label for v in ds.test])
        assert out.strip() == cli._format_metrics(expected)
        _, preds, _ = bayes.read_predictions(tmp_path / "predictions.csv")
        for p, q in zip(preds, probs):
            np.testing.assert_array_equal(p.p_mean, q.astype(np.float64))
            np.testing.assert_array_equal(p.p_std, 0.0)

    @pytest.mark.parametrize("flag, value", [("--s", "-0.1"), ("--n", "0")])
    def test_bad_bayes_settings(self, small_run, tmp_path, capsys, flag, value):
        code, _, err = run(capsys, "eval", "--checkpoint", small_run / "model" / "model.bnck",
                           "--data", small_run / "data", flag, value, "--out", tmp_path)
        assert code == 2
        assert err.startswith("error: ConfigError")


class TestSweep:
    def test_default_grid(self, small_run, tmp_path, capsys):
        code, out, _ = run(capsys, "sweep", "--predictions", small_run / "model" / "predictions.csv",
                           "--out", tmp_path)
        assert code == 0
        rows = (tmp_path / "sweep.csv").read_text().splitlines()
        assert len(rows) - 1 == 8
        assert len(out.strip().splitlines()) == 8
        coverage = [float(r.split(",")[3]) for r in rows[1:]]
        assert coverage == sorted(coverage)
        for name in ("accuracy", "auc", "coverage"):
            assert (tmp_path / f"{name}_vs_threshold.dat").is_file()

    def test_huge_threshold_is_unfiltered(self, small_run, tmp_path, capsys):
        pred_path = small_run / "model" / "predictions.csv"
        assert run(capsys, "sweep", "--predictions", pred_path, "--thresholds", "1e9", "--out", tmp_path)[0] == 0
        rows = (tmp_path / "sweep.csv").read_text().splitlines()
        assert len(rows) == 2
        _, preds, labels = bayes.read_predictions(pred_path)
        m = selective.compute_metrics([p.p_mean for p in preds], labels)
        t, acc, auc, cov, kept, rejected = rows[1].split(",")
        assert float(acc) == m.accuracy
        assert float(auc) == m.auc
        assert (float(cov), int(kept), int(rejected)) == (1.0, len(labels), 0)

    def test_unsorted_thresholds(self, small_run, tmp_path, capsys):
        code, _, err = run(capsys, "sweep", "--predictions", small_run / "model" / "predictions.csv",
                           "--thresholds", "0.1,0.01", "--out", tmp_path)
        assert code == 2
        assert "sorted" in err
        assert not (tmp_path / "sweep.csv").exists()


class TestAttribute:
    def _attr(self, capsys, root, out, *extra):
        return run(capsys, "attribute", "--checkpoint", root / "model" / "model.bnck", "--data",
                   root / "data", "--input-id", self.vid(root), "--out", out, *extra)

    @staticmethod
    def vid(root):
        return data.load_dataset(root / "data").test[0].id

    def test_single_zero_scale_equals_deterministic(self, small_run, tmp_path, capsys):
        assert self._attr(capsys, small_run, tmp_path, "--repeats", 1, "--s", 0, "--steps", 16,
                          "--sigma", 1, "--target", 1)[0] == 0
        spec, params = nn.load_checkpoint(small_run / "model" / "model.bnck")
        x = data.load_dataset(small_run / "data").by_id(self.vid(small_run)).data
        cfg = attribution.AttributionConfig(steps=16, sigma=1.0, target=1)
        raw, smoothed, mask, _ = attribution.single_attribution(spec, params, x, 1, cfg)
        vid = self.vid(small_run)
        for name, expected in (("raw", raw), ("smoothed", smoothed), ("mask", mask)):
            got = data.read_volume(tmp_path / f"{vid}_{name}.json").data
            np.testing.assert_array_equal(got, expected.astype(np.float32))

    def test_rerun_identical_masks(self, small_run, tmp_path, capsys):
        for name in ("a", "b"):
            assert self._attr(capsys, small_run, tmp_path / name, "--repeats", 2, "--steps", 8)[0] == 0
        vid = self.vid(small_run)
        for suffix in ("mask.raw", "mask_fraction.raw", "raw.raw"):
            assert digest(tmp_path / "a" / f"{vid}_{suffix}") == digest(tmp_path / "b" / f"{vid}_{suffix}")

    def test_completeness_in_summary(self, small_run, tmp_path, capsys):
        code, out, _ = self._attr(capsys, small_run, tmp_path, "--repeats", 2, "--steps", 256)
        assert code == 0
        summary = dict(line.split(" ", 1) for line in (tmp_path / "summary.txt").read_text().splitlines())
        assert float(summary["completeness_gap"]) < 0.05
        assert out == (tmp_path / "summary.txt").read_text()

    def test_default_output_dir(self, small_run, capsys):
        assert run(capsys, "attribute", "--checkpoint", small_run / "model" / "model.bnck", "--data",
                   small_run / "data", "--input-id", self.vid(small_run), "--repeats", 1,
                   "--steps", 4)[0] == 0
        assert (small_run / "model" / f"attribution_{self.vid(small_run)}" / "summary.txt").is_file()

    def test_unknown_id(self, small_run, tmp_path, capsys):
        code, _, err = run(capsys, "attribute", "--checkpoint", small_run / "model" / "model.bnck",
                           "--data", small_run / "data", "--input-id", "nobody", "--out", tmp_path)
        assert code == 1
        assert err.startswith("error: KeyError") and "nobody" in err


class TestConfig:
    def test_unknown_key_is_error(self, tmp_path, capsys):
        ini = tmp_path / "run.ini"
        ini.write_text("[train]\nepochs = 2\nmomentum = 0.9\n")
        code, _, err = run(capsys, "gen-data", "--config", ini, "--out", tmp_path / "d")
        assert code == 2
        assert "train.momentum" in err

    def test_unknown_section_is_error(self):
        with pytest.raises(ConfigError):
            RunConfig({"optimizer": {"lr": "1"}})

    def test_file_values_and_flag_precedence(self, tmp_path, capsys):
        ini = tmp_path / "run.ini"
        ini.write_text("[data]\nn_samples = 14\nside = 8\n")
        assert run(capsys, "gen-data", "--config", ini, "--out", tmp_path / "a")[0] == 0
        assert len(json.loads((tmp_path / "a" / "manifest.json").read_text())) == 14
        assert run(capsys, "gen-data", "--config", ini, "--out", tmp_path / "b", "--n", 10)[0] == 0
        assert len(json.loads((tmp_path / "b" / "manifest.json").read_text())) == 10

    def test_roundtrip(self):
        cfg = RunConfig()
        cfg.set("bayes", "s", 0.02)
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(cfg.dumps())
        assert RunConfig({s: dict(parser[s]) for s in parser.sections()}).values == cfg.values

    def test_bad_number(self):
        with pytest.raises(ConfigError):
            RunConfig({"train": {"epochs": "five"}}).int("train", "epochs")
