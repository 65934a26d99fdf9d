import json

import numpy as np
import pytest

from singledir import config as cfgmod
from singledir.cli import build_data, main
from singledir.modelsel import read_monitor_csv, read_sweep_csv
from singledir.nn import checkpoint
from singledir.perturb import CumulativeCurve, NoiseSweep, default_noise_scales
from singledir.selectivity import SelectivityReport

BLOBS = """seed = 1
[model]
hidden = [16, 12]
[data]
source = "blobs"
n_per_class = 30
dim = 6
separation = 5.0
[train]
lr = 0.2
epochs = 8
[analysis]
orderings = 3
runs = 2
bins = 8
"""


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(BLOBS)
    return path


@pytest.fixture
def trained(conf, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(conf), "--out", str(out)]) == 0
    return out


class TestConfig:
    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[train]\nlearning_rate = 0.1\n")
        with pytest.raises(cfgmod.ConfigError, match="train.learning_rate"):
            cfgmod.read_toml(p)

    def test_wrong_section(self):
        with pytest.raises(cfgmod.ConfigError, match="model.lr"):
            cfgmod.flatten({"model": {"lr": 0.1}})

    def test_type_named(self):
        with pytest.raises(cfgmod.ConfigError, match="train.batch_size"):
            cfgmod.flatten({"train": {"batch_size": 2.5}})

    def test_flags_override_file(self):
        cfg = cfgmod.resolve({"lr": 0.1, "epochs": 3}, {"lr": 0.5})
        assert cfg["lr"] == 0.5 and cfg["epochs"] == 3

    def test_toml_round_trip(self):
        cfg = cfgmod.resolve({"hidden": [8, 4], "scope": [1, 3], "batchnorm": True})
        import tomli
        assert cfgmod.resolve(cfgmod.flatten(tomli.loads(cfgmod.to_toml(cfg)))) == cfg

    def test_flag_parsing(self):
        k = cfgmod.KEYS
        assert cfgmod.parse_flag(k["scales"], "0,0.5,2") == [0.0, 0.5, 2.0]
        assert cfgmod.parse_flag(k["scope"], "1,3") == [1, 3]
        assert cfgmod.parse_flag(k["scope"], "last2") == "last2"
        assert cfgmod.parse_flag(k["batchnorm"], "true") is True
        with pytest.raises(cfgmod.ConfigError, match="--epochs"):
            cfgmod.parse_flag(k["epochs"], "many")

    def test_topk_exceeds_subset(self):
        with pytest.raises(cfgmod.ConfigError, match="sweep.topk"):
            cfgmod.resolve({"subselect": 2, "topk": [1, 3]})


class TestTrain:
    def test_outputs(self, trained):
        assert {p.name for p in trained.iterdir()} >= {"model.ckpt.json", "metrics.csv", "run.json"}
        lines = (trained / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,test_loss,test_acc" and len(lines) == 9

    def test_byte_identical_rerun(self, conf, trained, tmp_path):
        other = tmp_path / "again"
        main(["train", "--config", str(conf), "--out", str(other)])
        assert (other / "model.ckpt.json").read_bytes() == (trained / "model.ckpt.json").read_bytes()

    def test_corruption_sidecar(self, conf, tmp_path):
        out = tmp_path / "bad"
        assert main(["train", "--config", str(conf), "--corruption", "1.0", "--out", str(out)]) == 0
        side = json.loads((out / "corruption.json").read_text())
        assert side["fraction"] == 1.0 and len(side["changed_indices"]) > 0

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_exit_codes(self, conf, tmp_path, capsys):
        assert main(["train", "--config", str(conf), "--lr", "-1"]) == 2
        assert "train.lr" in capsys.readouterr().err
        assert main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
        assert main(["train", "--source", "mnist", "--data-dir", str(tmp_path / "nowhere")]) == 3
        assert main(["train", "--config", str(conf), "--lr", "1e300", "--out", str(tmp_path / "x")]) == 4

    def test_data_dir_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SINGLEDIR_DATA", str(tmp_path / "empty"))
        assert main(["train", "--source", "mnist", "--out", str(tmp_path / "y")]) == 3


class TestAnalysisCommands:
    def test_ablate(self, trained, capsys):
        before = checkpoint.file_hash(trained / "model.ckpt.json")
        assert main(["ablate", str(trained / "model.ckpt.json"), "--orderings", "10"]) == 0
        printed = capsys.readouterr().out.strip()
        curve = CumulativeCurve.from_csv((trained / "ablation-zero-train.csv").read_text())
        assert curve.accuracies.shape[0] == 10
        side = json.loads((trained / "ablation-zero-train.json").read_text())
        assert float(printed) == side["auc"]
        assert side["checkpoint_sha256"] == before and side["split"] == "train"
        assert len(side["ordering_seeds"]) == 10
        assert checkpoint.file_hash(trained / "model.ckpt.json") == before

    def test_full_ablation_tail_is_chance(self, trained):
        main(["ablate", str(trained / "model.ckpt.json"), "--scope", "all", "--clamp", "zero"])
        curve = CumulativeCurve.from_csv((trained / "ablation-zero-train.csv").read_text())
        model, _, meta = checkpoint.load(trained / "model.ckpt.json")
        train_set, _, _ = build_data(cfgmod.resolve(cfgmod.flatten(meta["extra"]["experiment"])))
        # the logits collapse to the output bias, so every example gets its argmax class
        winner = int(np.argmax(model.params[-1]["bias"]))
        np.testing.assert_allclose(curve.accuracies[:, -1], np.mean(train_set.labels == winner))

    def test_mean_clamp(self, trained):
        assert main(["ablate", str(trained / "model.ckpt.json"), "--clamp", "mean", "--split", "test"]) == 0
        assert (trained / "ablation-mean-test.csv").exists()

    def test_noise(self, trained):
        assert main(["noise", str(trained / "model.ckpt.json"), "--scales", "0,1", "--runs", "3"]) == 0
        sweep = NoiseSweep.from_csv((trained / "noise-train.csv").read_text())
        assert main(["ablate", str(trained / "model.ckpt.json"), "--orderings", "1"]) == 0
        base = CumulativeCurve.from_csv((trained / "ablation-zero-train.csv").read_text()).baseline
        np.testing.assert_array_equal(sweep.accuracies[0], base)

    def test_noise_default_scales(self, trained):
        main(["noise", str(trained / "model.ckpt.json"), "--runs", "1"])
        sweep = NoiseSweep.from_csv((trained / "noise-train.csv").read_text())
        np.testing.assert_allclose(sweep.scales, default_noise_scales())
        assert np.all(np.diff(sweep.scales) > 0)

    def test_selectivity(self, trained):
        assert main(["selectivity", str(trained / "model.ckpt.json")]) == 0
        report = SelectivityReport.from_csv((trained / "selectivity-test.csv").read_text())
        assert len(report) == 16 + 12
        doc = json.loads((trained / "selectivity-test.json").read_text())
        assert set(doc["correlations"]["pooled"]) == {"selectivity_vs_loss", "mi_vs_loss", "selectivity_vs_l1"}
        assert [e["layer"] for e in doc["correlations"]["per_layer"]] == [1, 3]

    def test_bad_checkpoint(self, tmp_path):
        bad = tmp_path / "model.ckpt.json"
        bad.write_text("{not json")
        assert main(["ablate", str(bad)]) == 3

    def test_bad_scope(self, trained):
        assert main(["ablate", str(trained / "model.ckpt.json"), "--scope", "7"]) == 2


class TestSweepAndMonitor:
    def test_sweep(self, conf, tmp_path, capsys):
        out = tmp_path / "sweep"
        rc = main(["sweep", "--config", str(conf), "--lrs", "0.1,0.3", "--batch-sizes", "16,32", "--repeats", "2",
                   "--epochs", "2", "--subselect", "4", "--trials", "100", "--topk", "1,2", "--out", str(out)])
        assert rc == 0
        assert len(read_sweep_csv((out / "sweep.csv").read_text())) == 8
        summ = json.loads((out / "subselection.json").read_text())
        assert set(summ["hits"]) == {"1", "2"}
        assert "spearman(auc, test_acc)" in capsys.readouterr().out

    def test_monitor_single_probe(self, conf, tmp_path, capsys):
        out = tmp_path / "mon"
        assert main(["monitor", "--config", str(conf), "--probe-every", "100", "--out", str(out)]) == 0
        text = (out / "monitor.csv").read_text()
        assert text.splitlines()[0] == "epoch,train_loss,test_loss,auc"
        assert [r.epoch for r in read_monitor_csv(text)] == [8]
        assert "stop_epoch: none" in capsys.readouterr().out
