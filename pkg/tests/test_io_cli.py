"""Checkpoints, configs, CSV/report consistency, plots, and the CLI contract."""
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from condrep import io as cio
from condrep.backbone import BackboneConfig
from condrep.cli import main
from condrep.evaluate import EvalReport
from condrep.exceptions import ConfigError, DimensionError
from condrep.model import Model, ModelConfig
from condrep.plots import PLOT_H, accuracy_bars_svg, loss_curve_svg


def tiny_model(seed=0):
    cfg = ModelConfig(backbone=BackboneConfig(input_size=16, blocks=((8, 2), (8, 2), (8, 2)),
                                              feature_channels=8, feature_side=2))
    return Model.init(cfg, seed=seed)


TINY_FLAGS = ["--image-size", "16", "--feature-channels", "8", "--feature-side", "2",
              "--n-classes", "3", "--support-per-class", "4", "--query-per-class", "6"]


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = tiny_model(seed=3)
        path = tmp_path / "ck.txt"
        cio.save_checkpoint(path, model, meta={"epoch": 7})
        config, params, meta = cio.load_checkpoint(path)
        assert meta == {"epoch": 7}
        assert config == model.config
        for name, p in model.parameters().items():
            assert np.array_equal(params[name], p.data), name

    def test_model_from_checkpoint(self, tmp_path):
        model = tiny_model(seed=4)
        model.rerep["final.w1"].data[:] = np.pi / 3
        path = tmp_path / "ck.txt"
        cio.save_checkpoint(path, model)
        loaded, _meta = cio.model_from_checkpoint(path)
        for name, p in model.parameters().items():
            assert np.array_equal(loaded.parameters()[name].data, p.data), name

    def test_shape_mismatch_rejected(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "ck.txt"
        cio.save_checkpoint(path, model)
        _cfg, params, _ = cio.load_checkpoint(path)
        params["rerep.final.w1"] = params["rerep.final.w1"][:, :4]
        with pytest.raises(DimensionError):
            tiny_model().load_parameters(params)

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("not a checkpoint\n")
        with pytest.raises(ConfigError):
            cio.load_checkpoint(path)


class TestConfig:
    def test_defaults_follow_stated_values(self):
        cfg = cio.resolve_config()
        assert cfg["batch_size"] == "80"
        assert cfg["learning_rate"] == "0.001"
        assert cfg["weight_decay"] == "0.05"
        assert cfg["episodes"] == "600"
        assert cfg["q_per_class"] == "15"
        assert cfg["image_size"] == "32"

    def test_file_and_override_precedence(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("# comment\nepochs = 7\nseed=3\n")
        cfg = cio.resolve_config(f, {"seed": 9})
        assert cfg["epochs"] == "7" and cfg["seed"] == "9"

    def test_unknown_key_rejected(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("warp_speed=9\n")
        with pytest.raises(ConfigError):
            cio.resolve_config(f)

    def test_malformed_line_rejected(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("epochs\n")
        with pytest.raises(ConfigError, match="line 1"):
            cio.resolve_config(f)

    def test_hash_is_stable_and_order_free(self):
        a = cio.config_hash({"b": "2", "a": "1"})
        b = cio.config_hash({"a": "1", "b": "2"})
        assert a == b and len(a) == 16


class TestCsvAndReport:
    def test_loss_csv_round_trip(self, tmp_path):
        path = tmp_path / "loss.csv"
        cio.write_loss_csv(path, [0.5, 0.25, 0.125])
        assert cio.read_loss_csv(path) == [(0, 0.5), (1, 0.25), (2, 0.125)]

    def test_loss_csv_row_count(self, tmp_path):
        path = tmp_path / "loss.csv"
        cio.write_loss_csv(path, list(np.linspace(1, 0, 50)))
        assert len(path.read_text().splitlines()) == 51

    def test_report_mean_matches_csv_average(self, tmp_path):
        rng = np.random.default_rng(0)
        reports = {s: EvalReport.from_accuracies(s, rng.uniform(size=20))
                   for s in ("classifier", "weighted_query")}
        csv_path, json_path = tmp_path / "acc.csv", tmp_path / "report.json"
        cio.write_accuracy_csv(csv_path, reports)
        cio.write_report_json(json_path, reports)
        columns = cio.read_accuracy_csv(csv_path)
        payload = json.loads(json_path.read_text())
        for name in reports:
            csv_mean = np.mean(columns[name])
            assert abs(payload["strategies"][name]["mean"] - csv_mean) < 1e-12

    def test_malformed_accuracy_csv_names_line(self, tmp_path):
        path = tmp_path / "acc.csv"
        path.write_text("episode,a\n0,0.5\n1,oops\n")
        with pytest.raises(ConfigError, match="line 3"):
            cio.read_accuracy_csv(path)

    def test_empty_accuracy_csv_rejected(self, tmp_path):
        path = tmp_path / "acc.csv"
        path.write_text("episode,a\n")
        with pytest.raises(ConfigError):
            cio.read_accuracy_csv(path)


class TestPlots:
    def test_loss_curve_is_wellformed_svg(self, tmp_path):
        csv = tmp_path / "loss.csv"
        cio.write_loss_csv(csv, [1.0, 0.5, 0.4])
        out = tmp_path / "loss.svg"
        loss_curve_svg(csv, out)
        root = ET.parse(out).getroot()
        assert root.tag.endswith("svg")

    def test_bar_heights_equal_csv_means(self, tmp_path):
        rng = np.random.default_rng(1)
        reports = {s: EvalReport.from_accuracies(s, rng.uniform(size=12))
                   for s in ("classifier", "raw_query")}
        csv = tmp_path / "acc.csv"
        cio.write_accuracy_csv(csv, reports)
        out = tmp_path / "acc.svg"
        accuracy_bars_svg(csv, out)
        root = ET.parse(out).getroot()
        rects = [el for el in root.iter() if el.tag.endswith("rect")
                 and "data-strategy" in el.attrib]
        assert len(rects) == 2
        columns = cio.read_accuracy_csv(csv)
        for rect in rects:
            mean = np.mean(columns[rect.attrib["data-strategy"]])
            assert float(rect.attrib["data-mean"]) == mean
            assert float(rect.attrib["height"]) == mean * PLOT_H

    def test_malformed_csv_fails(self, tmp_path):
        bad = tmp_path / "acc.csv"
        bad.write_text("episode,a\n0,nan_text\n")
        with pytest.raises(ConfigError):
            accuracy_bars_svg(bad, tmp_path / "out.svg")


class TestCli:
    def test_invalid_config_exits_2(self, tmp_path, capsys):
        rc = main(["train", "--out", str(tmp_path), "--epochs", "0"])
        assert rc == 2
        assert "error" in capsys.readouterr().err

    def test_gen_data_then_train_then_eval(self, tmp_path):
        data_dir = tmp_path / "data"
        run_dir = tmp_path / "run"
        rc = main(["gen-data", "--out", str(data_dir), *TINY_FLAGS])
        assert rc == 0
        rc = main(["train", "--out", str(run_dir), "--data", str(data_dir), *TINY_FLAGS,
                   "--epochs", "2", "--batch-size", "6", "--batches-per-epoch", "1"])
        assert rc == 0
        assert (run_dir / "checkpoint.txt").exists()
        loss_rows = cio.read_loss_csv(run_dir / "loss.csv")
        assert len(loss_rows) == 2
        rc = main(["eval", "--out", str(run_dir), "--data", str(data_dir), *TINY_FLAGS,
                   "--checkpoint", str(run_dir / "checkpoint.txt"),
                   "--n-way", "2", "--k-shot", "1", "--q-per-class", "2",
                   "--episodes", "3", "--strategies", "class_similarity,weighted_query",
                   "--with-baseline"])
        assert rc == 0
        payload = json.loads((run_dir / "report.json").read_text())
        assert payload["strategies"]["weighted_query"]["n_episodes"] == 3
        columns = cio.read_accuracy_csv(run_dir / "accuracy.csv")
        assert {len(v) for v in columns.values()} == {3}
        for name, stats in payload["strategies"].items():
            assert abs(stats["mean"] - np.mean(columns[name])) < 1e-12

    def test_rerun_is_byte_identical(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            run_dir = tmp_path / sub
            rc = main(["train", "--out", str(run_dir), *TINY_FLAGS,
                       "--epochs", "2", "--batch-size", "6", "--batches-per-epoch", "1",
                       "--seed", "5"])
            assert rc == 0
            outs.append(((run_dir / "loss.csv").read_bytes(),
                         (run_dir / "checkpoint.txt").read_bytes()))
        assert outs[0] == outs[1]

    def test_export_embeddings(self, tmp_path):
        run_dir = tmp_path / "run"
        rc = main(["train", "--out", str(run_dir), *TINY_FLAGS,
                   "--epochs", "1", "--batch-size", "4", "--batches-per-epoch", "1"])
        assert rc == 0
        rc = main(["export-embeddings", "--out", str(run_dir), *TINY_FLAGS,
                   "--checkpoint", str(run_dir / "checkpoint.txt"), "--pool", "query"])
        assert rc == 0
        lines = (run_dir / "embeddings_query.csv").read_text().splitlines()
        assert lines[0].startswith("sample_id,class_id,pool,rep_0")
        assert lines[0].count("rep_") == 8 and lines[0].count("backbone_") == 8
        assert len(lines) == 1 + 3 * 6

    def test_plot_command(self, tmp_path):
        csv = tmp_path / "loss.csv"
        cio.write_loss_csv(csv, [1.0, 0.7])
        rc = main(["plot", "--loss-csv", str(csv), "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "loss.svg").exists()

    def test_plot_with_empty_csv_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "acc.csv"
        bad.write_text("episode,a\n")
        rc = main(["plot", "--accuracy-csv", str(bad), "--out", str(tmp_path)])
        assert rc == 2

    def test_missing_checkpoint_exits_2(self, tmp_path):
        rc = main(["eval", "--out", str(tmp_path), "--checkpoint",
                   str(tmp_path / "nope.txt"), *TINY_FLAGS])
        assert rc == 2

    def test_outdir_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CONDREP_OUTDIR", str(tmp_path / "envout"))
        csv = tmp_path / "loss.csv"
        cio.write_loss_csv(csv, [1.0, 0.7])
        rc = main(["plot", "--loss-csv", str(csv)])
        assert rc == 0
        assert (tmp_path / "envout" / "loss.svg").exists()
