import csv
import io
import json
import os
import re
import struct
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from nctrojan import collapse
from nctrojan.errors import FormatError
from nctrojan.harness import checkpoint, config, report
from nctrojan.harness.cli import main
from nctrojan.harness.experiment import run_experiment
from nctrojan.model import Model, cnn_layers, mlp_layers
from nctrojan.rng import RngStream
from nctrojan.trainer import MetricTimeline, TimelineRow

SMALL = {
    "dataset": {"n_per_class": 30, "n_test_per_class": 10},
    "architecture": {"hidden": 32, "feature_dim": 8},
    "poison": {"delta": 0.1},
    "train": {"epochs": 15, "metric_every": 5},
    "cleanse": {"method": "etf_ft", "fraction": 0.2, "finetune": {"epochs": 3}},
}


def write_config(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


class TestConfig:
    def test_defaults_fill_every_field(self):
        cfg = config.resolve({})
        assert cfg["poison"] is None and cfg["seeds"]["etf"] == 3
        assert cfg["cleanse"]["finetune"]["epochs"] == 100

    def test_poison_defaults(self):
        cfg = config.resolve({"poison": {}})
        assert cfg["poison"]["delta"] == 0.1 and cfg["poison"]["trigger"]["patch"]["size"] == [3, 3]

    @pytest.mark.parametrize("raw", [{"bogus": 1}, {"train": {"epochz": 3}}, {"train": {"epochs": 0}},
                                     {"seeds": {"data": -1}}, {"adaptive": True},
                                     {"cleanse": {"method": "magic"}}])
    def test_rejects(self, raw):
        with pytest.raises(config.ConfigError):
            config.resolve(raw)

    def test_seed_overrides(self):
        cfg = config.apply_seed_overrides(config.resolve({}), ["etf=0x10", "data=7"])
        assert cfg["seeds"]["etf"] == 16 and cfg["seeds"]["data"] == 7
        with pytest.raises(config.ConfigError):
            config.apply_seed_overrides(cfg, ["nope=1"])

    def test_dumps_resolves_to_itself(self):
        cfg = config.resolve(SMALL)
        assert config.resolve(json.loads(config.dumps(cfg))) == cfg


def small_model(kind="mlp"):
    if kind == "mlp":
        layers = mlp_layers((1, 8, 8), 16, 6)
    else:
        layers = cnn_layers((1, 8, 8), 6, (2, 3))
    return Model.build(layers, (1, 8, 8), 4, RngStream(0, "init"), kind)


def independent_reader(path):
    """Decode an NCTJ file from the byte layout alone."""
    raw = open(path, "rb").read()
    assert raw[:4] == b"NCTJ"
    version, head_len = struct.unpack("<II", raw[4:12])
    header = json.loads(raw[12:12 + head_len])
    pos = 12 + head_len
    out = {}
    for p in header["params"]:
        count = int(np.prod(p["shape"]))
        out[p["name"]] = np.array(struct.unpack(f"<{count}f", raw[pos:pos + 4 * count]),
                                  np.float32).reshape(p["shape"])
        pos += 4 * count
    assert pos == len(raw)
    return version, header, out


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["mlp", "cnn"])
    def test_round_trip(self, tmp_path, kind):
        model = small_model(kind)
        model.params.set_frozen("head.weight")
        path = checkpoint.save_checkpoint(model, tmp_path / "m.nctj", epoch=3, seeds={"init": 0})
        loaded = checkpoint.load_checkpoint(path)
        for name, t in model.params.items():
            assert loaded.params[name].data.tobytes() == t.data.tobytes()
        assert loaded.params.frozen_flags() == model.params.frozen_flags()
        x = np.random.default_rng(0).random((10, 1, 8, 8)).astype(np.float32)
        assert np.array_equal(loaded.forward(x).data, model.forward(x).data)

    def test_byte_accounting_oracle(self, tmp_path):
        model = small_model()
        path = checkpoint.save_checkpoint(model, tmp_path / "m.nctj", epoch=9)
        version, header, params = independent_reader(path)
        assert version == checkpoint.FORMAT_VERSION and header["epoch"] == 9
        assert header["K"] == 4 and header["m"] == 6
        for name, arr in params.items():
            assert np.array_equal(arr, model.params[name].data)

    def test_truncated_payload(self, tmp_path, monkeypatch):
        path = checkpoint.save_checkpoint(small_model(), tmp_path / "m.nctj")
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-4])
        loads = []
        monkeypatch.setattr(np, "frombuffer", lambda *a, **k: loads.append(1))
        with pytest.raises(FormatError):
            checkpoint.load_checkpoint(path)
        assert not loads

    def test_bad_magic_and_version(self, tmp_path):
        path = checkpoint.save_checkpoint(small_model(), tmp_path / "m.nctj")
        raw = bytearray(open(path, "rb").read())
        bad = tmp_path / "bad.nctj"
        bad.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            checkpoint.load_checkpoint(bad)
        raw[4:8] = struct.pack("<I", 99)
        bad.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            checkpoint.load_checkpoint(bad)


def fake_timeline(epochs, tpt=None, K=4):
    tl = MetricTimeline(tpt_start_epoch=tpt)
    rng = np.random.default_rng(0)
    for e in epochs:
        rep = collapse.NCMetricsReport(*rng.random(7).tolist(), per_class_row_norms_W=rng.random(K).tolist(),
                                       per_class_row_norms_M=rng.random(K).tolist(), epoch=e)
        tl.append(TimelineRow(e, 0.0 if tpt and e >= tpt else 0.25, 0.9, None, rep))
    return tl


class TestReport:
    def test_golden_header(self):
        assert ",".join(report.csv_header(3)) == (
            "epoch,train_err,acc,asr,nc1,nc2_norm_M,nc2_norm_W,nc2_angle_M,nc2_angle_W,nc3,nc4,"
            "w_norm_0,w_norm_1,w_norm_2")

    def test_single_row(self, tmp_path):
        files = report.emit_report(fake_timeline([5]), tmp_path)
        lines = (tmp_path / "timeline.csv").read_text().splitlines()
        assert len(lines) == 2
        svg = ET.parse(tmp_path / "plots" / "nc1.svg").getroot()
        ns = "{http://www.w3.org/2000/svg}"
        assert len(svg.findall(f"{ns}circle")) == 1
        assert all(os.path.getsize(f) > 0 for f in files)

    def test_parse_back(self, tmp_path):
        tl = fake_timeline([1, 2, 3, 10])
        report.write_timeline_csv(tl, tmp_path / "t.csv")
        text = (tmp_path / "t.csv").read_text()
        rows = [line.split(",") for line in text.strip().split("\n")]
        header, body = rows[0], rows[1:]
        for rec, row in zip(report.timeline_records(tl), body):
            for col, cell in zip(header, row):
                want = rec[col]
                if want is None:
                    assert cell == ""
                elif col == "epoch":
                    assert int(cell) == want
                else:
                    assert float(cell) == want and cell == repr(float(want))

    def test_reader_round_trip(self, tmp_path):
        tl = fake_timeline([1, 5, 9], tpt=5)
        report.write_timeline_csv(tl, tmp_path / "t.csv")
        rows = report.read_timeline_csv(tmp_path / "t.csv")
        assert [r["epoch"] for r in rows] == [1, 5, 9]
        assert report.tpt_from_rows(rows) == 5

    def test_marker_position(self, tmp_path):
        epochs = [1, 4, 10, 20, 50]
        report.emit_report(fake_timeline(epochs, tpt=10), tmp_path)
        root = ET.parse(tmp_path / "plots" / "nc3.svg").getroot()
        line = [el for el in root.iter() if el.get("class") == "tpt"][0]
        want = report.LEFT + (10 - 1) * (report.WIDTH - report.RIGHT - report.LEFT) / (50 - 1)
        assert float(line.get("x1")) == pytest.approx(want) == float(line.get("x2"))
        assert "stroke-dasharray" in line.attrib
        assert root.get("viewBox") == "0 0 800 480"

    def test_no_marker_without_tpt(self, tmp_path):
        report.emit_report(fake_timeline([1, 2]), tmp_path)
        assert 'class="tpt"' not in (tmp_path / "plots" / "nc1.svg").read_text()

    def test_empty_timeline(self, tmp_path):
        with pytest.raises(ValueError):
            report.emit_report(MetricTimeline(), tmp_path)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg_path = out / "cfg.json"
    cfg_path.write_text(json.dumps(SMALL))
    code = main(["run", "--config", str(cfg_path), "--out", str(out / "res")])
    return code, out / "res"


class TestRun:
    def test_files_exist(self, small_run):
        code, out = small_run
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["incomplete"] is False
        for rel in summary["files"] + ["summary.json", "config.resolved.json", "timeline.csv"]:
            assert (out / rel).stat().st_size > 0
        for key in ("acc_before", "asr_before", "acc_after", "asr_after", "final_report"):
            assert summary[key] is not None
        assert "checkpoints/post_cleanse.nctj" in summary["files"]

    def test_resolved_config_reproduces_summary(self, small_run, tmp_path):
        _, out = small_run
        code = main(["run", "--config", str(out / "config.resolved.json"), "--out", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "summary.json").read_bytes() == (out / "summary.json").read_bytes()

    def test_benign_has_null_asr(self, tmp_path):
        raw = dict(SMALL, poison=None, cleanse={"method": "none"})
        summary = run_experiment(config.resolve(raw), str(tmp_path))
        assert summary["asr_before"] is None and summary["asr_after"] is None
        assert not (tmp_path / "poison_ledger.json").exists()

    def test_env_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NCTJ_OUT", str(tmp_path / "env"))
        raw = dict(SMALL, cleanse={"method": "none"}, train={"epochs": 2})
        run_experiment(config.resolve(raw))
        assert (tmp_path / "env" / "summary.json").exists()

    def test_stage_failure(self, tmp_path, capsys):
        raw = dict(SMALL, train={"epochs": 3, "lr": 1e9, "lr_schedule": "constant"})
        code = main(["run", "--config", write_config(tmp_path, raw), "--out", str(tmp_path / "o")])
        assert code == 2
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summary["incomplete"] is True and summary["failed_stage"] == "train"
        assert "train" in capsys.readouterr().err


class TestCli:
    def test_etf(self, capsys):
        assert main(["etf", "--k", "4", "--m", "8", "--seed", "7"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["max_gram_deviation"] <= 1e-6

    def test_missing_config(self, capsys):
        assert main(["run", "--config", "/no/such/file.json"]) == 1
        assert "usage" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [[], ["run"], ["etf", "--k", "4"], ["frobnicate"],
                                      ["etf", "--k", "4", "--m", "8", "--seed", "1", "--bogus"]])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == 1
        assert "usage" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path):
        assert main(["run", "--config", write_config(tmp_path, {"train": {"epochs": -1}})]) == 1

    def test_metrics(self, small_run, capsys):
        _, out = small_run
        code = main(["metrics", "--checkpoint", str(out / "checkpoints" / "post_train.nctj"),
                     "--data", "config:" + str(out / "config.resolved.json")])
        assert code == 0
        rep = json.loads(capsys.readouterr().out)
        final = json.loads((out / "summary.json").read_text())["final_report"]
        # the run reports on the poisoned training set, this on the clean one
        assert set(rep) == set(final)

    def test_eval_matches_summary(self, small_run, capsys):
        _, out = small_run
        code = main(["eval", "--checkpoint", str(out / "checkpoints" / "post_cleanse.nctj"),
                     "--test", "config:" + str(out / "config.resolved.json") + ",split=test", "--asr"])
        assert code == 0
        got = json.loads(capsys.readouterr().out)
        summary = json.loads((out / "summary.json").read_text())
        assert got == {"acc": summary["acc_after"], "asr": summary["asr_after"]}

    def test_report(self, small_run, tmp_path, capsys):
        _, out = small_run
        assert main(["report", "--timeline", str(out / "timeline.csv"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "nc2_norm_W.svg").exists()

    def test_corrupt_checkpoint_is_validation_error(self, tmp_path):
        (tmp_path / "x.nctj").write_bytes(b"NCTJ")
        assert main(["eval", "--checkpoint", str(tmp_path / "x.nctj"), "--test", "synthetic:K=4,n=5"]) == 1

    def test_synthetic_spec(self, capsys):
        from nctrojan.harness.cli import parse_data_spec

        d = parse_data_spec("synthetic:K=3,n=7,shape=1x8x8,sigma=0,seed=2")
        assert len(d) == 21 and d.num_classes == 3
