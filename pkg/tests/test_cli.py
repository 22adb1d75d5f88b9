import json

import numpy as np
import pytest

from deepcl import cli
from deepcl import network as N
from deepcl import tensor as T
from deepcl.synthdata import read_dataset

TINY = {"stage_channels": [4, 4, 4, 8, 8], "embed_dim": 4, "batch_size": 4}
STILL_SCENE = {"scene": {"p_change": 0.0, "shift_px": [0], "gain": [1.0, 1.0],
                         "bias": [0.0, 0.0], "noise_sigma": 0.0}}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run_manifest(d):
    return json.loads((d / "run_manifest.json").read_text())


def dir_bytes(d, skip=("run_manifest.json",)):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(d), "--n", "12", "--seed", "3", "--size", "32"]) == 0
    return d


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    return write_json(tmp_path_factory.mktemp("cfg") / "tiny.json", TINY)


@pytest.fixture(scope="module")
def full_ckpt(dataset, tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    code = cli.main(["train", "--data", str(dataset), "--out", str(out), "--loss", "hsac",
                     "--decoder", "metric", "--epochs", "1", "--config", tiny_cfg])
    assert code == 0
    return out


class TestGenData:
    def test_rerun_is_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert cli.main(["gen-data", "--out", str(tmp_path / name), "--n", "5", "--seed", "7",
                             "--size", "32"]) == 0
        assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")

    def test_run_manifest(self, tmp_path):
        cli.main(["gen-data", "--out", str(tmp_path), "--n", "2", "--seed", "4", "--size", "32"])
        m = run_manifest(tmp_path)
        assert m["command"] == "gen-data" and m["seeds"] == [4]
        assert m["config"]["n"] == 2 and m["config"]["scene"]["size"] == 32
        assert m["version"] and m["duration_s"] >= 0
        assert m["artifacts"] == [str(tmp_path / "manifest.json")]

    def test_pseudo_only(self, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path), "--n", "6", "--pseudo-only",
                         "--size", "32"]) == 0
        samples = read_dataset(tmp_path)
        assert all(not s.mask.any() for s in samples)
        assert all(not np.array_equal(s.img_t1, s.img_t2) for s in samples)

    @pytest.mark.parametrize("argv", [["--n", "0"], ["--n", "2", "--size", "48"], ["--n", "x"]])
    def test_usage_errors(self, tmp_path, argv):
        with_exit = None
        try:
            with_exit = cli.main(["gen-data", "--out", str(tmp_path)] + argv)
        except SystemExit as exc:  # argparse type errors
            with_exit = exc.code
        assert with_exit == cli.EXIT_USAGE

    def test_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DEEPCL_SEED", "11")
        cli.main(["gen-data", "--out", str(tmp_path / "env"), "--n", "2", "--size", "32"])
        cli.main(["gen-data", "--out", str(tmp_path / "flag"), "--n", "2", "--size", "32",
                  "--seed", "11"])
        assert run_manifest(tmp_path / "env")["seeds"] == [11]
        assert dir_bytes(tmp_path / "env") == dir_bytes(tmp_path / "flag")

    def test_config_file(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"scene": {"size": 32, "p_change": 0.0}})
        assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--n", "3",
                         "--config", cfg]) == 0
        assert run_manifest(tmp_path / "d")["config"]["scene"]["p_change"] == 0.0


class TestTrain:
    def test_full_model(self, full_ckpt):
        m = run_manifest(full_ckpt)
        assert m["command"] == "train"
        assert m["config"]["use_hsac"] and m["config"]["use_metric_induction"]
        assert N.load_checkpoint(full_ckpt / "model.dclm").config.decoder == "metric"
        assert (full_ckpt / "train_log.csv").exists()

    def test_contrastive_metric_only(self, dataset, tiny_cfg, tmp_path):
        assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path), "--loss", "con",
                         "--decoder", "none", "--epochs", "1", "--config", tiny_cfg]) == 0
        m = run_manifest(tmp_path)["config"]
        assert m["use_con"] and not m["use_hsac"] and not m["use_seg"]
        assert N.load_checkpoint(tmp_path / "model.dclm").config.decoder == "none"

    def test_nothing_to_train(self, dataset, tmp_path):
        assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path), "--loss", "none",
                         "--decoder", "none"]) == cli.EXIT_USAGE
        assert not (tmp_path / "model.dclm").exists()

    def test_flag_beats_config_beats_default(self, dataset, tmp_path):
        cfg = write_json(tmp_path / "c.json", {**TINY, "epochs": 3, "loss": {"tau": 0.5}, "lr0": 5e-4})
        assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"),
                         "--epochs", "1", "--config", cfg]) == 0
        m = run_manifest(tmp_path / "o")["config"]
        assert m["epochs"] == 1  # flag
        assert m["loss"]["tau"] == 0.5 and m["lr0"] == 5e-4  # config file
        assert m["weight_decay"] == 0.01  # default

    def test_unknown_config_key(self, dataset, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"epochz": 3})
        assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"),
                         "--config", cfg]) == cli.EXIT_USAGE

    def test_invalid_value(self, dataset, tmp_path):
        assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path),
                         "--lr", "-1"]) == cli.EXIT_USAGE

    def test_missing_data(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path),
                         "--epochs", "1"]) == cli.EXIT_RUNTIME

    def test_seed_reproducible(self, dataset, tiny_cfg, tmp_path):
        for name in ("a", "b"):
            cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / name), "--seed", "5",
                      "--epochs", "1", "--config", tiny_cfg])
        assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")


class TestEval:
    def test_seg_and_metric_reports(self, full_ckpt, dataset, tmp_path, capsys):
        ckpt = str(full_ckpt / "model.dclm")
        for mode in ("seg", "metric"):
            assert cli.main(["eval", "--ckpt", ckpt, "--data", str(dataset), "--mode", mode,
                             "--out", str(tmp_path)]) == 0
        seg = json.loads((tmp_path / "eval_seg.json").read_text())
        met = json.loads((tmp_path / "eval_metric.json").read_text())
        assert seg["meta"]["mode"] == "seg" and met["meta"]["mode"] == "metric"
        assert "threshold" in met["meta"] and "threshold" not in seg["meta"]
        assert (tmp_path / "eval_seg.csv").exists() and (tmp_path / "eval_metric.csv").exists()
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert printed["mode"] == "metric" and 0 <= printed["f1"] <= 1

    def test_rerun_identical(self, full_ckpt, dataset, tmp_path):
        ckpt = str(full_ckpt / "model.dclm")
        for name in ("a", "b"):
            cli.main(["eval", "--ckpt", ckpt, "--data", str(dataset), "--mode", "metric",
                      "--out", str(tmp_path / name)])
        assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")

    def test_auto_threshold_holds_out(self, full_ckpt, dataset, tmp_path):
        cli.main(["eval", "--ckpt", str(full_ckpt / "model.dclm"), "--data", str(dataset),
                  "--mode", "metric", "--out", str(tmp_path)])
        meta = json.loads((tmp_path / "eval_metric.json").read_text())["meta"]
        assert meta["calibration_samples"] + meta["scored_samples"] == 12
        assert meta["scored_samples"] > 0

    def test_fixed_threshold(self, full_ckpt, dataset, tmp_path):
        cli.main(["eval", "--ckpt", str(full_ckpt / "model.dclm"), "--data", str(dataset),
                  "--mode", "metric", "--thre", "0.7", "--out", str(tmp_path)])
        meta = json.loads((tmp_path / "eval_metric.json").read_text())["meta"]
        assert meta["threshold"] == 0.7 and meta["scored_samples"] == 12

    def test_bad_threshold(self, full_ckpt, dataset, tmp_path):
        assert cli.main(["eval", "--ckpt", str(full_ckpt / "model.dclm"), "--data", str(dataset),
                         "--mode", "metric", "--thre", "high"]) == cli.EXIT_USAGE

    def test_seg_needs_decoder(self, dataset, tmp_path):
        params = N.init_params(N.EncoderConfig(stage_channels=(4, 4, 4, 8, 8), embed_dim=4,
                                               input_size=32, decoder="none"), 0)
        N.save_checkpoint(params, tmp_path / "m.dclm")
        assert cli.main(["eval", "--ckpt", str(tmp_path / "m.dclm"), "--data", str(dataset),
                         "--mode", "seg"]) == cli.EXIT_USAGE

    def test_still_scenes_score_perfectly(self, tmp_path):
        # identical epochs: distance is zero everywhere, so nothing is flagged and nothing is missed
        cfg = write_json(tmp_path / "c.json", STILL_SCENE)
        cli.main(["gen-data", "--out", str(tmp_path / "d"), "--n", "4", "--size", "32", "--config", cfg])
        params = N.init_params(N.EncoderConfig(stage_channels=(4, 4, 4, 8, 8), embed_dim=4,
                                               input_size=32, decoder="none"), 0)
        N.save_checkpoint(params, tmp_path / "m.dclm")
        assert cli.main(["eval", "--ckpt", str(tmp_path / "m.dclm"), "--data", str(tmp_path / "d"),
                         "--mode", "metric", "--thre", "0.5", "--out", str(tmp_path / "o")]) == 0
        report = json.loads((tmp_path / "o" / "eval_metric.json").read_text())["rows"][0]
        assert report["f1"] == 1.0 and report["iou"] == 1.0

    def test_corrupt_checkpoint(self, full_ckpt, dataset, tmp_path):
        blob = bytearray((full_ckpt / "model.dclm").read_bytes())
        blob[-10] ^= 0xFF
        (tmp_path / "bad.dclm").write_bytes(bytes(blob))
        assert cli.main(["eval", "--ckpt", str(tmp_path / "bad.dclm"), "--data", str(dataset),
                         "--mode", "seg"]) == cli.EXIT_RUNTIME


class TestSweep:
    def test_empty_seed_list(self, dataset, tmp_path):
        assert cli.main(["sweep", "--kind", "ablation", "--data", str(dataset), "--out",
                         str(tmp_path), "--seeds", ""]) == cli.EXIT_USAGE

    def test_temperature_resumes(self, dataset, tiny_cfg, tmp_path):
        argv = ["sweep", "--kind", "temperature", "--data", str(dataset), "--out", str(tmp_path),
                "--seeds", "0", "--taus", "0.2,1", "--epochs", "1", "--config", tiny_cfg]
        assert cli.main(argv) == 0
        cells = sorted((tmp_path / "cells").glob("*.json"))
        assert [c.name for c in cells] == ["tau0.2_seed0.json", "tau1_seed0.json"]
        stamps = {c.name: c.stat().st_mtime_ns for c in cells}
        table = (tmp_path / "temperature.csv").read_text()
        assert cli.main(argv) == 0
        assert {c.name: c.stat().st_mtime_ns for c in cells} == stamps
        assert (tmp_path / "temperature.csv").read_text() == table
        assert len(table.strip().splitlines()) == 3
        curve = (tmp_path / "gradient_weight_curve.csv").read_text().splitlines()
        assert curve[0] == "tau,y,d_cos,weight" and len(curve) == 1 + 2 * 2 * 201
        assert run_manifest(tmp_path)["seeds"] == [0]

    def test_ablation_one_row_per_cell(self, dataset, tmp_path):
        cfg = write_json(tmp_path / "c.json", {**TINY, "epochs": 1})
        assert cli.main(["sweep", "--kind", "ablation", "--data", str(dataset), "--out",
                         str(tmp_path / "o"), "--seeds", "0", "--pseudo", str(dataset),
                         "--config", cfg]) == 0
        rows = json.loads((tmp_path / "o" / "ablation.json").read_text())["rows"]
        assert [r["row"] for r in rows] == [1, 2, 3, 4, 5, 6]
        assert run_manifest(tmp_path / "o")["config"]["epochs"] == 1


class TestGradcheck:
    def test_losses_pass(self, capsys):
        assert cli.main(["gradcheck", "--scope", "losses", "--trials", "1"]) == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out and "max_rel_error=" in out

    def test_wrong_backward_is_reported(self, monkeypatch, capsys):
        monkeypatch.setattr(T, "_sigmoid_backward", lambda y, g: g * y)
        assert cli.main(["gradcheck", "--scope", "losses", "--trials", "1"]) == cli.EXIT_GRADCHECK
        assert "FAIL" in capsys.readouterr().out

    def test_zero_trials(self):
        assert cli.main(["gradcheck", "--trials", "0"]) == cli.EXIT_USAGE


def test_unknown_command():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == cli.EXIT_USAGE
