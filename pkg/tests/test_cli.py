"""CLI surface: exit codes, file outputs, determinism, oracle checks."""

import json
import math
import os

import numpy as np
import pytest

from ume.cli import main
from ume.checkpoint import load_checkpoint
from ume.metrics import read_rttm
from ume.simulate import read_wav


def write_config(tmp_path, **overrides):
    raw = {
        "data": {"num_items": 4, "speakers": 2, "tokens_per_utterance": [2, 3],
                 "token_duration_s": 0.05, "seed": 5},
        "model": {"encoder": {"layers": 2},
                  "sep": {"tcn_blocks": 1, "tcn_layers": 2},
                  "asr": {"speaker_blocks": 1, "decoder_blocks": 1}},
        "train": {"steps": 3, "batch_size": 2, "warmup_steps": 2, "lr_peak": 1e-3,
                  "seed": 1, "fusion_mode": "rwse", "checkpoint_interval": 2},
        "eval": {"collars": [0.0, 0.25], "median_frames": 3},
    }
    for key, value in overrides.items():
        section, _, field = key.partition(".")
        raw[section][field] = value
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset + one trained checkpoint shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root)
    data_dir = root / "data"
    assert main(["gen", "--config", config, "--out", str(data_dir)]) == 0
    train_dir = root / "train"
    assert main(["train", "--config", config, "--data", str(data_dir / "manifest.jsonl"),
                 "--out", str(train_dir)]) == 0
    return {"root": root, "config": config, "data": data_dir, "train": train_dir,
            "ckpt": str(train_dir / "final.ckpt")}


class TestGen:
    def test_counts_and_files(self, workspace):
        manifest = workspace["data"] / "manifest.jsonl"
        lines = manifest.read_text().splitlines()
        assert len(lines) == 4
        wavs = sorted(p.name for p in workspace["data"].glob("*.wav"))
        assert len(wavs) == 4 * 3          # mixture + 2 sources per item

    def test_same_seed_byte_identical(self, tmp_path):
        config = write_config(tmp_path)
        for name in ("a", "b"):
            assert main(["gen", "--config", config, "--out", str(tmp_path / name)]) == 0
        a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert a == b

    def test_invalid_speaker_count_exit_2(self, tmp_path, capsys):
        config = write_config(tmp_path, **{"data.speakers": 5})
        assert main(["gen", "--config", config, "--out", str(tmp_path / "x")]) == 2
        assert "data.speakers" in capsys.readouterr().err


class TestTrain:
    def test_checkpoints_and_log_written(self, workspace):
        train_dir = workspace["train"]
        assert (train_dir / "final.ckpt").exists()
        assert (train_dir / "step_000002.ckpt").exists()
        assert (train_dir / "loss_log.csv").exists()
        assert (train_dir / "loss_curves.png").exists()

    def test_checkpoint_carries_model_config(self, workspace):
        _, meta = load_checkpoint(workspace["ckpt"])
        assert meta["model"]["num_speakers"] == 2
        assert meta["step"] == 3

    def test_fusion_modes_have_distinct_parameter_sets(self, tmp_path, workspace):
        names = {}
        for mode in ("none", "weighted_sum", "rwse"):
            config = write_config(tmp_path, **{"train.fusion_mode": mode,
                                               "train.steps": 1,
                                               "train.warmup_steps": 1})
            out = tmp_path / f"train_{mode}"
            assert main(["train", "--config", config,
                         "--data", str(workspace["data"] / "manifest.jsonl"),
                         "--out", str(out)]) == 0
            arrays, _ = load_checkpoint(out / "final.ckpt")
            names[mode] = set(arrays)
        assert len({frozenset(v) for v in names.values()}) == 3
        assert names["rwse"] - names["none"] == {
            f"fusion.rwse.{task}_logits" for task in ("diar", "sep", "asr")}

    def test_init_asr_checkpoint_loads(self, tmp_path, workspace):
        config = write_config(tmp_path, **{"train.steps": 1, "train.warmup_steps": 1})
        out = tmp_path / "warm"
        code = main(["train", "--config", config,
                     "--data", str(workspace["data"] / "manifest.jsonl"),
                     "--out", str(out), "--init-asr", workspace["ckpt"]])
        assert code == 0

    def test_divergence_exit_3(self, tmp_path, workspace, capsys):
        config = write_config(tmp_path, **{"train.lr_peak": 1e6, "train.steps": 30})
        code = main(["train", "--config", config,
                     "--data", str(workspace["data"] / "manifest.jsonl"),
                     "--out", str(tmp_path / "div")])
        assert code == 3
        assert "diverged" in capsys.readouterr().err


class TestEval:
    def test_report_files_written(self, workspace, tmp_path):
        out = tmp_path / "eval"
        code = main(["eval", "--ckpt", workspace["ckpt"],
                     "--data", str(workspace["data"] / "manifest.jsonl"),
                     "--out", str(out), "--median", "3", "--figures", "1"])
        assert code == 0
        report = json.loads(open(out / "report.json").read())
        assert len(report["per_item"]) == 4
        assert "wer" in report["aggregate"]
        assert (out / "report.csv").exists()
        assert (out / "hyps.json").exists()
        assert (out / "figures" / "layer_weights.png").exists()
        item0 = report["per_item"][0]["id"]
        assert (out / "figures" / f"{item0}_separation.png").exists()

    def test_oracle_passthrough_hits_ceilings(self, workspace, tmp_path):
        out = tmp_path / "oracle"
        code = main(["eval", "--ckpt", workspace["ckpt"],
                     "--data", str(workspace["data"] / "manifest.jsonl"),
                     "--out", str(out), "--median", "1", "--oracle", "--figures", "0"])
        assert code == 0
        report = json.loads(open(out / "report.json").read())
        agg = report["aggregate"]
        assert agg["der"] == 0.0
        assert agg["wer"] == 0.0
        assert agg["sdr"] == math.inf
        assert agg["si_snri"] > 40.0
        for item in report["per_item"]:
            assert all(v == math.inf for v in item["si_snr"])

    def test_collar_monotone_on_model_output(self, workspace, tmp_path):
        out = tmp_path / "collar"
        code = main(["eval", "--ckpt", workspace["ckpt"],
                     "--data", str(workspace["data"] / "manifest.jsonl"),
                     "--out", str(out), "--median", "3", "--tasks", "diar",
                     "--collar", "0.0", "0.25", "--figures", "0"])
        assert code == 0
        report = json.loads(open(out / "report.json").read())
        assert report["aggregate"]["der@0.25"] <= report["aggregate"]["der@0"]

    def test_mismatched_checkpoint_exit_2(self, tmp_path, workspace, capsys):
        bad = tmp_path / "bad.ckpt"
        from ume.checkpoint import save_checkpoint
        save_checkpoint(bad, {"junk": np.zeros(3, np.float32)}, meta={})
        code = main(["eval", "--ckpt", str(bad),
                     "--data", str(workspace["data"] / "manifest.jsonl"),
                     "--out", str(tmp_path / "e")])
        assert code == 2


class TestInfer:
    def test_outputs_exist_and_are_deterministic(self, workspace, tmp_path):
        wav = str(workspace["data"] / "item_00000_mix.wav")
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            code = main(["infer", "--ckpt", workspace["ckpt"], "--wav", wav,
                         "--out", str(out)])
            assert code == 0
        wave, rate = read_wav(wav)
        est1, _ = read_wav(out_a / "item_00000_mix_est1.wav")
        est2, _ = read_wav(out_a / "item_00000_mix_est2.wav")
        assert len(est1) == len(wave) and len(est2) == len(wave)

        rttm = read_rttm(out_a / "item_00000_mix.rttm")
        duration = len(wave) / rate
        for spans in rttm.get("item_00000_mix", {}).values():
            for onset, offset in spans:
                assert 0.0 <= onset <= offset <= duration + 1e-6

        hyps = json.loads(open(out_a / "item_00000_mix_hyps.json").read())
        assert "item_00000_mix" in hyps and len(hyps["item_00000_mix"]) == 2

        for name in ("item_00000_mix_est1.wav", "item_00000_mix.rttm",
                     "item_00000_mix_hyps.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_wrong_sample_rate_exit_2(self, workspace, tmp_path, capsys):
        from ume.simulate import write_wav
        weird = tmp_path / "weird.wav"
        write_wav(weird, np.zeros(4000), 8000)
        code = main(["infer", "--ckpt", workspace["ckpt"], "--wav", str(weird),
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert "2000" in capsys.readouterr().err
