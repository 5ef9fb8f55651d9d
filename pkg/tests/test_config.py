"""Run-config parsing: defaults, derivation rules, and error paths."""

import json

import pytest

from ume.config import load_run_config, parse_run_config
from ume.errors import ConfigError


def minimal():
    return {
        "data": {"num_items": 4, "speakers": 2, "seed": 3},
        "train": {"steps": 10, "batch_size": 2, "warmup_steps": 5, "seed": 7,
                  "fusion_mode": "rwse"},
    }


class TestParse:
    def test_defaults_fill_in(self):
        run = parse_run_config(minimal())
        assert run.data.sample_rate == 2000
        assert run.model.encoder.layers == 4
        assert run.eval.median_frames == 11
        assert run.weights.sep == 0.34

    def test_model_identity_derived_from_data(self):
        raw = minimal()
        raw["data"]["speakers"] = 3
        raw["data"]["vocab_size"] = 5
        run = parse_run_config(raw)
        assert run.model.num_speakers == 3
        assert run.model.vocab_size == 5
        assert run.model.fusion_mode == "rwse"
        assert run.model.seed == 7

    def test_unknown_field_names_path(self):
        raw = minimal()
        raw["data"]["speaker_count"] = 2
        with pytest.raises(ConfigError, match=r"data\.speaker_count"):
            parse_run_config(raw)

    def test_unknown_section_rejected(self):
        raw = minimal()
        raw["optimizer"] = {}
        with pytest.raises(ConfigError, match="optimizer"):
            parse_run_config(raw)

    def test_direct_speaker_count_in_model_rejected(self):
        raw = minimal()
        raw["model"] = {"num_speakers": 3}
        with pytest.raises(ConfigError, match=r"model\.num_speakers"):
            parse_run_config(raw)

    def test_invalid_speakers_five(self):
        raw = minimal()
        raw["data"]["speakers"] = 5
        with pytest.raises(ConfigError, match=r"data\.speakers"):
            parse_run_config(raw)

    def test_invalid_fusion_mode(self):
        raw = minimal()
        raw["train"]["fusion_mode"] = "average"
        with pytest.raises(ConfigError, match="fusion_mode"):
            parse_run_config(raw)

    def test_loss_weights_all_zero_rejected(self):
        raw = minimal()
        raw["train"]["loss_weights"] = {"asr": 0, "diar": 0, "sep": 0}
        with pytest.raises(ConfigError, match="loss_weights"):
            parse_run_config(raw)

    def test_even_median_rejected(self):
        raw = minimal()
        raw["eval"] = {"median_frames": 10}
        with pytest.raises(ConfigError, match="median_frames"):
            parse_run_config(raw)


class TestLoad:
    def test_round_trip_from_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(minimal()))
        run = load_run_config(path)
        assert run.train.steps == 10

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config("/nonexistent/run.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_run_config(path)
