import json

import pytest

from app.config import ExperimentConfig, Settings, get_settings, parse_config, validate_config
from app.exceptions import (
    ConfigFileMissingError,
    ConfigRangeError,
    MalformedConfigError,
    UnknownConfigKeyError,
)


class TestExperimentConfig:
    def test_defaults(self):
        config = validate_config({})
        assert config.num_clusters == 10
        assert config.lambda_fair == 0.3
        assert config.temperature == 0.1
        assert config.queue_batches == 8
        assert config.variants == ["baseline", "protofair"]
        assert config.group_corr_sweep == [0.67, 0.75, 0.8]

    def test_negative_lambda_names_the_key(self):
        with pytest.raises(ConfigRangeError) as exc:
            validate_config({"lambda_fair": -1})
        assert exc.value.keys == ["lambda_fair"]

    def test_misspelled_key_is_unknown(self):
        with pytest.raises(UnknownConfigKeyError) as exc:
            validate_config({"lamda": 0.3})
        assert exc.value.keys == ["lamda"]

    @pytest.mark.parametrize("data, key", [
        ({"warmup_epochs": 40, "total_epochs": 30}, "warmup_epochs"),
        ({"input_dim": 2}, "input_dim"),
        ({"n_samples": 10, "num_clusters": 8}, "num_clusters"),
        ({"seeds": [1, 1]}, "seeds"),
        ({"seeds": []}, "seeds"),
        ({"group_corr_sweep": [0.3]}, "group_corr_sweep"),
        ({"base_loss": "triplet"}, "base_loss"),
        ({"encoder_hidden": [8, 0]}, "encoder_hidden"),
    ])
    def test_range_errors(self, data, key):
        with pytest.raises(ConfigRangeError) as exc:
            validate_config(data)
        assert exc.value.keys[0].split(".")[0] == key

    def test_input_dim_check_skipped_for_csv_data(self):
        assert validate_config({"input_dim": 2, "data_dir": "data"}).input_dim == 2

    def test_variants_are_canonicalized(self):
        assert validate_config({"variants": ["protofair", "baseline", "protofair"]}).variants == ["baseline", "protofair"]

    def test_projections(self):
        config = ExperimentConfig(group_corr=0.7, lambda_fair=0.5, seeds=[2], input_dim=8, data_seed=9)
        assert config.dataset_spec().group_corr == 0.7
        assert config.dataset_spec(group_corr=0.9).group_corr == 0.9
        assert config.dataset_spec().seed == 9
        assert config.encoder_config().input_dim == 8
        assert config.encoder_config(input_dim=5).input_dim == 5
        assert config.loss_config().lambda_fair == 0.5
        assert config.for_variant("baseline", 2).lambda_fair == 0.0
        assert config.for_variant("protofair", 2).lambda_fair == 0.5
        assert config.for_variant("protofair", 2).seed == 2
        with pytest.raises(ValueError):
            config.lambda_for("other")


class TestParseConfig:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigFileMissingError):
            parse_config(tmp_path / "absent.json")

    def test_invalid_json_reports_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "seeds": [0,\n}', encoding="utf-8")
        with pytest.raises(MalformedConfigError, match="line 3"):
            parse_config(path)

    def test_non_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]", encoding="utf-8")
        with pytest.raises(MalformedConfigError):
            parse_config(path)

    def test_not_utf8(self, tmp_path):
        path = tmp_path / "latin.json"
        path.write_bytes(b'{"output_dir": "\xe9"}')
        with pytest.raises(MalformedConfigError):
            parse_config(path)

    def test_partial_file_takes_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"total_epochs": 12, "warmup_epochs": 4}), encoding="utf-8")
        config = parse_config(path)
        assert (config.total_epochs, config.warmup_epochs, config.batch_size) == (12, 4, 64)


class TestSettings:
    def test_env_overrides(self, monkeypatch):
        monkeypatch.setenv("PROTOFAIR_LOG_LEVEL", "debug")
        monkeypatch.setenv("PROTOFAIR_LOG_FORMAT", "JSON")
        monkeypatch.setenv("PROTOFAIR_EXPORT_PROMETHEUS", "false")
        get_settings.cache_clear()
        try:
            settings = get_settings()
            assert settings.log_level == "DEBUG"
            assert settings.log_format == "json"
            assert settings.export_prometheus is False
        finally:
            get_settings.cache_clear()

    @pytest.mark.parametrize("env, value", [
        ("PROTOFAIR_LOG_LEVEL", "LOUD"),
        ("PROTOFAIR_LOG_FORMAT", "xml"),
        ("PROTOFAIR_PROMETHEUS_TEXTFILE", "a/b.prom"),
    ])
    def test_invalid_env_exits_two(self, monkeypatch, capsys, env, value):
        monkeypatch.setenv(env, value)
        get_settings.cache_clear()
        try:
            with pytest.raises(SystemExit) as exc:
                get_settings()
            assert exc.value.code == 2
            assert "PROTOFAIR CONFIGURATION ERROR" in capsys.readouterr().err
        finally:
            get_settings.cache_clear()

    def test_defaults(self, monkeypatch):
        for name in ("LOG_LEVEL", "LOG_FORMAT", "EXPORT_PROMETHEUS", "PROMETHEUS_TEXTFILE"):
            monkeypatch.delenv(f"PROTOFAIR_{name}", raising=False)
        settings = Settings(_env_file=None)
        assert settings.app_name == "ProtoFair Harness"
        assert settings.prometheus_textfile == "training.prom"
