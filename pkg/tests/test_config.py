import pytest

from meetsep.config import (ConfigError, PipelineConfig, config_from_dict, config_hash,
                            load_config)
from meetsep.sessionio import load_config as io_load_config


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.toml").write_text("")
    assert io_load_config(tmp_path / "c.toml") == PipelineConfig()
    assert load_config(None) == PipelineConfig()


def test_reference_constants_in_defaults():
    cfg = PipelineConfig()
    assert (cfg.cacgmm.window_len, cfg.cacgmm.window_shift) == (120.0, 60.0)
    assert cfg.activity_frame_shift == 0.01
    assert cfg.tfprior.window_len == 12.8


def test_overrides_are_applied(tmp_path):
    (tmp_path / "c.toml").write_text(
        "variant = \"v2\"\n[cacgmm]\nrectify_threshold = 0.7\n[wpe]\ntaps = 5\n")
    cfg = io_load_config(tmp_path / "c.toml")
    assert cfg.variant == "v2"
    assert cfg.cacgmm.rectify_threshold == 0.7
    assert cfg.wpe.taps == 5
    # untouched keys keep the pipeline defaults
    assert cfg.cacgmm.window_len == 120.0 and cfg.wpe.delay == PipelineConfig().wpe.delay


def test_pipeline_table_is_accepted():
    assert config_from_dict({"pipeline": {"recluster": "fixed"}}).recluster == "fixed"


def test_unknown_keys_and_type_errors_listed(tmp_path):
    (tmp_path / "c.toml").write_text("[wpe]\ntapss = 3\niterations = \"many\"\n")
    with pytest.raises(ConfigError) as info:
        io_load_config(tmp_path / "c.toml")
    msg = str(info.value)
    assert "wpe.tapss" in msg and "wpe.iterations" in msg


@pytest.mark.parametrize("data", [
    {"variant": "v9"}, {"recluster": "sometimes"}, {"cacgmm": {"rectify_threshold": 1.5}},
    {"cacgmm": 3}, {"rectify_weighting": "loud"}, {"stft": {"frame_len": 1.5}},
    {"wpe_enabled": 1},
])
def test_invalid_values(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_bad_toml(tmp_path):
    (tmp_path / "c.toml").write_text("[wpe\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.toml")


def test_hash_tracks_content():
    assert config_hash(PipelineConfig()) == config_hash(PipelineConfig())
    assert config_hash(PipelineConfig()) != config_hash(PipelineConfig(variant="v2"))
