import pytest

from satem_denoise.config import (
    CONFIG_ENV_VAR,
    SECTIONS,
    ConfigError,
    coerce,
    default_params,
    load_config,
    merge_params,
    read_config_file,
)


def test_default_parameters():
    params = default_params()
    assert sorted(params) == sorted(SECTIONS)
    assert params["data"]["eps"] == 0.01
    assert params["train"]["n_blocks"] == 12


def test_update_parameters():
    params = merge_params("data", {"n_gates": 50})
    assert params["n_gates"] == 50
    assert params["t_min"] == 1e-5


def test_invalid_section_raises():
    with pytest.raises(ConfigError) as excinfo:
        merge_params("model")
    assert "Invalid config section: model" in str(excinfo.value)


def test_unknown_parameter_raises():
    with pytest.raises(ConfigError):
        merge_params("noise", {"hum": 1.0})


@pytest.mark.parametrize(
    "raw, default, expected",
    [
        ("3", 12, 3),
        (" 0.5 ", 1.0, 0.5),
        ("1e-3", 0.01, 1e-3),
        ("yes", True, True),
        ("off", True, False),
        ("edge", "zero", "edge"),
        ("null", 2.0, None),
        ("16", None, 16),
        ("2.5", None, 2.5),
    ],
)
def test_coerce(raw, default, expected):
    assert coerce(raw, default) == expected


def test_coerce_bad_value():
    with pytest.raises(ValueError):
        coerce("many", 3)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# toy run\n"
        "data.n_gates = 40\n"
        "\n"
        "train.channels = 8   # narrow\n"
        "train.lr = 0.01\n"
        "noise.b = 2.0\n"
    )
    return str(path)


def test_read_config_file(config_file):
    values = read_config_file(config_file)
    assert values["data"] == {"n_gates": 40}
    assert values["train"] == {"channels": 8, "lr": 0.01}
    assert values["noise"] == {"b": 2.0}


def test_config_error_names_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("data.n_gates = 40\ntrain.channels 8\n")
    with pytest.raises(ConfigError) as excinfo:
        read_config_file(str(path))
    assert "line 2" in str(excinfo.value)


def test_unknown_key_names_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("\n\ntrain.width = 8\n")
    with pytest.raises(ConfigError) as excinfo:
        read_config_file(str(path))
    assert "line 3" in str(excinfo.value)
    assert "train.width" in str(excinfo.value)


def test_bad_value_names_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("train.epochs = lots\n")
    with pytest.raises(ConfigError) as excinfo:
        read_config_file(str(path))
    assert "train.epochs" in str(excinfo.value)


def test_precedence(config_file):
    config = load_config(config_file, ["train.channels=16"])
    assert config["train"]["channels"] == 16
    assert config["data"]["n_gates"] == 40
    assert config["data"]["t_max"] == 1e-2


def test_environment_variable(monkeypatch, config_file):
    monkeypatch.setenv(CONFIG_ENV_VAR, config_file)
    assert load_config()["data"]["n_gates"] == 40


def test_explicit_path_beats_environment(monkeypatch, tmp_path, config_file):
    other = tmp_path / "other.cfg"
    other.write_text("data.n_gates = 7\n")
    monkeypatch.setenv(CONFIG_ENV_VAR, str(other))
    assert load_config(config_file)["data"]["n_gates"] == 40


def test_defaults_without_file(monkeypatch):
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)
    assert load_config() == default_params()


def test_malformed_override():
    with pytest.raises(ConfigError):
        load_config(None, ["train.channels"])
