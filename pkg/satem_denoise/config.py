import json
import logging
import os
from typing import Any, Dict, Iterable, Optional

logger = logging.getLogger(__name__)

SECTIONS = ["data", "noise", "train"]
CONFIG_ENV_VAR = "SATEM_DENOISE_CONFIG"

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


class ConfigError(ValueError):
    pass


def default_params() -> Dict[str, Dict[str, Any]]:
    """ load default parameters """
    dir_path = os.path.dirname(os.path.realpath(__file__))
    with open(os.path.join(dir_path, "data", "parameters.json")) as f:
        return json.load(f)


def merge_params(section: str, params: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """update the default parameters of one section with those supplied

    Parameters
    ----------
    section : str
        One of ``SECTIONS``.
    params : dict, optional
        Values overriding the defaults.
    """
    if section not in SECTIONS:
        raise ConfigError(f"Invalid config section: {section}, expected one of {SECTIONS}")
    defaults = default_params()[section]
    params = params or {}
    unknown = sorted(set(params) - set(defaults))
    if unknown:
        raise ConfigError(f"Unknown {section} parameters: {unknown}")
    return {**defaults, **params}


def coerce(raw: str, default: Any) -> Any:
    """cast a config string to the type of its default value"""
    text = raw.strip()
    if text.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        # null defaults are numeric options (e.g. factor_dim)
        value = float(text)
        return int(value) if default is None and value.is_integer() else value
    return text


def _assign(config: Dict[str, Dict[str, Any]], key: str, raw: str, where: str):
    defaults = default_params()
    section, _, name = key.strip().partition(".")
    if section not in defaults or name not in defaults[section]:
        raise ConfigError(f"{where}: unknown key {key.strip()!r}")
    try:
        config[section][name] = coerce(raw, defaults[section][name])
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key.strip()!r}: {exc}") from exc


def read_config_file(path: str) -> Dict[str, Dict[str, Any]]:
    """parse a flat ``section.key = value`` text file

    Returns only the values present in the file, grouped by section.
    """
    config: Dict[str, Dict[str, Any]] = {s: {} for s in SECTIONS}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path} line {lineno}: expected 'key = value', got {line!r}")
            key, raw = line.split("=", 1)
            _assign(config, key, raw, f"{path} line {lineno}")
    return config


def load_config(
    path: Optional[str] = None, overrides: Iterable[str] = ()
) -> Dict[str, Dict[str, Any]]:
    """build the full configuration

    Precedence is override flag > config file > packaged default. When ``path``
    is None the ``SATEM_DENOISE_CONFIG`` environment variable is consulted.
    """
    config = default_params()
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if path:
        logger.info("reading config file %s", path)
        for section, values in read_config_file(path).items():
            config[section].update(values)

    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected 'section.key=value'")
        key, raw = item.split("=", 1)
        _assign(config, key, raw, f"override {item!r}")
    return config
