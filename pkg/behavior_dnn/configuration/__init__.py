import copy
from pathlib import Path

import yaml

from behavior_dnn.core.errors import ConfigurationError

DEFAULT_CONFIGURATION_PATH = Path(__file__).with_name("behavior_configuration.yaml")
SECTIONS = ("features", "training", "evaluation", "synth", "layout")


def load_default_configuration():
    with open(DEFAULT_CONFIGURATION_PATH, "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


def load_configuration(path=None):
    """Packaged defaults, overlaid with a user JSON/YAML file when one is given."""
    config = load_default_configuration()
    if path is None:
        return config
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"❌ Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            user_config = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"❌ Config file {path} is not valid JSON/YAML: {e}") from e
    if not isinstance(user_config, dict):
        raise ConfigurationError(f"❌ Config file {path} must hold a mapping of sections")
    unknown = set(user_config) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"❌ Unknown config sections {sorted(unknown)}; expected {list(SECTIONS)}")
    return merge_configuration(config, user_config)


def merge_configuration(base, override):
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_configuration(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged
