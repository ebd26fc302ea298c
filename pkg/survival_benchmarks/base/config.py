# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

import dataclasses
import os
import typing

import yaml

from survival_benchmarks.base.errors import ConfigError


def load_yaml(cfg_file):
    """Read a YAML configuration file into a dict

    Parameters
    ----------
    cfg_file : str
        Path to the YAML file.

    Returns
    -------
    dict
        Parsed content, empty dict for an empty file.
    """
    if not os.path.isfile(cfg_file):
        raise ConfigError("Cannot open configuration file {}".format(cfg_file))

    with open(cfg_file) as f:
        cfg = yaml.load(f, Loader=yaml.FullLoader)

    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise ConfigError("Configuration file {} must hold a mapping".format(cfg_file))
    return cfg


def package_cfg(module_file, name):
    """Path of a YAML file shipped in the `cfg/` directory next to `module_file`"""
    return os.path.join(os.path.dirname(os.path.realpath(module_file)), "cfg", name)


def _coerce(value, field_type, key):
    origin = typing.get_origin(field_type)

    if value is None:
        return None

    if field_type is bool:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError("Invalid boolean for {}: {}".format(key, value))
        return bool(value)

    if field_type in (int, float, str):
        try:
            if field_type is int and isinstance(value, float) and not value.is_integer():
                raise ValueError
            return field_type(value)
        except (TypeError, ValueError):
            raise ConfigError("Invalid value for {}: {!r}".format(key, value))

    if origin in (list, tuple):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if not isinstance(value, (list, tuple)):
            raise ConfigError("{} must be a list".format(key))
        return origin(value)

    return value


class ConfigMixin(object):
    """`from_dict` / `from_yaml` / `to_dict` for the config dataclasses

    Unknown keys are rejected and values are coerced to the declared field types,
    so a value coming from a command-line flag (a string) and one coming from YAML
    end up identical.
    """

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, cfg: dict):
        hints = typing.get_type_hints(cls)
        names = set(cls.field_names())

        kwargs = {}
        for key, value in (cfg or {}).items():
            if key not in names:
                raise ConfigError("Unknown configuration key for {}: {}".format(cls.__name__, key))
            kwargs[key] = _coerce(value, hints[key], key)

        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj

    @classmethod
    def from_yaml(cls, cfg_file):
        return cls.from_dict(load_yaml(cfg_file))

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = [list(v) if isinstance(v, tuple) else v for v in value]
            out[f.name] = value
        return out

    def updated(self, **overrides):
        cfg = self.to_dict()
        cfg.update({k: v for k, v in overrides.items() if v is not None})
        return type(self).from_dict(cfg)


def split_config(cfg: dict, *config_classes):
    """Route the keys of one flat mapping to the config classes that declare them

    Returns one dict per class, in order. A key declared by none of them raises.
    """
    routed = [dict() for _ in config_classes]
    for key, value in cfg.items():
        owners = [i for i, c in enumerate(config_classes) if key in c.field_names()]
        if not owners:
            raise ConfigError("Unknown configuration key: {}".format(key))
        for i in owners:
            routed[i][key] = value
    return routed
