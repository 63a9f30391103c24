"""Flat ``section.key = value`` run configuration."""
from __future__ import annotations

from pathlib import Path

from .exceptions import ValidationError

__all__ = ["RunConfig", "parse_config", "load_config"]

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config(text, source="<config>") -> dict:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source} line {n}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key or not all(key.split(".")):
            raise ValidationError(f"{source} line {n}: key {key!r} needs a section prefix")
        if key in out:
            raise ValidationError(f"{source} line {n}: duplicate key {key!r}")
        out[key] = value
    return out


class RunConfig:
    """Typed access to a parsed configuration.

    Relative paths are resolved against ``base_dir`` (the config file's
    directory).  ``run.seed`` is mandatory.
    """

    def __init__(self, values: dict, base_dir=".", seed=None):
        self.values = dict(values)
        if seed is not None:
            self.values["run.seed"] = str(int(seed))
        self.base_dir = Path(base_dir)
        if "run.seed" not in self.values:
            raise ValidationError("configuration must set run.seed")
        self.seed = self.get_int("run.seed")

    def __contains__(self, key):
        return key in self.values

    def get(self, key, default=None):
        return self.values.get(key, default)

    def get_str(self, key, default=None):
        v = self.values.get(key)
        if v is None:
            if default is None:
                raise ValidationError(f"missing configuration key {key!r}")
            return default
        return v

    def _typed(self, key, default, kind):
        v = self.values.get(key)
        if v is None:
            if default is None:
                raise ValidationError(f"missing configuration key {key!r}")
            return default
        try:
            return kind(v)
        except ValueError:
            raise ValidationError(f"{key} = {v!r} is not a valid {kind.__name__}") from None

    def get_int(self, key, default=None):
        return self._typed(key, default, int)

    def get_float(self, key, default=None):
        return self._typed(key, default, float)

    def get_bool(self, key, default=None):
        v = self.values.get(key)
        if v is None:
            if default is None:
                raise ValidationError(f"missing configuration key {key!r}")
            return default
        if v.lower() in _TRUE:
            return True
        if v.lower() in _FALSE:
            return False
        raise ValidationError(f"{key} = {v!r} is not a boolean")

    def get_list(self, key, kind=str, default=None):
        v = self.values.get(key)
        if v is None:
            return default
        items = [s.strip() for s in v.split(",") if s.strip()]
        try:
            return [kind(s) for s in items]
        except ValueError:
            raise ValidationError(f"{key} = {v!r} has an invalid entry") from None

    def get_path(self, key, default=None):
        v = self.values.get(key, default)
        if v is None:
            raise ValidationError(f"missing configuration key {key!r}")
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def echo(self):
        return dict(sorted(self.values.items()))


def load_config(path, seed=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"configuration file {path} not found")
    text = path.read_text(encoding="utf-8")
    return RunConfig(parse_config(text, path.name), base_dir=path.parent, seed=seed)
