"""Flat ``key = value`` configuration text.

One assignment per line, ``#`` starts a comment, no nesting.  Keys are
``section.field`` where the section selects one of the config dataclasses
(``net``, ``train``, ``aug``, ``loss``, ``toy``).  Values are parsed according
to the type of the field's default: ints, floats, booleans and comma-separated
tuples.
"""

from __future__ import annotations

import dataclasses


class ConfigError(ValueError):
    """Malformed config text, unknown key or out-of-range value."""


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_text(text, source="<config>"):
    """``key = value`` lines -> ordered dict of raw strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key or any(ch.isspace() for ch in key):
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_overrides(items):
    """``["a.b=1", ...]`` as given on the command line -> dict."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _parse_scalar(text, like, key):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, str):
            return text
    except ValueError:
        pass
    raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}")


def parse_value(text, default, key):
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            return ()
        # homogeneous tuples; the first default element fixes the element type
        like = default[0] if default else 0.0
        return tuple(_parse_scalar(p, like, key) for p in parts)
    return _parse_scalar(text, default, key)


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def build_dataclass(cls, mapping, section):
    """Instantiate ``cls`` from raw strings, rejecting unknown fields."""
    defaults = {f.name: _default_of(cls, f) for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in mapping.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {section}.{key}")
        value = text if not isinstance(text, str) else parse_value(text, defaults[key], f"{section}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _default_of(cls, f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    raise ConfigError(f"{cls.__name__}.{f.name} has no default")


def dataclass_lines(obj, section):
    return [f"{section}.{f.name} = {format_value(getattr(obj, f.name))}"
            for f in dataclasses.fields(obj)]
