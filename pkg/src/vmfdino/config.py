"""Flat ``key = value`` run configuration.

Keys, types and defaults are defined by ``schemas/config.schema.json``.
Blank lines and ``#`` comments are ignored; list values are
comma-separated.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import fields
from importlib import resources

import jsonschema

from vmfdino.trainer import TrainConfig


class ConfigError(ValueError):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("vmfdino.schemas").joinpath(name).read_text())


CONFIG_SCHEMA = load_schema("config.schema.json")
_PROPS = CONFIG_SCHEMA["properties"]


def defaults() -> dict:
    return {k: v["default"] for k, v in _PROPS.items()}


def _coerce(key, raw, spec):
    typ = spec["type"]
    try:
        if typ == "integer":
            return int(raw)
        if typ == "number":
            return float(raw)
        if typ == "boolean":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ == "array":
            item = spec["items"]["type"]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return [int(p) if item == "integer" else float(p) for p in parts]
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None


def parse_config(text: str, source: str = "<string>") -> dict:
    cfg = defaults()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _PROPS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        cfg[key] = _coerce(key, raw, _PROPS[key])
    validate(cfg)
    return cfg


def load_config(path) -> dict:
    if path is None:
        cfg = defaults()
        validate(cfg)
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def validate(cfg: dict):
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "config"
        raise ConfigError(f"{where}: {exc.message}") from None


def dump_config(cfg: dict) -> str:
    """Render in the file format; every key, schema order."""
    lines = []
    for key in _PROPS:
        val = cfg[key]
        if isinstance(val, bool):
            s = "true" if val else "false"
        elif isinstance(val, list):
            s = ", ".join(repr(v) for v in val)
        else:
            s = repr(val) if isinstance(val, float) else str(val)
        lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    try:
        return TrainConfig(**{k: v for k, v in cfg.items() if k in names})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dataset_kwargs(cfg: dict) -> dict:
    return dict(
        K_true=cfg["k_true"],
        d_in=cfg["d_in"],
        n=cfg["n_points"],
        kappa_true=cfg["kappa_true"],
        noise=cfg["noise"],
        seed=cfg["seed"],
    )
