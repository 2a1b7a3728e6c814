"""Flat ``key = value`` config files for dataclass configs."""
from __future__ import annotations

import ast
import dataclasses
from pathlib import Path


def dump_config(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {getattr(cfg, f.name)!r}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, cls, **overrides):
    names = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ValueError(f"line {n}: unknown key {key!r}")
        try:
            values[key] = ast.literal_eval(val)
        except (ValueError, SyntaxError):
            values[key] = val
    values.update(overrides)
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    return cls(**values)


def load_config(path, cls, **overrides):
    return parse_config(Path(path).read_text(), cls, **overrides)


def save_config(path, cfg) -> None:
    Path(path).write_text(dump_config(cfg))
