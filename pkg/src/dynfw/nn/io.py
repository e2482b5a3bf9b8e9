"""Text checkpoint format for named float64 arrays.

Layout (UTF-8, ``\\n`` line endings)::

    dynfw-params 1
    <name> <dim0>x<dim1>... <v0> <v1> ...

One array per line, values in row-major order written with ``repr`` so
that a save/load round trip is bit-exact. A scalar-free 0-d shape is not
supported; names must not contain whitespace.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ConfigError

MAGIC = "dynfw-params"
VERSION = 1


def dumps_params(arrays: dict[str, np.ndarray]) -> str:
    lines = [f"{MAGIC} {VERSION}"]
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name) or not name:
            raise ConfigError(f"invalid parameter name {name!r}")
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 0:
            raise ConfigError(f"{name}: 0-d arrays are not supported")
        shape = "x".join(str(d) for d in a.shape)
        values = " ".join(repr(float(v)) for v in a.reshape(-1))
        lines.append(f"{name} {shape} {values}".rstrip())
    return "\n".join(lines) + "\n"


def loads_params(text: str) -> dict[str, np.ndarray]:
    lines = text.splitlines()
    if not lines or lines[0].split() != [MAGIC, str(VERSION)]:
        raise ConfigError("not a dynfw-params v1 file")
    out: dict[str, np.ndarray] = {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ConfigError(f"line {n}: expected '<name> <shape> <values...>'")
        name, shape_txt, vals = parts[0], parts[1], parts[2:]
        shape = tuple(int(d) for d in shape_txt.split("x"))
        if int(np.prod(shape)) != len(vals):
            raise ConfigError(f"line {n}: {name} declares {shape} but has {len(vals)} values")
        out[name] = np.array([float(v) for v in vals], dtype=np.float64).reshape(shape)
    return out


def save_params(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_text(dumps_params(arrays))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    return loads_params(Path(path).read_text())
