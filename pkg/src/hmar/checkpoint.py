"""Binary checkpoints.

Layout (all integers u32 little-endian)::

    b"HMAR1\\n"
    key=value lines of the model config, then one empty line
    repeated: name_len, name (utf-8), rank, dims..., float32 LE values (row-major)

Values are stored as 32-bit floats whatever the training precision.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import fields

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ModelParams, parameter_shapes

MAGIC = b"HMAR1\n"


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw, default):
    if isinstance(default, bool):
        if raw not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw == "true"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(",")) if raw else ()
    return raw


def format_config_block(config):
    return "".join(f"{f.name}={_format_value(getattr(config, f.name))}\n" for f in fields(config)) + "\n"


def parse_config_block(text):
    defaults = {f.name: f.default for f in fields(ModelConfig)}
    defaults["num_items"] = 0
    values = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep or key not in defaults:
            raise CheckpointError(f"bad config line in checkpoint: {line!r}")
        try:
            values[key] = _parse_value(raw, defaults[key])
        except ValueError as exc:
            raise CheckpointError(f"bad value for {key}: {exc}") from None
    try:
        return ModelConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from None


def dumps(config, params):
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(format_config_block(config).encode("utf-8"))
    for name, p in params.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.data.shape))
        out.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return out.getvalue()


def save_checkpoint(path, config, params):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(config, params))
    os.replace(tmp, path)


def loads(blob, expected=None):
    """Parse checkpoint bytes into ``(config, params)``.

    With ``expected`` given, every stored array must match the shape that
    config calls for.
    """
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an HMAR checkpoint (bad magic bytes)")
    end = blob.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        raise CheckpointError("truncated checkpoint: config block not terminated")
    try:
        header = blob[len(MAGIC):end + 1].decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("config block is not valid UTF-8") from None
    config = parse_config_block(header)
    shapes = parameter_shapes(expected if expected is not None else config)
    params = ModelParams()
    pos = end + 2
    view = memoryview(blob)

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(nlen, "parameter name")).decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        if name not in shapes:
            raise CheckpointError(f"unexpected parameter {name!r} for this configuration")
        if tuple(dims) != tuple(shapes[name]):
            raise CheckpointError(f"parameter {name}: stored shape {tuple(dims)} != expected {tuple(shapes[name])}")
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * count, f"values of {name}"), dtype="<f4").reshape(dims)
        params.add(name, values.astype(config.dtype), config.dtype)
    missing = [n for n in shapes if n not in params]
    if missing:
        raise CheckpointError(f"checkpoint missing parameter {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    return config, ModelParams((n, params[n]) for n in shapes)


def load_checkpoint(path, expected=None):
    with open(path, "rb") as fh:
        return loads(fh.read(), expected)
