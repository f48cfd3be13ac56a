"""Binary checkpoint: ``GPQ1`` magic, text header, raw little-endian float32 payload.

Layout::

    b"GPQ1" | uint32 LE header length | header (UTF-8 key=value lines) | payload

The header carries the format version, every model hyperparameter, the
alive query indices, free-form run metadata, and one ``array.<i>=<name>
<shape>`` line per tensor in payload order.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

from gpq.detector import DetectorModel, ModelConfig
from gpq.fileio import atomic_write_bytes

MAGIC = b"GPQ1"
VERSION = 1
_LEN = struct.Struct("<I")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def _header(model: DetectorModel, meta: dict) -> tuple[str, list]:
    lines = [f"format_version={VERSION}"]
    for f in dataclasses.fields(ModelConfig):
        lines.append(f"model.{f.name}={getattr(model.config, f.name)!r}")
    lines.append("alive=" + ",".join(str(i) for i in model.bank.alive))
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in value or "=" in key:
            raise ValueError(f"metadata entry {key!r} cannot be stored in a header line")
        lines.append(f"meta.{key}={value}")
    params = model.named_parameters()
    for i, (name, p) in enumerate(params):
        lines.append(f"array.{i}={name} {','.join(str(d) for d in p.shape)}")
    return "\n".join(lines) + "\n", params


def checkpoint_bytes(model: DetectorModel, meta: dict | None = None) -> bytes:
    header, params = _header(model, meta or {})
    hb = header.encode("utf-8")
    payload = b"".join(p.data.astype("<f4").tobytes() for _, p in params)
    return MAGIC + _LEN.pack(len(hb)) + hb + payload


def save_checkpoint(model: DetectorModel, path, meta: dict | None = None) -> Path:
    return atomic_write_bytes(path, checkpoint_bytes(model, meta))


def _parse_value(raw: str):
    if raw in ("True", "False"):
        return raw == "True"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def parse_checkpoint(blob: bytes) -> tuple[DetectorModel, dict]:
    if len(blob) < len(MAGIC) or blob[:4] != MAGIC:
        raise BadMagicError("not a GPQ checkpoint (bad magic bytes)")
    if len(blob) < 8:
        raise TruncatedCheckpointError("file ends inside the header length field")
    (hlen,) = _LEN.unpack_from(blob, 4)
    if len(blob) < 8 + hlen:
        raise TruncatedCheckpointError("file ends inside the header")
    try:
        header = blob[8:8 + hlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptCheckpointError("header is not valid UTF-8") from exc
    fields, arrays, meta = {}, [], {}
    for line in header.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptCheckpointError(f"malformed header line {line!r}")
        if key.startswith("array."):
            name, _, shape = value.partition(" ")
            arrays.append((int(key[6:]), name, tuple(int(d) for d in shape.split(",") if d)))
        elif key.startswith("meta."):
            meta[key[5:]] = value
        else:
            fields[key] = value
    version = fields.get("format_version")
    if version != str(VERSION):
        raise VersionMismatchError(f"checkpoint format version {version}, expected {VERSION}")

    try:
        config = ModelConfig(**{f.name: _parse_value(fields[f"model.{f.name}"])
                                for f in dataclasses.fields(ModelConfig)})
        alive = [int(i) for i in fields["alive"].split(",") if i]
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"bad model header: {exc}") from exc

    arrays.sort()
    expected = sum(4 * int(np.prod(shape)) for _, _, shape in arrays)
    payload = blob[8 + hlen:]
    if len(payload) < expected:
        raise TruncatedCheckpointError(f"payload has {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise CorruptCheckpointError(f"{len(payload) - expected} unexpected trailing bytes")

    model = DetectorModel.init(config, np.random.default_rng(0))
    params = dict(model.named_parameters())
    if sorted(params) != sorted(name for _, name, _ in arrays):
        raise CorruptCheckpointError("array names do not match the model layout")
    offset = 0
    for _, name, shape in arrays:
        n = int(np.prod(shape))
        if params[name].shape != shape:
            raise CorruptCheckpointError(f"{name}: stored shape {shape}, model expects {params[name].shape}")
        params[name].data = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * n
    try:
        model.bank.alive = alive
        model.bank._check()
    except (ValueError, IndexError) as exc:
        raise CorruptCheckpointError(f"bad alive list: {exc}") from exc
    return model, meta


def load_checkpoint(path, with_meta: bool = False):
    model, meta = parse_checkpoint(Path(path).read_bytes())
    return (model, meta) if with_meta else model
