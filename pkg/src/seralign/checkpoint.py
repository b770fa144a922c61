"""Named-tensor checkpoint container.

Layout: a text header (magic, content id, one JSON metadata line, one
line per tensor giving name/dtype/shape/offset/bytes, and the payload
size), followed by the raw little-endian float payload. Tensor names are
hierarchical, e.g. ``transformer.0.attention.query.weight``. Round-trips
are bit-exact; the content id is a sha256 over the header body plus the
payload, so identical tensors and metadata always produce identical
files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import InputError, ParseError

MAGIC = "ntckpt 1"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict
    content_id: str


def _as_array(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype == np.float32:
        return np.ascontiguousarray(arr, dtype="<f4")
    if arr.dtype == np.float64:
        return np.ascontiguousarray(arr, dtype="<f8")
    raise InputError(f"checkpoint tensors must be float32 or float64, got {arr.dtype}")


def save_checkpoint(path: str | Path, tensors: Mapping[str, "np.ndarray | Tensor"], meta: Mapping | None = None) -> str:
    """Write tensors and metadata to `path`; returns the content id."""
    arrays: dict[str, np.ndarray] = {}
    for name in sorted(tensors):
        if any(ch.isspace() for ch in name) or not name:
            raise InputError(f"invalid tensor name {name!r}")
        arrays[name] = _as_array(tensors[name])

    lines = []
    payload = bytearray()
    for name, arr in arrays.items():
        dtype = "float32" if arr.dtype == np.dtype("<f4") else "float64"
        shape = ",".join(str(d) for d in arr.shape) if arr.ndim else "1"
        raw = arr.tobytes()
        lines.append(f"tensor {name} {dtype} {shape} {len(payload)} {len(raw)}")
        payload.extend(raw)

    meta_line = "meta " + json.dumps(dict(meta or {}), sort_keys=True, separators=(",", ":"))
    body = "\n".join([meta_line, *lines, f"payload {len(payload)}"]) + "\n"
    content_id = hashlib.sha256(body.encode("utf-8") + bytes(payload)).hexdigest()
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC}\nid {content_id}\n".encode("utf-8"))
        fh.write(body.encode("utf-8"))
        fh.write(bytes(payload))
    return content_id


def load_checkpoint(path: str | Path, verify: bool = True) -> Checkpoint:
    """Read a checkpoint; raises ParseError naming the offending record."""
    blob = Path(path).read_bytes()
    header_end = blob.find(b"payload ")
    if not blob.startswith(f"{MAGIC}\n".encode("utf-8")) or header_end < 0:
        raise ParseError(f"{path}: not a named-tensor checkpoint (bad magic or missing payload record)")
    newline = blob.find(b"\n", header_end)
    if newline < 0:
        raise ParseError(f"{path}: payload record is not terminated")
    header = blob[: newline + 1].decode("utf-8")
    payload = blob[newline + 1 :]

    lines = header.splitlines()
    if len(lines) < 4 or not lines[1].startswith("id ") or not lines[2].startswith("meta "):
        raise ParseError(f"{path}: malformed header (expected id and meta records)")
    content_id = lines[1][3:].strip()
    try:
        meta = json.loads(lines[2][5:])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: meta record is not valid JSON ({exc})") from None

    declared = lines[-1]
    try:
        payload_size = int(declared.split()[1])
    except (IndexError, ValueError):
        raise ParseError(f"{path}: malformed payload record {declared!r}") from None
    if len(payload) != payload_size:
        raise ParseError(f"{path}: payload holds {len(payload)} bytes, header declares {payload_size}")
    if verify:
        body = "\n".join(lines[2:]) + "\n"
        actual = hashlib.sha256(body.encode("utf-8") + payload).hexdigest()
        if actual != content_id:
            raise ParseError(f"{path}: content does not match checkpoint id {content_id}")

    tensors: dict[str, np.ndarray] = {}
    for line in lines[3:-1]:
        parts = line.split()
        if len(parts) != 6 or parts[0] != "tensor":
            raise ParseError(f"{path}: malformed tensor record {line!r}")
        _, name, dtype, shape_txt, offset_txt, nbytes_txt = parts
        if dtype not in _DTYPES:
            raise ParseError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
        try:
            shape = tuple(int(d) for d in shape_txt.split(","))
            offset = int(offset_txt)
            nbytes = int(nbytes_txt)
        except ValueError:
            raise ParseError(f"{path}: malformed tensor record {line!r}") from None
        if offset + nbytes > len(payload):
            raise ParseError(f"{path}: tensor {name!r} extends past the payload")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=_DTYPES[dtype])
        if arr.size != int(np.prod(shape)):
            raise ParseError(f"{path}: tensor {name!r} payload does not match shape {shape}")
        tensors[name] = arr.reshape(shape).copy()
    return Checkpoint(tensors=tensors, meta=meta, content_id=content_id)
