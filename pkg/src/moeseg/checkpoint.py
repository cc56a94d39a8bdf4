"""Named-tensor checkpoint files.

Layout: a UTF-8 text header, then a binary payload, then a checksum.

    MOESEG-CKPT v1
    meta {...json...}
    tensor <name> <d0,d1,...> float64 <byte_offset>
    ...
    end
    <payload: little-endian float64 blocks at the listed offsets>
    <4 bytes: little-endian CRC32 of the payload>

Tensor order in the header is the order of the dict passed to
``save_checkpoint``, which callers use to persist canonical ordering (the
expert registry, for one). Loading verifies the magic line, the CRC, and
the payload length before returning any array.
"""

from __future__ import annotations

import json
import os
import zlib
from typing import Any

import numpy as np

from .errors import CheckpointError

MAGIC = "MOESEG-CKPT v1"


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    lines = [MAGIC, "meta " + json.dumps(meta, sort_keys=True)]
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name '{name}' contains whitespace")
        data = np.ascontiguousarray(arr, dtype="<f8")
        dims = ",".join(str(d) for d in data.shape) if data.shape else "-"
        lines.append(f"tensor {name} {dims} float64 {offset}")
        blobs.append(data.tobytes())
        offset += data.nbytes
    lines.append("end")
    payload = b"".join(blobs)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write("\n".join(lines).encode("utf-8") + b"\n")
        fh.write(payload)
        fh.write(crc.to_bytes(4, "little"))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint '{path}': {exc}") from exc

    marker = b"\nend\n"
    split = raw.find(marker)
    if split < 0:
        raise CheckpointError(f"checkpoint '{path}' has no header terminator")
    header = raw[: split + len(marker)].decode("utf-8").splitlines()
    body = raw[split + len(marker):]
    if len(body) < 4:
        raise CheckpointError(f"checkpoint '{path}' is truncated")
    payload, crc_bytes = body[:-4], body[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != int.from_bytes(crc_bytes, "little"):
        raise CheckpointError(f"checkpoint '{path}' failed its payload CRC check")

    if not header or header[0] != MAGIC:
        raise CheckpointError(f"checkpoint '{path}' has wrong magic line")
    meta: dict[str, Any] = {}
    tensors: dict[str, np.ndarray] = {}
    for line in header[1:-1]:
        if line.startswith("meta "):
            try:
                meta = json.loads(line[len("meta "):])
            except json.JSONDecodeError as exc:
                raise CheckpointError(f"checkpoint '{path}' has malformed metadata") from exc
            continue
        parts = line.split(" ")
        if len(parts) != 5 or parts[0] != "tensor":
            raise CheckpointError(f"checkpoint '{path}' has malformed header line: {line!r}")
        _, name, dims, dtype, offset_s = parts
        if dtype != "float64":
            raise CheckpointError(f"unsupported dtype '{dtype}' for tensor '{name}'")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name '{name}'")
        shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        offset = int(offset_s)
        end = offset + count * 8
        if end > len(payload):
            raise CheckpointError(f"tensor '{name}' runs past the payload end")
        tensors[name] = (
            np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
    return tensors, meta
