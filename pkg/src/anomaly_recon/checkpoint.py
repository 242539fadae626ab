"""Versioned checkpoint container: JSON header + torch payload in one file.

Layout: 8-byte magic, 4-byte little-endian header length, UTF-8 JSON header,
then a ``torch.save`` blob with the state dicts.  The header carries the
architecture plan and hyperparameters needed to rebuild the model without
unpickling anything.
"""

import io
import json
import os
import struct

import torch

from .errors import InvalidArgumentError, MissingArtifactError

MAGIC = b"ARCKPT01"
FORMAT_VERSION = 1


def save_checkpoint(path: str, kind: str, header: dict, payload: dict) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["kind"] = kind
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    torch.save(payload, buf)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_header(path: str) -> dict:
    if not os.path.exists(path):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise InvalidArgumentError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path: str, expected_kind: str | None = None) -> tuple[dict, dict]:
    if not os.path.exists(path):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise InvalidArgumentError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        payload = torch.load(io.BytesIO(fh.read()), map_location="cpu", weights_only=True)
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise InvalidArgumentError(
            f"checkpoint {path} holds {header.get('kind')!r}, expected {expected_kind!r}"
        )
    return header, payload
