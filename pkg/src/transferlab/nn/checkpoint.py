"""Binary checkpoint container.

Layout (little-endian)::

    b"ATLB"            magic
    u16                format version
    u32 + ASCII        architecture string (see ``Network.spec_string``)
    float32[...]       every parameter array, layer order, weight before bias
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .layers import parse_layer
from .network import Network

MAGIC = b"ATLB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_model(model: Network, path: str | os.PathLike) -> None:
    spec = model.spec_string().encode("ascii")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(spec)))
        f.write(spec)
        for arr in model.flat_params():
            f.write(arr.astype("<f4").tobytes())


def parse_spec_string(spec: str) -> dict:
    fields = {}
    head, _, layers = spec.partition(";layers=")
    for part in head.split(";"):
        key, _, value = part.partition("=")
        fields[key] = value
    try:
        return {
            "arch": fields.get("arch", "custom"),
            "input_shape": tuple(int(s) for s in fields["input"].split("x")),
            "num_classes": int(fields["classes"]),
            "layers": [parse_layer(t) for t in layers.split(";") if t],
        }
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from exc


def load_model(path: str | os.PathLike) -> Network:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (slen,) = struct.unpack_from("<I", blob, 6)
    if 10 + slen > len(blob):
        raise CheckpointError(f"{path}: corrupted header (truncated architecture string)")
    try:
        spec = blob[10 : 10 + slen].decode("ascii")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    info = parse_spec_string(spec)
    offset = 10 + slen
    params = []
    for layer in info["layers"]:
        p = {}
        for name, shape in layer.param_shapes():
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(blob):
                raise CheckpointError(f"{path}: corrupted checkpoint, truncated at byte {len(blob)}")
            p[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(shape)
            offset = end
        params.append(p)
    if offset != len(blob):
        raise CheckpointError(f"{path}: corrupted checkpoint, {len(blob) - offset} trailing bytes")
    return Network(info["layers"], params, info["input_shape"], info["num_classes"], arch=info["arch"])
