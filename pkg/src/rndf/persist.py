"""Checkpoint files.

Layout (all integers little-endian)::

    bytes 0..3    magic b"RNDF"
    bytes 4..7    u32 format version
    bytes 8..11   u32 header length H
    bytes 12..    H bytes of UTF-8 JSON header
    then          payload: float64 little-endian arrays, row-major

The header holds the backbone config, forest config, optional preprocessing
settings and a tensor directory ``[{"name", "shape", "offset"}]`` whose
offsets are byte positions relative to the payload start, strictly
increasing, in payload order.  JSON is written with sorted keys and no
whitespace so that save -> load -> save is byte-identical.
"""
import json
import struct
from dataclasses import asdict
from typing import Dict, List, Tuple

import numpy as np

from .backbone import Backbone, BackboneConfig
from .forest import ForestConfig, LeafParams
from .leaf_update import COV_EPS
from .model import RNDF
from .tensor import Tensor

MAGIC = b"RNDF"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    pass


class BoundsError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


def _tensors(model: RNDF) -> List[Tuple[str, np.ndarray]]:
    out = [("backbone." + name, p.data) for name, p in model.backbone.params.items()]
    out.append(("leaves.predictions", model.leaves.predictions))
    out.append(("leaves.covariances", model.leaves.covariances))
    return out


def to_bytes(model: RNDF) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, arr in _tensors(model):
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    bcfg = asdict(model.backbone.cfg)
    if bcfg["image_shape"] is not None:
        bcfg["image_shape"] = list(bcfg["image_shape"])
    header = {
        "backbone": bcfg,
        "forest": asdict(model.forest_cfg),
        "preprocess": model.preprocess,
        "tensors": directory,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save(model: RNDF, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def _parse_header(buf: bytes) -> Tuple[dict, int]:
    if len(buf) < _PREFIX.size:
        raise BoundsError("file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size
    if start + hlen > len(buf):
        raise BoundsError("header extends past end of file")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    return header, start + hlen


def read_header(path: str) -> dict:
    """Parse only the prefix and header; the payload is not read."""
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise BoundsError("file shorter than the fixed prefix")
        _, _, hlen = _PREFIX.unpack(prefix)
        return _parse_header(prefix + fh.read(hlen))[0]


def from_bytes(buf: bytes) -> RNDF:
    header, base = _parse_header(buf)
    payload_len = len(buf) - base
    if header.get("payload_bytes") != payload_len:
        raise BoundsError(f"payload is {payload_len} bytes, header declares {header.get('payload_bytes')}")
    arrays: Dict[str, np.ndarray] = {}
    prev = -1
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        off = int(entry["offset"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off <= prev:
            raise FormatError(f"directory offsets not increasing at {entry['name']}")
        if off < 0 or off + nbytes > payload_len:
            raise BoundsError(f"tensor {entry['name']} exceeds file bounds")
        prev = off
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8,
                                              offset=base + off).astype(np.float64).reshape(shape)
    bcfg = BackboneConfig(**header["backbone"])
    fcfg = ForestConfig(**header["forest"])
    params = {}
    for name, arr in arrays.items():
        if name.startswith("backbone."):
            params[name[len("backbone."):]] = Tensor(arr, requires_grad=True)
    try:
        leaves = LeafParams(arrays["leaves.predictions"], arrays["leaves.covariances"])
    except KeyError as exc:
        raise FormatError(f"missing tensor {exc}") from None
    # allow rounding slack below the jitter floor
    if not leaves.min_eigenvalue() >= 0.5 * COV_EPS:
        raise IntegrityError("a leaf covariance is not symmetric positive definite")
    return RNDF(Backbone(bcfg, params), fcfg, leaves, header.get("preprocess"))


def load(path: str) -> RNDF:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
