"""Binary model checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"MILLIE01"  (last two digits: format version)
    meta_len   u32
    meta       meta_len bytes of UTF-8 JSON, keys sorted
    body       repeated records:
                 name_len u32, name (UTF-8),
                 rank u32, dims u32 * rank,
                 payload  float32 LE * prod(dims)
    crc        u32       CRC-32 of body

The metadata carries the label space, backbone and head geometry plus any
training snapshot.  Records appear in parameter order followed by the input
normalisation vectors ``input.mean`` and ``input.std``.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..model import BackboneConfig, ModelParams, param_shapes

MAGIC_PREFIX = b"MILLIE"
FORMAT_VERSION = 1
MAGIC = MAGIC_PREFIX + b"%02d" % FORMAT_VERSION


class CheckpointError(ValueError):
    pass


class MagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


def _metadata(params: ModelParams, extra: dict | None) -> dict:
    meta = dict(params.metadata or {})
    if extra:
        meta.update(extra)
    meta.update(
        format_version=FORMAT_VERSION,
        classes=list(params.classes),
        backbone={
            "input_side": params.backbone.input_side,
            "channels": list(params.backbone.channels),
            "kernel": params.backbone.kernel,
            "pool": params.backbone.pool,
        },
        head_widths=list(params.head_widths),
    )
    return meta


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    raw_name = name.encode("utf-8")
    head = struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<I", arr.ndim)
    head += struct.pack("<%dI" % arr.ndim, *arr.shape)
    return head + arr.tobytes(order="C")


def encode_checkpoint(params: ModelParams, extra: dict | None = None) -> bytes:
    meta = json.dumps(_metadata(params, extra), sort_keys=True, ensure_ascii=False,
                      separators=(",", ":")).encode("utf-8")
    body = b"".join(_record(name, p.data) for name, p in params.tensors.items())
    body += _record("input.mean", params.input_mean) + _record("input.std", params.input_std)
    return MAGIC + struct.pack("<I", len(meta)) + meta + body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Write a :class:`ModelParams` or a trained model (anything with ``.params``)."""
    params = model if isinstance(model, ModelParams) else model.params
    if extra is None and hasattr(model, "metadata") and callable(model.metadata):
        extra = model.metadata()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, extra))


def decode_checkpoint(blob: bytes) -> ModelParams:
    if len(blob) < len(MAGIC) or not blob.startswith(MAGIC_PREFIX):
        raise MagicError("not a checkpoint: bad magic")
    version_tag = blob[len(MAGIC_PREFIX):len(MAGIC)]
    if version_tag != MAGIC[len(MAGIC_PREFIX):]:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version_tag!r}")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise IntegrityError("truncated checkpoint")
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if pos + meta_len + 4 > len(blob):
        raise IntegrityError("truncated checkpoint header")
    body = blob[pos + meta_len:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != crc:
        raise IntegrityError("checkpoint CRC mismatch")
    try:
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable checkpoint metadata: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported metadata version {meta.get('format_version')!r}")

    records = OrderedDict()
    off = 0
    while off < len(body):
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        dims = struct.unpack_from("<%dI" % rank, body, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        records[name] = arr.astype(np.float32)

    classes = tuple(meta["classes"])
    bb = meta["backbone"]
    backbone = BackboneConfig(bb["input_side"], tuple(bb["channels"]), bb["kernel"], bb["pool"])
    head_widths = tuple(meta["head_widths"])
    tensors = OrderedDict()
    for name, shape in param_shapes(classes, backbone, head_widths):
        if name not in records:
            raise IntegrityError(f"checkpoint lacks parameter {name!r}")
        if records[name].shape != shape:
            raise IntegrityError(f"parameter {name!r} has shape {records[name].shape}, expected {shape}")
        tensors[name] = T.Parameter(records[name], name=name)
    structural = {"format_version", "classes", "backbone", "head_widths"}
    extra = {k: v for k, v in meta.items() if k not in structural}
    return ModelParams(classes, backbone, head_widths, tensors,
                       records.get("input.mean", np.zeros(3)), records.get("input.std", np.ones(3)),
                       metadata=extra)


def load_checkpoint(path) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes())


def import_backbone_weights(params: ModelParams, path) -> None:
    """Copy conv weights from another checkpoint with a matching backbone.

    The hook for externally supplied backbone weights: head parameters and
    the label space are left untouched.
    """
    donor = load_checkpoint(path)
    if donor.backbone != params.backbone:
        raise CheckpointError(f"backbone mismatch: {donor.backbone} vs {params.backbone}")
    for name, p in donor.tensors.items():
        if name.startswith("conv"):
            params.tensors[name].assign(p.data)
    params.input_mean = donor.input_mean.copy()
    params.input_std = donor.input_std.copy()
