"""Checkpoint container: a dependency-free, bit-exact binary format.

Layout:

    bytes 0..7    magic "NIMAENH1"
    bytes 8..11   uint32 LE manifest length
    manifest      UTF-8 JSON (sorted keys): tensor names/ranks/dims/offsets
                  plus arbitrary JSON metadata (step, config hash, model
                  description)
    data blob     raw little-endian float32 values, tensors at the offsets
                  recorded in the manifest
    last 4 bytes  uint32 LE CRC-32 over everything before it

Parameters are trained in float64 but stored as float32; loading promotes
back to float64, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib

import numpy as np

from .autodiff import Tensor
from .enhance import CanConfig, CanModel
from .layers import ConvLayer
from .quality import NimaConfig, NimaModel

MAGIC = b"NIMAENH1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def config_hash(config) -> str:
    """sha-256 over the sorted key=value rendering of a config-ish object."""
    if hasattr(config, "__dataclass_fields__"):
        items = {k: getattr(config, k) for k in config.__dataclass_fields__}
    else:
        items = dict(config)
    text = "\n".join(f"{k}={items[k]!r}" for k in sorted(items))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_checkpoint(path, tensors: dict, metadata: dict | None = None):
    """Write named tensors (stored float32) plus JSON metadata."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        data = tensors[name].data if isinstance(tensors[name], Tensor) else np.asarray(tensors[name])
        raw = np.ascontiguousarray(data, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "rank": data.ndim, "dims": list(data.shape), "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "metadata": metadata or {},
        "tensors": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(mbytes)) + mbytes + b"".join(blobs)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", crc))


def load_checkpoint(path):
    """Read back (tensors, metadata); tensors come out as float64 arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8:
        raise CorruptCheckpointError(f"{path}: truncated file ({len(raw)} bytes)")
    if raw[: len(MAGIC)] != MAGIC:
        raise VersionMismatchError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (file damaged or truncated)")
    (mlen,) = struct.unpack("<I", raw[8:12])
    mstart = 12
    if mstart + mlen > len(raw) - 4:
        raise CorruptCheckpointError(f"{path}: manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(raw[mstart:mstart + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable manifest: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}"
        )
    blob = raw[mstart + mlen:-4]
    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["dims"])) if entry["dims"] else 1
        start, end = entry["offset"], entry["offset"] + 4 * count
        if end > len(blob):
            raise CorruptCheckpointError(
                f"{path}: tensor {entry['name']!r} extends past the data blob"
            )
        values = np.frombuffer(blob[start:end], dtype="<f4").reshape(entry["dims"])
        tensors[entry["name"]] = values.astype(np.float64)
    return tensors, manifest["metadata"]


# ---------------------------------------------------------------------------
# model-level wrappers

def save_nima(path, model: NimaModel, step: int = 0, extra: dict | None = None):
    cfg = model.config
    metadata = {
        "model": "nima",
        "step": step,
        "config_hash": config_hash(cfg),
        "config": {
            "channels": list(cfg.channels),
            "kernel": cfg.kernel,
            "stride": cfg.stride,
            "leaky_slope": cfg.leaky_slope,
            "num_buckets": cfg.num_buckets,
            "padding_mode": cfg.padding_mode,
        },
    }
    metadata.update(extra or {})
    save_checkpoint(path, model.parameters(), metadata)


def load_nima(path) -> NimaModel:
    tensors, metadata = load_checkpoint(path)
    if metadata.get("model") != "nima":
        raise CheckpointError(f"{path}: not a quality-model checkpoint")
    c = metadata["config"]
    cfg = NimaConfig(
        channels=tuple(c["channels"]),
        kernel=c["kernel"],
        stride=c["stride"],
        leaky_slope=c["leaky_slope"],
        num_buckets=c["num_buckets"],
        padding_mode=c["padding_mode"],
    )
    backbone = []
    for i in range(len(cfg.channels)):
        backbone.append(
            ConvLayer(
                Tensor(tensors[f"backbone.{i}.weights"]),
                Tensor(tensors[f"backbone.{i}.bias"]),
                dilation=1,
                padding_mode=cfg.padding_mode,
                stride=cfg.stride,
            )
        )
    return NimaModel(
        config=cfg,
        backbone=backbone,
        head_weights=Tensor(tensors["head.weights"]),
        head_bias=Tensor(tensors["head.bias"]),
    )


def save_can(path, model: CanModel, step: int = 0, extra: dict | None = None):
    cfg = model.config
    metadata = {
        "model": "can",
        "step": step,
        "config_hash": config_hash(cfg),
        "config": {
            "depth": cfg.depth,
            "width": cfg.width,
            "dilation_schedule": list(cfg.dilation_schedule),
            "leaky_slope": cfg.leaky_slope,
            "padding_mode": cfg.padding_mode,
            "channels": cfg.channels,
        },
    }
    metadata.update(extra or {})
    save_checkpoint(path, model.parameters(), metadata)


def load_can(path) -> CanModel:
    tensors, metadata = load_checkpoint(path)
    if metadata.get("model") != "can":
        raise CheckpointError(f"{path}: not an enhancer checkpoint")
    c = metadata["config"]
    cfg = CanConfig(
        depth=c["depth"],
        width=c["width"],
        dilation_schedule=c["dilation_schedule"],
        leaky_slope=c["leaky_slope"],
        padding_mode=c["padding_mode"],
        channels=c["channels"],
    )
    layers = []
    for i in range(cfg.depth):
        layers.append(
            ConvLayer(
                Tensor(tensors[f"layers.{i}.weights"]),
                Tensor(tensors[f"layers.{i}.bias"]),
                dilation=cfg.dilation_schedule[i],
                padding_mode=cfg.padding_mode,
            )
        )
    return CanModel(config=cfg, layers=layers)
