"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DWCK"  u32 version  u32 tensor_count
    u32 meta_len  meta_len bytes of UTF-8 JSON       -+
    per tensor:                                        |  CRC32 region
      u16 name_len  name (UTF-8)  u8 rank              |
      rank x u32 dims  prod(dims) x f32 payload       -+
    u32 crc32

The JSON block carries the architecture, its fingerprint, the iteration
counter, the class-label table and other scalars needed to rebuild a
network. Optimizer velocities are stored as tensors named
``velocity/<param>``.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import CorruptCheckpoint, IncompatibleCheckpoint, ShapeError
from .layers import LayerParams
from .model import ArchitectureSpec, Network
from .optim import OptimState

MAGIC = b"DWCK"
VERSION = 1
VELOCITY_PREFIX = "velocity/"
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    arch: dict
    fingerprint: str
    iteration: int = 0
    labels: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def spec(self) -> ArchitectureSpec:
        return ArchitectureSpec.from_dict(self.arch)

    def params(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(VELOCITY_PREFIX)}

    def velocities(self) -> Dict[str, np.ndarray]:
        n = len(VELOCITY_PREFIX)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(VELOCITY_PREFIX)}


def from_network(net: Network, state: Optional[OptimState] = None, **meta) -> Checkpoint:
    """Snapshot a network (and optionally its optimizer state)."""
    tensors = {k: v.copy() for k, v in net.named_tensors().items()}
    if state is not None:
        for k, v in state.velocities.items():
            tensors[VELOCITY_PREFIX + k] = v.copy()
    meta = dict(meta)
    meta.setdefault("streams", net.streams)
    meta.setdefault("pixel_mean", float(net.pixel_mean))
    meta.setdefault("lr_mult", {n: p.lr_mult for n, p in net.params.items()})
    return Checkpoint(tensors, net.spec.to_dict(), net.spec.fingerprint(),
                      state.iteration if state else 0, list(net.labels), meta)


def to_network(ckpt: Checkpoint, streams: Optional[int] = None) -> Network:
    """Rebuild the network a checkpoint was taken from."""
    spec = ckpt.spec
    if spec.fingerprint() != ckpt.fingerprint:
        raise IncompatibleCheckpoint("architecture fingerprint does not match its description")
    lr_mult = ckpt.meta.get("lr_mult", {})
    params = {}
    t = ckpt.params()
    for key in t:
        if key.endswith(".weight"):
            name = key[:-len(".weight")]
            params[name] = LayerParams(t[key].copy(), t[name + ".bias"].copy(),
                                       float(lr_mult.get(name, 1.0)))
    return Network(spec, params, streams or int(ckpt.meta.get("streams", 1)),
                   float(ckpt.meta.get("pixel_mean", 0.0)), list(ckpt.labels))


def optim_state(ckpt: Checkpoint) -> Optional[OptimState]:
    vel = ckpt.velocities()
    if not vel:
        return None
    return OptimState({k: v.copy() for k, v in vel.items()}, ckpt.iteration)


def load_into(net: Network, ckpt: Checkpoint) -> None:
    """Copy parameters into ``net`` after verifying the architecture fingerprint."""
    if ckpt.fingerprint != net.spec.fingerprint():
        raise IncompatibleCheckpoint(
            f"checkpoint fingerprint {ckpt.fingerprint[:12]} does not match "
            f"network {net.spec.fingerprint()[:12]}")
    for key, value in ckpt.params().items():
        name, _, part = key.rpartition(".")
        target = net.params[name].weights if part == "weight" else net.params[name].biases
        if target.shape != value.shape:
            raise ShapeError(f"{key}: checkpoint {list(value.shape)} vs network {list(target.shape)}")
        target[...] = value


# -- byte format ---------------------------------------------------------------

def encode(ckpt: Checkpoint) -> bytes:
    meta = {
        "fingerprint": ckpt.fingerprint,
        "arch": ckpt.arch,
        "iteration": ckpt.iteration,
        "labels": ckpt.labels,
        "meta": ckpt.meta,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = [struct.pack("<I", len(meta_bytes)), meta_bytes]
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name]
        if t.dtype != np.float32:
            raise TypeError(f"{name}: checkpoints store float32 tensors only, got {t.dtype}")
        raw = name.encode("utf-8")
        body.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
        body.append(struct.pack(f"<{t.ndim}I", *t.shape))
        body.append(np.ascontiguousarray(t, dtype=_F32).tobytes())
    payload = b"".join(body)
    header = MAGIC + struct.pack("<II", ckpt.version, len(ckpt.tensors))
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptCheckpoint(f"{source}: not a checkpoint (bad magic or too short)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise IncompatibleCheckpoint(f"{source}: format version {version}, expected {VERSION}")
    payload, (crc,) = blob[12:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptCheckpoint(f"{source}: CRC mismatch (file is corrupt or truncated)")
    try:
        pos = 0
        (meta_len,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        meta = json.loads(payload[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims))
            if pos + nbytes > len(payload):
                raise CorruptCheckpoint(f"{source}: tensor {name} is truncated")
            tensors[name] = np.frombuffer(payload, _F32, int(np.prod(dims)), pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{source}: malformed payload ({exc})") from exc
    if pos != len(payload):
        raise CorruptCheckpoint(f"{source}: {len(payload) - pos} trailing bytes")
    return Checkpoint(tensors, meta["arch"], meta["fingerprint"], int(meta["iteration"]),
                      list(meta["labels"]), dict(meta["meta"]), version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path, expect_fingerprint: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"{path}: cannot read ({exc.strerror})") from exc
    ckpt = decode(blob, str(path))
    if expect_fingerprint is not None and ckpt.fingerprint != expect_fingerprint:
        raise IncompatibleCheckpoint(f"{path}: architecture fingerprint mismatch")
    return ckpt
