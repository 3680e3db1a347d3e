"""Binary checkpoints: named float sections plus a JSON config snapshot.

Layout (all integers little-endian):
  magic "PADCKPT1"
  u32 section count
  per section: u32 name length, name utf-8, u8 dtype tag (0=f64, 1=f32),
               u32 rank, rank * u32 dims, raw little-endian payload
  u32 config length, config JSON utf-8

Round trips are byte-identical; loading into a model requires the section
names to match the model's parameter registry exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PADCKPT1"
_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAG_OF = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


@dataclass
class Checkpoint:
    sections: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(self.sections)))
            for name in sorted(self.sections):
                arr = self.sections[name]
                tag = _TAG_OF.get(arr.dtype.newbyteorder("="))
                if tag is None:
                    raise ValueError(
                        f"section {name!r}: unsupported dtype {arr.dtype}")
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<BI", tag, arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag])
                         .tobytes())
            cfg = json.dumps(self.config, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(cfg)))
            fh.write(cfg)

    @staticmethod
    def load(path: str) -> "Checkpoint":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[: len(MAGIC)] != MAGIC:
            raise ValueError(f"{path}: bad magic, not a PADCKPT1 file")
        off = len(MAGIC)

        def take(n: int) -> bytes:
            nonlocal off
            if off + n > len(blob):
                raise ValueError(f"{path}: truncated checkpoint")
            out = blob[off: off + n]
            off += n
            return out

        (count,) = struct.unpack("<I", take(4))
        sections: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", take(4))
            name = take(name_len).decode("utf-8")
            tag, rank = struct.unpack("<BI", take(5))
            if tag not in _DTYPE_TAGS:
                raise ValueError(f"{path}: section {name!r} has bad dtype tag {tag}")
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            dtype = _DTYPE_TAGS[tag]
            payload = take(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize)
            sections[name] = np.frombuffer(payload, dtype=dtype).reshape(dims)
        (cfg_len,) = struct.unpack("<I", take(4))
        config = json.loads(take(cfg_len).decode("utf-8"))
        if off != len(blob):
            raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
        return Checkpoint(sections, config)


def snapshot_model(model, config: dict) -> Checkpoint:
    return Checkpoint(
        {name: p.data.copy() for name, p in model.params().items()}, config)


def restore_model(model, ckpt: Checkpoint, allow_subset: bool = False) -> None:
    """Copy checkpoint sections into the model's parameter registry.

    Section names must match the registry; unknown names are rejected, and
    unless allow_subset is set, missing names are too.
    """
    params = model.params()
    unknown = sorted(set(ckpt.sections) - set(params))
    if unknown:
        raise ValueError(f"checkpoint has unknown sections: {unknown}")
    missing = sorted(set(params) - set(ckpt.sections))
    if missing and not allow_subset:
        raise ValueError(f"checkpoint is missing sections: {missing}")
    for name, arr in ckpt.sections.items():
        p = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ValueError(
                f"section {name!r}: shape {arr.shape} != {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
