"""GFFW v1 weight files.

Little-endian, no padding::

    b"GFFW"  u32 version (=1)  u32 tensor_count
    per tensor:
        u32 name_len  name (UTF-8)  u8 frozen  u32 ndim  u32 dims[ndim]
        float32 data, row-major
"""

from __future__ import annotations

import os
import struct

import numpy as np

from gff.backbone import ParameterRegistry
from gff.errors import ContractError, FormatError

MAGIC = b"GFFW"
VERSION = 1


def export_weights(registry: ParameterRegistry, path: str | os.PathLike) -> None:
    if len(registry) == 0:
        raise ContractError("refusing to export an empty registry")
    parts = [MAGIC, struct.pack("<II", VERSION, len(registry))]
    for name, t in registry.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", int(registry.is_frozen(name)), t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def import_weights(path: str | os.PathLike, template: ParameterRegistry | None = None) -> ParameterRegistry:
    """Read a GFFW file into a float32 registry.

    With ``template``, names and shapes must match it exactly.
    """
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    if rd.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic (not a GFFW file)")
    version, count = rd.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    reg = ParameterRegistry()
    for i in range(count):
        (name_len,) = rd.unpack("<I", f"name length of tensor {i}")
        try:
            name = rd.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: tensor {i} name is not UTF-8") from None
        frozen, ndim = rd.unpack("<BI", f"flags of {name!r}")
        if frozen not in (0, 1):
            raise FormatError(f"{path}: tensor {name!r} has frozen flag {frozen}")
        dims = rd.unpack(f"<{ndim}I", f"dims of {name!r}")
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(rd.take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(dims)
        if name in reg:
            raise FormatError(f"{path}: duplicate tensor {name!r}")
        reg.add(name, data.astype(np.float32), bool(frozen), dtype=np.float32)
    if rd.pos != len(rd.buf):
        raise FormatError(f"{path}: {len(rd.buf) - rd.pos} trailing bytes after {count} tensors")
    if template is not None:
        check_against(reg, template, path)
    return reg


def check_against(reg: ParameterRegistry, template: ParameterRegistry, path="weights") -> None:
    for name, t in template.items():
        if name not in reg:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if reg[name].shape != t.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {reg[name].shape}, expected {t.shape}")
    extra = [k for k in reg if k not in template]
    if extra:
        raise FormatError(f"{path}: unexpected tensor {extra[0]!r}")
