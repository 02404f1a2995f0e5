"""Reader and writer for ``.cimw`` weight containers.

All integers are little-endian::

    magic        4 bytes   b"CIMW"
    version      u16       currently 1
    count        u32       number of tensors
    per tensor (header table, in file order):
        name_len u16, name (UTF-8, name_len bytes)
        rank     u8
        dims     u32 * rank
        offset   u64       absolute byte offset of the payload in the file
    payload region: each tensor's raw bf16 words, row-major, u16 little-endian

Tensor payloads follow the header table in header order with no padding.
"""

from __future__ import annotations

import struct

import numpy as np

from .bf16 import from_bf16_bits, is_bf16, to_bf16_bits

MAGIC = b"CIMW"
VERSION = 1


class ContainerError(ValueError):
    pass


def write_container(path, tensors: dict) -> None:
    """Write ``{name: array}``; every value must already be bf16-representable."""
    entries = []
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float32)
        if not is_bf16(arr):
            raise ContainerError(f"tensor {name!r} holds values that are not bf16-representable")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ContainerError(f"tensor {name!r} cannot be described in the header")
        entries.append((raw_name, arr))

    header_len = 4 + 2 + 4 + sum(2 + len(n) + 1 + 4 * a.ndim + 8 for n, a in entries)
    header = bytearray(MAGIC + struct.pack("<HI", VERSION, len(entries)))
    payloads = []
    offset = header_len
    for raw_name, arr in entries:
        header += struct.pack("<H", len(raw_name)) + raw_name
        header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", offset)
        data = to_bf16_bits(arr).astype("<u2").tobytes()
        payloads.append(data)
        offset += len(data)
    assert len(header) == header_len

    with open(path, "wb") as fh:
        fh.write(header)
        for data in payloads:
            fh.write(data)


def read_container(path) -> dict:
    """Read a container into ``{name: float32 array}`` in file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: not a CIMW container (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported container version {version}")
        pos = 10
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            n = int(np.prod(dims, dtype=np.int64))
            if offset + 2 * n > len(blob):
                raise ContainerError(f"{path}: payload of {name!r} runs past end of file")
            words = np.frombuffer(blob, dtype="<u2", count=n, offset=offset).astype(np.uint16)
            tensors[name] = from_bf16_bits(words).reshape(dims)
    except struct.error as exc:
        raise ContainerError(f"{path}: truncated header ({exc})") from exc
    return tensors
