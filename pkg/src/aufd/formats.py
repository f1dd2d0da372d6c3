"""The ``AUFD`` binary container shared by clip, checkpoint and AU-map files.

Layout: magic ``AUFD`` (4 bytes), version (u16 LE), header length (u32 LE),
header text of ``key=value`` lines, then a float32 little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AUFD"
VERSION = 1


class FormatError(ValueError):
    pass


def pack_container(header: dict, payload: bytes) -> bytes:
    text = "".join(f"{k}={v}\n" for k, v in header.items()).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(text)) + text + payload


def unpack_container(buf: bytes) -> tuple[dict, bytes, int]:
    """Return (header, payload, payload offset)."""
    if len(buf) < 10:
        raise FormatError(f"truncated file: header needs 10 bytes, file ends at byte offset {len(buf)}")
    if buf[:4] != MAGIC:
        raise FormatError("bad magic")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte offset 4")
    if len(buf) < 10 + hlen:
        raise FormatError(
            f"truncated header: expected {hlen} bytes at byte offset 10, file ends at byte offset {len(buf)}"
        )
    header = {}
    for line in buf[10:10 + hlen].decode().splitlines():
        if line:
            key, _, value = line.partition("=")
            header[key] = value
    return header, buf[10 + hlen:], 10 + hlen


def read_f32(payload: bytes, offset: int, count: int, base: int) -> np.ndarray:
    need = offset + 4 * count
    if len(payload) < need:
        raise FormatError(
            f"truncated payload at byte offset {base + len(payload)}: expected data up to byte offset {base + need}"
        )
    return np.frombuffer(payload, dtype="<f4", count=count, offset=offset)


def _check(payload: bytes, offset: int, size: int, base: int) -> None:
    if len(payload) < offset + size:
        raise FormatError(
            f"truncated tensor directory at byte offset {base + len(payload)}: "
            f"expected data up to byte offset {base + offset + size}"
        )


def pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    """Named tensor directory: count, then per tensor name/shape/float32 data."""
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def unpack_tensors(payload: bytes, base: int = 0) -> dict[str, np.ndarray]:
    _check(payload, 0, 4, base)
    (n,) = struct.unpack_from("<I", payload, 0)
    pos = 4
    tensors = {}
    for _ in range(n):
        _check(payload, pos, 2, base)
        (nlen,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        _check(payload, pos, nlen + 1, base)
        name = payload[pos:pos + nlen].decode()
        ndim = payload[pos + nlen]
        pos += nlen + 1
        _check(payload, pos, 4 * ndim, base)
        shape = struct.unpack_from(f"<{ndim}I", payload, pos)
        pos += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = read_f32(payload, pos, count, base).reshape(shape).copy()
        pos += 4 * count
    return tensors


def write_tensor_file(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(pack_container(header, pack_tensors(tensors)))


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    header, payload, base = unpack_container(Path(path).read_bytes())
    return header, unpack_tensors(payload, base)


def write_aumap(path, maps: np.ndarray, **meta) -> None:
    """Write a (T_f, F, H, W) stack as an F x T_f x H x W payload."""
    t, f, h, w = maps.shape
    header = {"kind": "aumap", "dims": f"{f},{t},{h},{w}", **meta}
    payload = np.ascontiguousarray(maps.transpose(1, 0, 2, 3), dtype="<f4").tobytes()
    Path(path).write_bytes(pack_container(header, payload))


def read_aumap(path) -> tuple[np.ndarray, dict]:
    header, payload, base = unpack_container(Path(path).read_bytes())
    if header.get("kind") != "aumap":
        raise FormatError(f"expected kind=aumap, got {header.get('kind')!r}")
    f, t, h, w = (int(v) for v in header["dims"].split(","))
    data = read_f32(payload, 0, f * t * h * w, base).reshape(f, t, h, w)
    return data.transpose(1, 0, 2, 3).astype(np.float32), header
