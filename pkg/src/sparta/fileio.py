"""Binary container shared by checkpoints, sparse deltas and LoRA adapters.

Layout::

    magic      8 bytes   b"SPARTA\\x00\\x01"
    hlen       u64 LE    length of the JSON header in bytes
    header     hlen bytes, UTF-8 JSON (sorted keys)
    padding    zero bytes up to ``data_start`` = align_up(16 + hlen, align)
    payload    arrays at ``data_start + offset``; each offset aligned to ``align``

The header carries ``kind``, ``align`` and an ``arrays`` list of
``{name, dtype, shape, offset, nbytes}``; offsets are relative to ``data_start``.
Every multi-byte value is little-endian.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"SPARTA\x00\x01"
_PREFIX = 16


def align_up(x, a):
    return (x + a - 1) // a * a


def atomic_write_bytes(path, data):
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_container(kind, header, arrays, align=64):
    """Serialize ``arrays`` (list of ``(name, ndarray)``) with a JSON ``header``."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        offset = align_up(offset, align)
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append((offset, raw))
        offset += len(raw)
    full = dict(header)
    full.update({"kind": kind, "align": align, "arrays": entries})
    hbytes = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data_start = align_up(_PREFIX + len(hbytes), align)
    buf = bytearray(data_start + offset)
    buf[:8] = MAGIC
    buf[8:16] = struct.pack("<Q", len(hbytes))
    buf[16:16 + len(hbytes)] = hbytes
    for off, raw in blobs:
        buf[data_start + off: data_start + off + len(raw)] = raw
    return bytes(buf)


def decode_container(data, kind=None):
    """Inverse of :func:`encode_container`; returns ``(header, {name: ndarray})``."""
    if len(data) < _PREFIX or data[:8] != MAGIC:
        raise FormatError("not a sparta container (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    align = header["align"]
    data_start = align_up(_PREFIX + hlen, align)
    arrays = {}
    for e in header["arrays"]:
        start = data_start + e["offset"]
        if e["offset"] % align or start + e["nbytes"] > len(data):
            raise FormatError(f"array {e['name']!r} misaligned or truncated")
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header, arrays


def header_size(data):
    """Bytes before the payload (prefix + JSON + alignment padding)."""
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    return align_up(_PREFIX + hlen, header["align"])


def write_container(path, kind, header, arrays, align=64):
    atomic_write_bytes(path, encode_container(kind, header, arrays, align))


def read_container(path, kind=None):
    with open(path, "rb") as fh:
        return decode_container(fh.read(), kind)


def f32_to_bf16_bits(x):
    """Round float32 to bfloat16 (nearest, ties to even); returns uint16 bit patterns."""
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    nan = np.isnan(np.asarray(x, dtype=np.float32))
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    out = rounded.astype(np.uint16)
    out[nan] = 0x7FC0
    return out


def bf16_bits_to_f32(b):
    return (np.asarray(b, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)
