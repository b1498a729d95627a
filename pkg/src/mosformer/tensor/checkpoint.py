"""Binary checkpoint format.

Layout (little-endian)::

    b"MOSF" | version u32 | record*
    record := name_len u32 | name utf-8 | dtype u8 | rank u32 | extents u64*rank | raw data

Records run until end of file. Order is preserved on load.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Union

import numpy as np

from ..exceptions import FormatError

MAGIC = b"MOSF"
VERSION = 1

DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
TAG_DTYPES = {tag: dt for dt, tag in DTYPE_TAGS.items()}


def dumps(state: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in state.items():
        arr = np.asarray(value)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dtype not in DTYPE_TAGS:
            raise FormatError(f"unsupported dtype {arr.dtype} for record {name!r}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", DTYPE_TAGS[dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:4] != MAGIC:
        raise FormatError("not a MOSF checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 8
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            tag, rank = struct.unpack_from("<BI", blob, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            dtype = TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(blob):
                raise FormatError(f"record {name!r} is truncated")
            out[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint at byte {pos}: {exc}") from exc
    return out


def save(path: Union[str, Path], state: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())
