"""TMF1 raw tensor container.

Layout::

    TMF1\\n
    {"dtype":"f32","shape":[...]}\\n
    <little-endian float32 payload>
"""
import json
import os

import numpy as np

from .errors import FormatError

MAGIC = b"TMF1"
_DTYPES = {"f32": np.dtype("<f4")}


def dumps(array):
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64).astype("<f4"))
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to serialize non-finite tensor")
    header = json.dumps({"dtype": "f32", "shape": [int(s) for s in arr.shape]},
                        separators=(",", ":"))
    return MAGIC + b"\n" + header.encode("utf-8") + b"\n" + arr.tobytes()


def save(path, array):
    data = dumps(array)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _split(blob, source):
    if blob[:5] != MAGIC + b"\n":
        raise FormatError(f"{source}: not a TMF1 file")
    end = blob.find(b"\n", 5)
    if end < 0:
        raise FormatError(f"{source}: truncated header")
    header = json.loads(blob[5:end].decode("utf-8"))
    if header.get("dtype") not in _DTYPES:
        raise FormatError(f"{source}: unsupported dtype {header.get('dtype')!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or any(
            not isinstance(s, int) or s < 0 for s in shape):
        raise FormatError(f"{source}: bad shape {shape!r}")
    return header, end + 1


def loads(blob, source="<bytes>"):
    header, offset = _split(blob, source)
    dtype = _DTYPES[header["dtype"]]
    count = int(np.prod(header["shape"], dtype=np.int64))
    payload = blob[offset:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"{source}: payload has {len(payload)} bytes, "
                         f"expected {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).astype(np.float32).reshape(header["shape"])


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read(), source=str(path))


def read_header(path):
    """Header dict of a TMF1 file, plus the payload size in bytes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header, offset = _split(blob, str(path))
    return dict(header, payload_bytes=len(blob) - offset)
