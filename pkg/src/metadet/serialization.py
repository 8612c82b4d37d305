"""
Binary formats used by persisted artifacts.

Tensor file::

    8-byte magic (b"MDTF32\\x00\\x01" float32 or b"MDTI64\\x00\\x01" int64)
    uint32 ndim, then ndim x uint64 dims      (little-endian)
    raw little-endian payload

Parameter blob::

    b"MDPARAM1", uint64 header length, UTF-8 JSON header
    [{"name", "dtype", "shape", "offset", "nbytes"}...], then the raw payload
"""

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import IngestionError

_MAGIC = {
    np.dtype("<f4"): b"MDTF32\x00\x01",
    np.dtype("<i8"): b"MDTI64\x00\x01",
}
_DTYPE_OF_MAGIC = {v: k for k, v in _MAGIC.items()}

_TORCH_TO_NP = {torch.float32: "<f4", torch.int64: "<i8", torch.float64: "<f8", torch.int32: "<i4"}


def _as_numpy(t):
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t)


def write_tensor(path, tensor):
    arr = _as_numpy(tensor)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4", copy=False)
    elif arr.dtype.kind in "iub":
        arr = arr.astype("<i8", copy=False)
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as f:
        f.write(_MAGIC[arr.dtype])
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def read_tensor(path) -> torch.Tensor:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise IngestionError(path, "file not found") from None
    dtype = _DTYPE_OF_MAGIC.get(raw[:8])
    if dtype is None:
        raise IngestionError(path, "bad tensor magic")
    (ndim,) = struct.unpack_from("<I", raw, 8)
    shape = struct.unpack_from(f"<{ndim}Q", raw, 12)
    offset = 12 + 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) - offset != count * dtype.itemsize:
        raise IngestionError(path, "payload size does not match header")
    arr = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape)
    return torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))


def save_params(path, named_tensors):
    """Write an ordered name -> tensor mapping as one blob."""
    header, chunks, offset = [], [], 0
    for name, t in named_tensors.items():
        t = t.detach().cpu().contiguous()
        arr = t.numpy().astype(_TORCH_TO_NP[t.dtype], copy=False)
        data = arr.tobytes()
        header.append({"name": name, "dtype": _TORCH_TO_NP[t.dtype], "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    head = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(b"MDPARAM1")
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for c in chunks:
            f.write(c)


def load_params(path) -> "OrderedDict[str, torch.Tensor]":
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise IngestionError(path, "file not found") from None
    if raw[:8] != b"MDPARAM1":
        raise IngestionError(path, "bad parameter blob magic")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    out = OrderedDict()
    for entry in header:
        dtype = np.dtype(entry["dtype"])
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype=dtype, count=entry["nbytes"] // dtype.itemsize, offset=start)
        out[entry["name"]] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True)).reshape(entry["shape"])
    return out


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def json_sha256(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def write_json(path, obj):
    Path(path).write_text(canonical_json(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise IngestionError(path, "file not found") from None
    except json.JSONDecodeError as exc:
        raise IngestionError(path, f"invalid JSON: {exc}") from None
