"""Binary parameter checkpoints.

Layout (little-endian):

    b"LIONCK1\\0"
    u32 entry count
    per entry:  u16 name length, UTF-8 dotted name,
                u8 ndim, u64 x ndim shape,
                f64 x prod(shape) values, C order

Names are the dotted paths produced by ``tree.iter_arrays``, so the same
layout serves every operator variant; loading fills a freshly initialized
template of the matching configuration.
"""
import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .tree import iter_arrays

CK_MAGIC = b"LIONCK1\0"


def save_checkpoint(path, params) -> int:
    entries = list(iter_arrays(params))
    with open(path, "wb") as f:
        f.write(CK_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return len(entries)


def read_checkpoint(path) -> dict:
    where = "checkpoint.load"
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ContractViolation(where, f"cannot read {path}: {exc.strerror}") from exc
    if data[:8] != CK_MAGIC:
        raise ContractViolation(where, "bad magic")
    try:
        (n,) = struct.unpack_from("<I", data, 8)
        pos, out = 12, {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2: pos + 2 + ln].decode()
            pos += 2 + ln
            (nd,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{nd}Q", data, pos + 1)
            pos += 1 + 8 * nd
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(data):
                raise ContractViolation(where, f"truncated entry {name}")
            out[name] = np.frombuffer(data, "<f8", count, pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise ContractViolation(where, f"corrupt checkpoint: {exc}") from exc
    return out


def load_checkpoint(path, template, prefix=None):
    """Copy stored arrays into ``template`` in place; names and shapes must match.

    ``prefix`` selects a sub-tree, e.g. "backbone." from a full detector
    checkpoint; by default it is used when the file holds a detector.
    """
    stored = read_checkpoint(path)
    if prefix is None:
        prefix = "backbone." if any(k.startswith("backbone.") for k in stored) and not any(
            k.startswith("backbone.") for k, _ in iter_arrays(template)
        ) else ""
    if prefix:
        stored = {k[len(prefix):]: v for k, v in stored.items() if k.startswith(prefix)}
    names = dict(iter_arrays(template))
    if set(stored) != set(names):
        missing = sorted(set(names) - set(stored))[:3]
        extra = sorted(set(stored) - set(names))[:3]
        raise ContractViolation("checkpoint.load", f"parameter names differ (missing {missing}, unexpected {extra})")
    for name, arr in names.items():
        if stored[name].shape != arr.shape:
            raise ContractViolation("checkpoint.load", f"{name}: shape {stored[name].shape} != {arr.shape}")
        arr[...] = stored[name]
    return template
