"""Versioned binary container for network parameters and solver state.

Layout: ``MAGIC | version (u32 LE) | header length (u64 LE) | JSON header |
raw little-endian array data | sha256 of all preceding bytes``. Writing the
same content twice yields identical bytes.
"""
import hashlib
import json
import struct

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"DEEPFPCK"
VERSION = 1
_DIGEST = 32


def dumps(meta, arrays):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<")
        data = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"version": VERSION, "meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def loads(blob):
    if len(blob) < len(MAGIC) + 12 + _DIGEST or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
    version, header_len = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    data = body[start + header_len:]
    arrays = {}
    for entry in header["arrays"]:
        chunk = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"array {entry['name']!r} is truncated")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]).copy()
    return header["meta"], arrays


def save(path, meta, arrays):
    blob = dumps(meta, arrays)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)


def pack_nets(nets, prefix=""):
    """Flatten a ``{name: Mlp}`` mapping into ``(meta, arrays)``."""
    meta, arrays = {}, {}
    for name, net in nets.items():
        m, a = net.state()
        meta[prefix + name] = m
        for key, arr in a.items():
            arrays[f"{prefix}{name}/{key}"] = arr
    return meta, arrays


def unpack_nets(meta, arrays, prefix=""):
    from .nn import Mlp

    nets = {}
    for full, m in meta.items():
        if not full.startswith(prefix):
            continue
        name = full[len(prefix):]
        sub = {key.split("/", 1)[1]: arr for key, arr in arrays.items()
               if key.split("/", 1)[0] == full}
        try:
            nets[name] = Mlp.from_state(m, sub)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"network {name!r} cannot be restored: {exc}") from exc
    return nets
