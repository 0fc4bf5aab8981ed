"""NCTJ checkpoint files.

Layout::

    b"NCTJ" | u32 version | u32 header_len | header JSON (utf-8) | payload

All integers little-endian. The payload is the concatenation of float32
little-endian parameter blobs in the order the header lists them.
"""

import json
import os
import struct

import numpy as np

from ..errors import FormatError
from ..model import LayerSpec, Model

MAGIC = b"NCTJ"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


def save_checkpoint(model, path, epoch=0, seeds=None, extra=None):
    params = []
    blobs = []
    for name, tensor in model.params.items():
        blob = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        params.append({"name": name, "shape": list(tensor.shape), "nbytes": len(blob),
                       "frozen": model.params.is_frozen(name)})
        blobs.append(blob)
    header = {
        "architecture": model.architecture,
        "layers": [spec.to_dict() for spec in model.layers],
        "input_shape": list(model.input_shape),
        "K": model.num_classes,
        "m": model.feature_dim,
        "epoch": int(epoch),
        "seeds": seeds or {},
        "etf_seed": model.etf_seed,
        "params": params,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    return path


def read_header(path):
    """Parse and validate the header; returns (header, payload_offset)."""
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise FormatError(f"{path}: truncated prefix", offset=len(prefix))
        magic, version, head_len = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}", offset=4)
        raw = fh.read(head_len)
    if len(raw) < head_len:
        raise FormatError(f"{path}: truncated header", offset=_PREFIX.size + len(raw))
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON", offset=_PREFIX.size) from exc
    offset = _PREFIX.size + head_len
    declared = 0
    for p in header["params"]:
        if p["nbytes"] != 4 * int(np.prod(p["shape"])):
            raise FormatError(f"{path}: parameter {p['name']} declares {p['nbytes']} bytes "
                              f"for shape {p['shape']}", offset=offset + declared)
        declared += p["nbytes"]
    if size - offset != declared:
        raise FormatError(f"{path}: payload is {size - offset} bytes, header declares {declared}",
                          offset=offset)
    return header, offset


def load_checkpoint(path):
    """Rebuild a Model bit-exactly from an NCTJ file."""
    header, offset = read_header(path)
    layers = [LayerSpec.from_dict(d) for d in header["layers"]]
    model = Model(layers, int(header["K"]), int(header["m"]), tuple(header["input_shape"]),
                  architecture=header["architecture"], etf_seed=header.get("etf_seed"))
    with open(path, "rb") as fh:
        fh.seek(offset)
        for p in header["params"]:
            data = np.frombuffer(fh.read(p["nbytes"]), dtype="<f4").astype(np.float32)
            model.params.add(p["name"], data.reshape(p["shape"]), frozen=bool(p["frozen"]))
    return model


def checkpoint_meta(path):
    return read_header(path)[0]
