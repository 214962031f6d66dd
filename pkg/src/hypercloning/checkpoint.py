"""Self-describing binary checkpoints (format version "1").

Layout::

    offset 0    b"HCLN1"                     5-byte magic
    offset 5    uint64 little-endian          header length H
    offset 13   UTF-8 JSON header             H bytes
                zero padding                  up to the next multiple of 64
    payload     raw little-endian tensors     each at a 64-byte aligned
                                              offset relative to payload start

Header keys: ``format_version``, ``created``, ``config``, ``tensors``
(name -> shape, dtype, offset, nbytes), ``payload_bytes``, ``receipt``
(or null), ``optimizer`` (``{"step": n}`` or null). Optimizer moments are
stored as tensors named ``optimizer.m.<param>`` / ``optimizer.v.<param>``.
"""

import datetime
import json
import os
import struct
import tempfile

import numpy as np

from . import model as M
from .cloning import ExpansionReceipt
from .errors import BadMagicError, CheckpointError, ShapeMismatchError, TruncatedError, VersionError

MAGIC = b"HCLN1"
FORMAT_VERSION = "1"
ALIGN = 64
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


def _align(n):
    return -(-n // ALIGN) * ALIGN


def _dtype_code(a):
    if a.dtype == np.float32:
        return "<f4"
    if a.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported dtype {a.dtype}")


def _tensors_to_store(params, opt_state):
    out = dict(params)
    if opt_state is not None:
        for k in params:
            out[f"optimizer.m.{k}"] = opt_state["m"][k]
            out[f"optimizer.v.{k}"] = opt_state["v"][k]
    return out


def encode(config, params, receipt=None, opt_state=None, created=None):
    """Checkpoint bytes for the given model (and optional extras)."""
    M.check_params(params, config)
    tensors = _tensors_to_store(params, opt_state)
    index = {}
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        data = np.ascontiguousarray(arr, dtype=code).tobytes()
        offset = _align(offset)
        index[name] = {"shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(data)}
        blobs.append((offset, data))
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "created": created or datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": config.to_dict(),
        "tensors": index,
        "payload_bytes": offset,
        "receipt": None if receipt is None else receipt.to_dict(),
        "optimizer": None if opt_state is None else {"step": int(opt_state["step"])},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    start = _align(len(MAGIC) + 8 + len(hbytes))
    buf = bytearray(start + offset)
    buf[: len(MAGIC)] = MAGIC
    buf[len(MAGIC) : len(MAGIC) + 8] = struct.pack("<Q", len(hbytes))
    buf[len(MAGIC) + 8 : len(MAGIC) + 8 + len(hbytes)] = hbytes
    for off, data in blobs:
        buf[start + off : start + off + len(data)] = data
    return bytes(buf)


def save(path, config, params, receipt=None, opt_state=None):
    """Write atomically: temp file in the target directory, then rename."""
    data = encode(config, params, receipt, opt_state)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".hcln-", dir=directory)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise OSError(e.errno, f"cannot write checkpoint {path}: {e.strerror}") from e


def read_header(data):
    """Parse and validate the header; returns (header, payload_start)."""
    if len(data) < len(MAGIC) + 8:
        if data[: len(MAGIC)] != MAGIC[: len(data)]:
            raise BadMagicError("not a checkpoint file (bad magic)")
        raise TruncatedError("file shorter than the fixed preamble")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    hend = len(MAGIC) + 8 + hlen
    if hend > len(data):
        raise TruncatedError(f"header declares {hlen} bytes but file ends at {len(data)}")
    try:
        header = json.loads(data[len(MAGIC) + 8 : hend].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"header is not valid JSON: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {header.get('format_version')!r}")
    return header, _align(hend)


def _validate_index(header, start, file_size):
    payload = header.get("payload_bytes")
    if not isinstance(payload, int) or payload < 0:
        raise CheckpointError("header lacks a valid payload_bytes")
    if start + payload > file_size:
        raise TruncatedError(f"payload needs {start + payload} bytes, file has {file_size}")
    if start + payload != file_size:
        raise CheckpointError(f"file has {file_size - start - payload} unexpected trailing bytes")
    spans = []
    for name, ent in header["tensors"].items():
        if ent["dtype"] not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {ent['dtype']}")
        count = int(np.prod(ent["shape"], dtype=np.int64))
        if ent["nbytes"] != count * np.dtype(ent["dtype"]).itemsize:
            raise CheckpointError(f"{name}: nbytes disagrees with shape and dtype")
        if ent["offset"] % ALIGN or ent["offset"] < 0 or ent["offset"] + ent["nbytes"] > payload:
            raise CheckpointError(f"{name}: offset out of range or misaligned")
        spans.append((ent["offset"], ent["offset"] + ent["nbytes"], name))
    spans.sort()
    for (_, end, a), (beg, _, b) in zip(spans, spans[1:]):
        if beg < end:
            raise CheckpointError(f"tensors {a} and {b} overlap")


def decode(data):
    header, start = read_header(data)
    _validate_index(header, start, len(data))
    config = M.ModelConfig.from_dict(header["config"])
    tensors = {}
    for name, ent in header["tensors"].items():
        off = start + ent["offset"]
        arr = np.frombuffer(data, dtype=ent["dtype"], count=ent["nbytes"] // np.dtype(ent["dtype"]).itemsize, offset=off)
        tensors[name] = arr.astype(_DTYPES[ent["dtype"]]).reshape(ent["shape"])
    params = {k: v for k, v in tensors.items() if not k.startswith("optimizer.")}
    try:
        M.check_params(params, config)
    except ValueError as e:
        raise ShapeMismatchError(str(e)) from e
    opt_state = None
    if header.get("optimizer") is not None:
        opt_state = {"step": header["optimizer"]["step"], "m": {}, "v": {}}
        for k in params:
            try:
                opt_state["m"][k] = tensors[f"optimizer.m.{k}"]
                opt_state["v"][k] = tensors[f"optimizer.v.{k}"]
            except KeyError:
                raise ShapeMismatchError(f"optimizer state missing for {k}") from None
            if opt_state["m"][k].shape != params[k].shape or opt_state["v"][k].shape != params[k].shape:
                raise ShapeMismatchError(f"optimizer state shape mismatch for {k}")
    receipt = None if header.get("receipt") is None else ExpansionReceipt.from_dict(header["receipt"])
    if receipt is not None and receipt.dest_config != config:
        raise ShapeMismatchError("receipt destination config disagrees with the stored config")
    return config, params, receipt, opt_state


def load(path):
    """Returns (config, params, receipt or None, optimizer state or None)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise OSError(e.errno, f"cannot read checkpoint {path}: {e.strerror}") from e
    return decode(data)


def payload_bytes(path):
    """The payload section alone (everything after the header padding)."""
    with open(path, "rb") as fh:
        data = fh.read()
    _, start = read_header(data)
    return data[start:]
