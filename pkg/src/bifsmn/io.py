"""Model and feature files.

Model file layout (all integers little-endian)::

    b"BFSM" | u32 version | u32 header_len | u32 header_crc32 | header | blobs

``header`` is canonical JSON (sorted keys, no whitespace) holding the
architecture and a blob table. Each table entry gives ``name``, ``dtype``
(``<f4`` or ``<u8``), ``shape``, ``offset`` (from the start of the blob
area), ``nbytes`` and ``crc32``. Latent weights, batch-norm statistics and
full-precision layers are stored as float32; binarized weights are also
stored packed (``<name>.bits``, 64-bit words in the bit layout documented in
:mod:`bifsmn.binarize`) with their per-row scales (``<name>.alpha``).

Feature file layout::

    b"BFTR" | u32 T | u32 d | b"f32\\0" | T*d float32 values, row-major
"""
import json
import struct
import zlib

import numpy as np

from .binarize import binarize_weights
from .errors import BifsmnError, LoadError
from .fsmn import BatchNorm, FsmnBlockParams, ThinnableModel

MODEL_MAGIC = b"BFSM"
MODEL_VERSION = 1
FEATURE_MAGIC = b"BFTR"
FEATURE_DTYPE = b"f32\x00"
_PREAMBLE = struct.Struct("<4sIII")
_FEATURE_HEAD = struct.Struct("<4sII4s")
BINARIZED_WEIGHTS = ("V", "U", "lookback", "lookahead")


def _uniform(model, attr):
    values = {getattr(b, attr) for b in model.blocks}
    if len(values) > 1:
        raise BifsmnError(f"blocks disagree on {attr}; the file format needs uniform blocks")
    return values.pop() if values else 0


def _config(model):
    blk = model.blocks[0] if model.blocks else None
    return {
        "n_blocks": model.n_blocks,
        "hidden_dim": int(model.front_W.shape[0]),
        "proj_dim": int(blk.proj_dim) if blk else 0,
        "n_features": int(model.n_features),
        "classes": int(model.n_classes),
        "n_back": _uniform(model, "n_back"),
        "n_ahead": _uniform(model, "n_ahead"),
        "stride_back": _uniform(model, "stride_back") or 1,
        "stride_ahead": _uniform(model, "stride_ahead") or 1,
        "delta_set": list(model.delta_set),
        "binarized": bool(model.binarized),
        "frames": int(model.frames),
    }


def _sections(model):
    out = []
    for name, arr in model.arrays().items():
        out.append((name, np.ascontiguousarray(arr, dtype="<f4")))
        if model.binarized and name.startswith("blocks.") and name.rsplit(".", 1)[1] in BINARIZED_WEIGHTS:
            packed = binarize_weights(arr) if arr.shape[0] else None
            if packed is not None:
                out.append((name + ".bits", np.ascontiguousarray(packed.bits.bits, dtype="<u8")))
                out.append((name + ".alpha", np.ascontiguousarray(packed.alpha, dtype="<f4")))
    return out


def dumps_model(model):
    table, payload, offset = [], [], 0
    for name, arr in _sections(model):
        raw = arr.tobytes()
        table.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        payload.append(raw)
        offset += len(raw)
    header = {"format_version": MODEL_VERSION, "config": _config(model), "blobs": table}
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    pre = _PREAMBLE.pack(MODEL_MAGIC, MODEL_VERSION, len(text), zlib.crc32(text))
    return pre + text + b"".join(payload)


def save_model(model, path):
    data = dumps_model(model)
    with open(path, "wb") as fh:
        fh.write(data)


def loads_model(data):
    if len(data) < _PREAMBLE.size:
        raise LoadError("truncated", "file shorter than the preamble")
    magic, version, hlen, hcrc = _PREAMBLE.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise LoadError("magic", f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise LoadError("version", f"unsupported model format version {version}")
    start = _PREAMBLE.size
    if start + hlen > len(data):
        raise LoadError("truncated", "header extends past end of file")
    text = data[start : start + hlen]
    if zlib.crc32(text) != hcrc:
        raise LoadError("checksum", "header checksum mismatch")
    try:
        header = json.loads(text.decode("utf-8"))
        cfg = header["config"]
        table = header["blobs"]
    except (ValueError, KeyError, TypeError) as exc:
        raise LoadError("header", f"malformed header: {exc}") from None
    if header.get("format_version") != MODEL_VERSION:
        raise LoadError("version", "header version disagrees with preamble")
    base = start + hlen
    arrays, end = {}, base
    for entry in table:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise LoadError("truncated", f"blob {entry['name']} extends past end of file")
        raw = data[lo:hi]
        if zlib.crc32(raw) != entry["crc32"]:
            raise LoadError("checksum", f"checksum mismatch in blob {entry['name']}")
        dtype = np.dtype(entry["dtype"])
        if dtype.str not in ("<f4", "<u8") or dtype.itemsize * int(np.prod(entry["shape"])) != len(raw):
            raise LoadError("header", f"blob {entry['name']} has inconsistent dtype/shape")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
        end = max(end, hi)
    if end != len(data):
        raise LoadError("trailing", f"{len(data) - end} unexpected trailing bytes")
    return _build(cfg, arrays)


def _build(cfg, arrays):
    def get(name):
        try:
            a = arrays[name]
        except KeyError:
            raise LoadError("structure", f"missing blob {name}") from None
        return a.astype(np.float32) if a.dtype.kind == "f" else a

    try:
        blocks = []
        for i in range(cfg["n_blocks"]):
            pre = f"blocks.{i}."
            deltas = sorted({int(k[len(pre) + 3 :].split(".")[0]) for k in arrays if k.startswith(pre + "bn.")})
            bn = {
                d: BatchNorm(*(get(f"{pre}bn.{d}.{f}") for f in ("mean", "var", "scale", "shift")))
                for d in deltas
            }
            blocks.append(FsmnBlockParams(
                V=get(pre + "V"), b=get(pre + "b"), U=get(pre + "U"), b2=get(pre + "b2"),
                lookback=get(pre + "lookback"), lookahead=get(pre + "lookahead"),
                prelu=get(pre + "prelu"), bn=bn,
                stride_back=cfg["stride_back"], stride_ahead=cfg["stride_ahead"],
            ))
        model = ThinnableModel(
            get("front.W"), get("front.b"), blocks, get("cls.W"), get("cls.b"),
            delta_set=tuple(cfg["delta_set"]), binarized=cfg["binarized"], frames=cfg["frames"],
        )
    except BifsmnError as exc:
        raise LoadError("structure", str(exc)) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError("structure", f"inconsistent model: {exc}") from None
    if model.binarized:
        for name, arr in model.arrays().items():
            if name.startswith("blocks.") and name.rsplit(".", 1)[1] in BINARIZED_WEIGHTS and arr.shape[0]:
                packed = binarize_weights(arr)
                if not np.array_equal(get(name + ".bits"), packed.bits.bits) or not np.array_equal(
                    get(name + ".alpha"), packed.alpha
                ):
                    raise LoadError("structure", f"packed section of {name} disagrees with its latent weights")
    return model


def load_model(path):
    with open(path, "rb") as fh:
        return loads_model(fh.read())


def dumps_features(x):
    x = np.ascontiguousarray(x, dtype="<f4")
    if x.ndim != 2:
        raise ValueError("features must be a T x d matrix")
    return _FEATURE_HEAD.pack(FEATURE_MAGIC, x.shape[0], x.shape[1], FEATURE_DTYPE) + x.tobytes()


def save_features(x, path):
    with open(path, "wb") as fh:
        fh.write(dumps_features(x))


def loads_features(data):
    if len(data) < _FEATURE_HEAD.size:
        raise LoadError("truncated", "feature file shorter than its header")
    magic, T, d, dtype = _FEATURE_HEAD.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise LoadError("magic", f"bad feature magic {magic!r}")
    if dtype != FEATURE_DTYPE:
        raise LoadError("header", f"unsupported feature dtype {dtype!r}")
    payload = data[_FEATURE_HEAD.size :]
    if len(payload) != T * d * 4:
        raise LoadError("truncated", f"payload has {len(payload)} bytes, expected {T * d * 4}")
    x = np.frombuffer(payload, dtype="<f4").reshape(T, d).astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise LoadError("header", "feature file contains NaN or Inf")
    return x


def load_features(path):
    with open(path, "rb") as fh:
        return loads_features(fh.read())
