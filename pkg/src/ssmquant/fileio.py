"""On-disk formats: the MQCK tensor container and the MQCD calibration file.

MQCK layout (little-endian throughout)::

    b"MQCK"  u32 version=1  u32 count
    count x { u16 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64), u8 rank,
              u32 dims[rank], u64 offset }
    payload (tensor bytes at the stated absolute file offsets)

MQCD layout::

    b"MQCD"  u32 version=1  u32 batch  u32 tokens  u32 d_model  f32 payload
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import MambaBlockParams, MambaModel, ModelConfig
from .quant import ActQuant

CKPT_MAGIC = b"MQCK"
CALIB_MAGIC = b"MQCD"
FORMAT_VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    """Base class for malformed container files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class OverlappingEntriesError(FormatError):
    pass


class DuplicateNameError(FormatError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"{path}: directory {path.parent} does not exist")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------- checkpoint


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    names = sorted(tensors)
    arrays = []
    for name in names:
        a = np.asarray(tensors[name])
        if a.dtype not in _DTYPE_CODES:
            raise TypeError(f"tensor {name!r}: dtype {a.dtype} is not float32/float64")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"tensor {name!r} contains non-finite values")
        arrays.append(a)
    table = []
    for name, a in zip(names, arrays):
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        table.append((raw, _DTYPE_CODES[a.dtype], a.shape))
    header_len = 12 + sum(2 + len(raw) + 2 + 4 * len(shape) + 8 for raw, _, shape in table)
    out = bytearray(CKPT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(names)))
    offset = header_len
    for (raw, code, shape), a in zip(table, arrays):
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", code, len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
        out += struct.pack("<Q", offset)
        offset += a.size * a.dtype.itemsize
    for a in arrays:
        out += np.ascontiguousarray(a, dtype=DTYPES[_DTYPE_CODES[a.dtype]]).tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        n = struct.calcsize(fmt)
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError("truncated payload: header ends early")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += n
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError("truncated payload: header ends early")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {CKPT_MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    version, count = r.take("<II")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {FORMAT_VERSION}")
    entries = []
    seen = set()
    for _ in range(count):
        (n,) = r.take("<H")
        try:
            name = r.raw(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"tensor name is not valid UTF-8: {e}") from e
        code, rank = r.take("<BB")
        if code not in DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        dims = r.take(f"<{rank}I") if rank else ()
        (offset,) = r.take("<Q")
        if name in seen:
            raise DuplicateNameError(f"duplicate name {name!r} in entry table")
        seen.add(name)
        entries.append((name, DTYPES[code], tuple(dims), offset))
    header_end = r.pos
    spans = []
    for name, dt, dims, offset in entries:
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(buf):
            raise TruncatedPayloadError(
                f"truncated payload: tensor {name!r} needs bytes [{offset}, {offset + nbytes}) "
                f"but the file has {len(buf)}")
        if offset < header_end and nbytes:
            raise OverlappingEntriesError(f"overlapping entries: tensor {name!r} overlaps the header")
        spans.append((offset, offset + nbytes, name))
    spans = sorted(sp for sp in spans if sp[1] > sp[0])
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise OverlappingEntriesError(f"overlapping entries: {n0!r} and {n1!r}")
    out = {}
    for name, dt, dims, offset in entries:
        a = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims, dtype=np.int64)), offset=offset)
        a = a.reshape(dims).astype(dt.newbyteorder("="), copy=True)
        if not np.all(np.isfinite(a)):
            raise FormatError(f"tensor {name!r} contains non-finite values")
        out[name] = a
    return out


def write_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    try:
        return decode_checkpoint(buf)
    except FormatError as e:
        raise type(e)(f"{path}: {e}") from None


# ---------------------------------------------------------------- calibration


def encode_calib(data) -> bytes:
    a = np.asarray(data)
    if a.ndim != 3:
        raise ValueError(f"calibration data must be (batch, tokens, d_model), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("calibration data contains non-finite values")
    head = CALIB_MAGIC + struct.pack("<IIII", FORMAT_VERSION, *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_calib(buf: bytes) -> np.ndarray:
    if buf[:4] != CALIB_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {CALIB_MAGIC!r}")
    if len(buf) < 20:
        raise TruncatedPayloadError("truncated payload: header ends early")
    version, b, t, d = struct.unpack_from("<IIII", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {FORMAT_VERSION}")
    need = b * t * d * 4
    have = len(buf) - 20
    if have < need:
        raise TruncatedPayloadError(f"truncated payload: expected {need} bytes, found {have}")
    if have > need:
        raise FormatError(f"payload length mismatch: expected {need} bytes, found {have}")
    a = np.frombuffer(buf, dtype="<f4", offset=20).reshape(b, t, d).astype(np.float32)
    if not np.all(np.isfinite(a)):
        raise FormatError("calibration payload contains non-finite values")
    return a


def write_calib(path, data) -> None:
    atomic_write_bytes(path, encode_calib(data))


def read_calib(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    try:
        return decode_calib(buf)
    except FormatError as e:
        raise type(e)(f"{path}: {e}") from None


# ---------------------------------------------------------------- model mapping

_MODES = {"dynamic": 0.0, "static": 1.0}
_AGRAN = {"per-tensor": 0.0, "per-token": 1.0}


def model_to_tensors(m: MambaModel) -> dict[str, np.ndarray]:
    """Weights as f32; hooks, adapters and quantizer ranges as f64."""
    t = {"config": m.config.as_vector(), "final_gamma": m.final_gamma.astype(np.float32)}
    for i, p in enumerate(m.blocks):
        for name in p.WEIGHTS:
            t[f"block/{i}/{name}"] = np.asarray(getattr(p, name), dtype=np.float32)
        if p.s_out is not None:
            t[f"block/{i}/s_out"] = np.asarray(p.s_out, dtype=np.float64)
        if p.dt1_shift is not None:
            t[f"block/{i}/dt1_shift"] = np.asarray(p.dt1_shift, dtype=np.float64)
        t[f"block/{i}/online_hadamard"] = np.array([float(p.had_out), float(p.had_h)])
    if m.in_adapter is not None:
        t["adapter/in"] = np.asarray(m.in_adapter, dtype=np.float64)
    if m.out_adapter is not None:
        t["adapter/out"] = np.asarray(m.out_adapter, dtype=np.float64)
    aq = m.act_quant
    if aq is not None:
        if not isinstance(aq, ActQuant):
            raise TypeError("only ActQuant activation quantizers can be stored")
        t["act_quant/spec"] = np.array([float(aq.bits), _MODES[aq.mode], _AGRAN[aq.granularity]])
        for key, (lo, hi) in sorted((aq.ranges or {}).items()):
            t[f"act_quant/range/{key}"] = np.array([lo, hi], dtype=np.float64)
    return t


def model_from_tensors(t: Mapping[str, np.ndarray]) -> MambaModel:
    if "config" not in t:
        raise FormatError("checkpoint has no model config")
    cfg = ModelConfig.from_vector(t["config"]).validate()
    blocks = []
    for i in range(cfg.n_blocks):
        kw = {}
        for name in MambaBlockParams.WEIGHTS:
            key = f"block/{i}/{name}"
            if key not in t:
                raise FormatError(f"checkpoint is missing tensor {key!r}")
            kw[name] = np.asarray(t[key], dtype=np.float64)
        p = MambaBlockParams(**kw)
        if f"block/{i}/s_out" in t:
            p.s_out = np.asarray(t[f"block/{i}/s_out"], dtype=np.float64)
        if f"block/{i}/dt1_shift" in t:
            p.dt1_shift = np.asarray(t[f"block/{i}/dt1_shift"], dtype=np.float64)
        flags = t.get(f"block/{i}/online_hadamard", np.zeros(2))
        p.had_out, p.had_h = bool(flags[0]), bool(flags[1])
        blocks.append(p)
    m = MambaModel(
        config=cfg,
        blocks=blocks,
        final_gamma=np.asarray(t["final_gamma"], dtype=np.float64),
        in_adapter=np.asarray(t["adapter/in"], dtype=np.float64) if "adapter/in" in t else None,
        out_adapter=np.asarray(t["adapter/out"], dtype=np.float64) if "adapter/out" in t else None,
    )
    if "act_quant/spec" in t:
        bits, mode, gran = (float(v) for v in t["act_quant/spec"])
        prefix = "act_quant/range/"
        ranges = {k[len(prefix):]: (float(v[0]), float(v[1])) for k, v in t.items()
                  if k.startswith(prefix)}
        m.act_quant = ActQuant(
            bits=int(bits),
            mode="static" if mode else "dynamic",
            granularity="per-token" if gran else "per-tensor",
            ranges=ranges or None,
        )
    return m


def save_model(path, m: MambaModel, extra: Mapping[str, np.ndarray] | None = None) -> None:
    t = model_to_tensors(m)
    for k, v in (extra or {}).items():
        if k in t:
            raise DuplicateNameError(f"duplicate name {k!r}")
        t[k] = np.asarray(v, dtype=np.float64)
    write_checkpoint(path, t)


def load_model(path) -> MambaModel:
    return model_from_tensors(read_checkpoint(path))


__all__ = [
    "BadMagicError", "VersionMismatchError", "TruncatedPayloadError",
    "OverlappingEntriesError", "DuplicateNameError", "FormatError",
    "encode_checkpoint", "decode_checkpoint", "write_checkpoint", "read_checkpoint",
    "encode_calib", "decode_calib", "write_calib", "read_calib",
    "model_to_tensors", "model_from_tensors", "save_model", "load_model",
    "atomic_write_bytes", "atomic_write_text",
]
