"""Binary checkpoint format.

Layout (little-endian)::

    b"HGTF" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 dtype (0=f32, 1=f64) | u8 rank
                | rank x u64 extents | raw row-major payload
    u32 CRC32 of every preceding byte

A ``key = value`` config sidecar (``<path>.cfg``) sits next to the file.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, IntegrityError
from .model import HGTSFormer, ModelConfig, count_parameters

MAGIC = b"HGTF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: ModelConfig | None = None
    meta: dict[str, str] = field(default_factory=dict)


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16:
        raise FormatError(f"checkpoint too short ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("CRC mismatch: checkpoint is corrupted or truncated")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def need(n):
        if pos + n > len(body):
            raise FormatError("unexpected end of checkpoint data")

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        need(nlen + 2)
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        need(8 * rank)
        shape = struct.unpack_from(f"<{rank}Q", body, pos)
        pos += 8 * rank
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after last tensor")
    return out


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path: str) -> str:
    return path + ".cfg"


def save_checkpoint(path: str, model: HGTSFormer, meta: dict | None = None) -> str:
    _atomic_write(path, encode_tensors(model.state_dict()))
    info = {"format_version": VERSION, "n_parameters": model.num_parameters()}
    info.update(meta or {})
    text = model.cfg.to_text() + "[meta]\n" + "".join(f"{k} = {v}\n" for k, v in info.items())
    _atomic_write(sidecar_path(path), text.encode("utf-8"))
    return path


def read_sidecar(path: str) -> tuple[ModelConfig, dict[str, str]]:
    import configparser

    side = sidecar_path(path)
    try:
        with open(side, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise FormatError(f"missing config sidecar {side}") from exc
    parser = configparser.ConfigParser()
    parser.read_string(text)
    meta = dict(parser.items("meta")) if parser.has_section("meta") else {}
    parser.remove_section("meta")
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser.items(section))
    return ModelConfig.from_text("\n".join(lines)), meta


def load_checkpoint(path: str, cfg: ModelConfig | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    tensors = decode_tensors(blob)
    meta: dict[str, str] = {}
    if cfg is None:
        cfg, meta = read_sidecar(path)
    expected = count_parameters(cfg)
    stored = sum(a.size for a in tensors.values())
    if stored != expected:
        raise IntegrityError(f"checkpoint holds {stored} values, config implies {expected}")
    return Checkpoint(tensors, cfg, meta)


def load_model(path: str, cfg: ModelConfig | None = None) -> HGTSFormer:
    ckpt = load_checkpoint(path, cfg)
    model = HGTSFormer(ckpt.config)
    model.load_state_dict(ckpt.tensors)
    return model
