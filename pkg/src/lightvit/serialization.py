"""Binary weight/tensor files and PPM image input.

Weight file layout (all integers little-endian)::

    b"LVWT"                 magic
    u16                     format version
    u32 + bytes             canonical config text (UTF-8); its SHA-256 is the config digest
    u32                     entry count
    entries, sorted by name:
        u32 + bytes         name (UTF-8)
        u8                  dtype tag (1 = float32, 2 = float64)
        u8                  rank
        u32 * rank          extents
        raw payload         little-endian scalars, C order

Tensor files use magic ``b"LVTN"`` followed by the version and exactly one
entry with an empty name.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import BinaryIO, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, FormatError
from .model import LightViT, ModelConfig
from .tensor import Tensor

WEIGHT_MAGIC = b"LVWT"
TENSOR_MAGIC = b"LVTN"
VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

PathLike = Union[str, os.PathLike]


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class _Reader:
    def __init__(self, buf: bytes, path: PathLike):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated file (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{self.path}: invalid UTF-8 text field") from e


def _write_text(out: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)


def _write_entry(out: BinaryIO, name: str, arr: np.ndarray) -> None:
    dt = np.dtype(arr.dtype)
    if dt not in _TAGS:
        raise FormatError(f"entry {name!r}: unsupported dtype {dt}")
    if arr.ndim == 0:
        raise FormatError(f"entry {name!r}: rank-0 tensors are not storable")
    _write_text(out, name)
    out.write(struct.pack("<BB", _TAGS[dt], arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[dt]]).tobytes())


def _read_entry(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.text()
    tag, rank = r.unpack("<BB")
    if tag not in _DTYPES:
        raise FormatError(f"{r.path}: entry {name!r} has unknown dtype tag {tag}")
    if rank == 0:
        raise FormatError(f"{r.path}: entry {name!r} has rank 0")
    shape = r.unpack(f"<{rank}I")
    dt = _DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    payload = r.take(count * dt.itemsize)
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    return name, arr.astype(dt.newbyteorder("="))


def _header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{r.path}: bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"{r.path}: unsupported format version {version}")


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror or e}") from e


def _write_bytes(path: PathLike, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def weights_to_bytes(config: ModelConfig, state: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(WEIGHT_MAGIC)
    out.write(struct.pack("<H", VERSION))
    _write_text(out, config.canonical_text())
    names = sorted(state)
    out.write(struct.pack("<I", len(names)))
    for name in names:
        _write_entry(out, name, np.asarray(state[name]))
    return out.getvalue()


def save(model: LightViT, path: PathLike) -> None:
    _write_bytes(path, weights_to_bytes(model.config, model.state_dict()))


def read_weights(path: PathLike) -> tuple[str, dict[str, np.ndarray]]:
    """Return ``(canonical_config_text, {name: array})`` from a weight file."""
    r = _Reader(_read_bytes(path), path)
    _header(r, WEIGHT_MAGIC)
    text = r.text()
    (count,) = r.unpack("<I")
    entries: dict[str, np.ndarray] = {}
    prev = None
    for _ in range(count):
        name, arr = _read_entry(r)
        if prev is not None and name <= prev:
            raise FormatError(f"{path}: entry names not unique and sorted ({prev!r} then {name!r})")
        entries[name] = arr
        prev = name
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return text, entries


def load(path: PathLike, expected_config: Optional[ModelConfig] = None) -> LightViT:
    """Rebuild a model from ``path``; the stored config digest must match ``expected_config``."""
    text, entries = read_weights(path)
    stored = config_digest(text)
    if expected_config is not None:
        want = expected_config.digest()
        if want != stored:
            raise ConfigError(f"{path}: config digest mismatch (file {stored[:16]}..., expected {want[:16]}...)")
    try:
        cfg = ModelConfig.from_dict(json.loads(text))
    except (ValueError, TypeError) as e:
        raise FormatError(f"{path}: unreadable config text: {e}") from e
    dtypes = {a.dtype for a in entries.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
    model = LightViT(cfg).astype(dtype)
    try:
        model.load_state_dict(entries)
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: weights do not fit config: {e}") from e
    return model


def dump_tensor(t: Union[Tensor, np.ndarray], path: PathLike) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    out = io.BytesIO()
    out.write(TENSOR_MAGIC)
    out.write(struct.pack("<H", VERSION))
    _write_entry(out, "", arr)
    _write_bytes(path, out.getvalue())


def read_tensor(path: PathLike) -> np.ndarray:
    r = _Reader(_read_bytes(path), path)
    _header(r, TENSOR_MAGIC)
    name, arr = _read_entry(r)
    if name:
        raise FormatError(f"{path}: tensor entry must be unnamed, found {name!r}")
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return arr


def read_ppm(
    path: PathLike, mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD
) -> np.ndarray:
    """Binary P6 PPM (maxval <= 255) -> normalized float32 array of shape 3 x H x W."""
    data = _read_bytes(path)
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace before raster
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as e:
        raise FormatError(f"{path}: bad PPM header") from e
    if not 0 < maxval <= 255:
        raise FormatError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    need = width * height * 3
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise FormatError(f"{path}: truncated PPM raster")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).astype(np.float32) / maxval
    img = (img - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    """Write an H x W x 3 uint8 array as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    _write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
