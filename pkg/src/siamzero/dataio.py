"""Binary PGM, TSV manifests, and the SZFM / SZIM / SZCK containers.

Every floating-point payload is stored as little-endian float32 so that
round trips are bit-exact on any platform.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"SZFM"
FEATURE_VERSION = 1
IMAGE_MAGIC = b"SZIM"
CHECKPOINT_MAGIC = b"SZCK"
CHECKPOINT_VERSION = 1

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


class DataError(ValueError):
    """Base class for every malformed-input error raised while reading files."""


class UnsupportedFormatError(DataError):
    pass


class MalformedHeaderError(DataError):
    pass


class MaxvalError(DataError):
    pass


class TruncatedError(DataError):
    pass


class ManifestError(DataError):
    pass


class CheckpointError(DataError):
    pass


@dataclass(frozen=True)
class GrayImage:
    """8-bit single-channel raster. ``pixels`` has shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"GrayImage needs a non-empty 2-D raster, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValueError("GrayImage intensities must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", np.ascontiguousarray(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_flat(cls, width: int, height: int, values) -> "GrayImage":
        arr = np.asarray(values, dtype=np.uint8)
        if arr.size != width * height:
            raise ValueError(f"expected {width * height} pixels, got {arr.size}")
        return cls(arr.reshape(height, width))

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None


# --- PGM -------------------------------------------------------------------


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last token.
    """
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise MalformedHeaderError("PGM header ends early")
        start = i
        while i < n and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
            i += 1
        tokens.append(data[start:i])
    if i >= n or not data[i : i + 1].isspace():
        raise MalformedHeaderError("PGM header must end with a single whitespace byte")
    return tokens, i + 1


def decode_pgm(data: bytes) -> GrayImage:
    if data[:2] != b"P5":
        raise UnsupportedFormatError(f"unsupported format: magic {data[:2]!r}, expected b'P5'")
    tokens, offset = _pgm_tokens(data[2:], 3)
    offset += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise MalformedHeaderError(f"non-integer PGM header field in {tokens!r}") from exc
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"PGM dimensions must be positive, got {width}x{height}")
    if maxval != 255:
        raise MaxvalError(f"maxval must be 255, got {maxval}")
    payload = data[offset : offset + width * height]
    if len(payload) < width * height:
        raise TruncatedError(f"PGM payload has {len(payload)} bytes, expected {width * height}")
    return GrayImage(np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy())


def encode_pgm(img: GrayImage) -> bytes:
    return b"P5\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def load_pgm(path) -> GrayImage:
    return decode_pgm(Path(path).read_bytes())


def save_pgm(img: GrayImage, path) -> None:
    Path(path).write_bytes(encode_pgm(img))


# --- SZIM (normalized float images) ----------------------------------------


def save_szim(pixels: np.ndarray, path) -> None:
    pixels = np.asarray(pixels, dtype=np.float32)
    h, w = pixels.shape
    Path(path).write_bytes(IMAGE_MAGIC + struct.pack("<II", w, h) + pixels.astype(_F32).tobytes())


def load_szim(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != IMAGE_MAGIC:
        raise UnsupportedFormatError(f"bad magic {data[:4]!r}, expected {IMAGE_MAGIC!r}")
    if len(data) < 12:
        raise TruncatedError("SZIM header truncated")
    w, h = struct.unpack_from("<II", data, 4)
    expected = 12 + 4 * w * h
    if len(data) != expected:
        raise TruncatedError(f"SZIM file has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=_F32, offset=12).reshape(h, w).astype(np.float32)


# --- manifest ----------------------------------------------------------------


@dataclass
class Manifest:
    entries: list[tuple[str, int]]
    root: Path = field(default_factory=Path)

    @property
    def num_classes(self) -> int:
        return 1 + max(c for _, c in self.entries) if self.entries else 0

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def __len__(self):
        return len(self.entries)


def parse_manifest(text: str, root=".", strict: bool = True) -> Manifest:
    entries = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ManifestError(f"line {lineno}: expected 'path<TAB>classid', got {line!r}")
        rel, cls = parts[0], parts[1].strip()
        try:
            class_id = int(cls)
        except ValueError:
            raise ManifestError(f"line {lineno}: class id {cls!r} is not an integer") from None
        if class_id < 0:
            raise ManifestError(f"line {lineno}: negative class id {class_id}")
        if rel in seen:
            raise ManifestError(f"line {lineno}: duplicate path {rel!r}")
        seen.add(rel)
        entries.append((rel, class_id))
    manifest = Manifest(entries, Path(root))
    present = {c for _, c in entries}
    missing = sorted(set(range(manifest.num_classes)) - present)
    if missing:
        msg = f"class ids are not contiguous; missing {missing[:10]}{'...' if len(missing) > 10 else ''}"
        if strict:
            raise ManifestError(msg)
        log.warning(msg)
    return manifest


def load_manifest(path, strict: bool = True) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), root=path.parent, strict=strict)


def write_manifest(entries, path) -> None:
    lines = [f"{rel}\t{cls}\n" for rel, cls in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


# --- SZFM feature matrices ---------------------------------------------------


@dataclass(frozen=True)
class TemplateMatrix:
    """Embedded templates stacked row-wise, one row per class id."""

    features: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        ids = np.ascontiguousarray(self.class_ids, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ValueError(f"template matrix must be non-empty 2-D, got shape {feats.shape}")
        if ids.shape != (feats.shape[0],):
            raise ValueError("one class id per row required")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate class id in template matrix")
        feats.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "class_ids", ids)

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    def subset(self, allowed) -> "TemplateMatrix":
        allowed = set(int(c) for c in allowed)
        mask = np.array([int(c) in allowed for c in self.class_ids])
        return TemplateMatrix(self.features[mask], self.class_ids[mask])


def write_feature_matrix(F: TemplateMatrix, path) -> None:
    rows, cols = F.features.shape
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, rows, cols)
    body = F.features.astype(_F32).tobytes() + F.class_ids.astype(_U32).tobytes()
    Path(path).write_bytes(header + body)


def read_feature_matrix(path) -> TemplateMatrix:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise UnsupportedFormatError(f"bad magic {data[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(data) < 16:
        raise TruncatedError("SZFM header truncated")
    version, rows, cols = struct.unpack_from("<III", data, 4)
    if version != FEATURE_VERSION:
        raise DataError(f"SZFM version {version} not supported (expected {FEATURE_VERSION})")
    expected = 16 + 4 * rows * cols + 4 * rows
    if len(data) != expected:
        raise TruncatedError(f"SZFM length mismatch: {len(data)} bytes, expected {expected}")
    feats = np.frombuffer(data, dtype=_F32, count=rows * cols, offset=16).reshape(rows, cols)
    ids = np.frombuffer(data, dtype=_U32, count=rows, offset=16 + 4 * rows * cols)
    return TemplateMatrix(feats.astype(np.float32), ids.astype(np.int64))


# --- SZCK checkpoints --------------------------------------------------------
#
# layout: magic, u32 version, u32 meta length, meta bytes (UTF-8 key=value
# lines), u32 record count, then per record:
#   u32 name length, name bytes, u32 rank, rank x u32 dims, float32 payload


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)


def save_checkpoint(params: Mapping[str, np.ndarray], path, meta: Mapping[str, str] | None = None) -> None:
    meta_text = "".join(f"{k}={v}\n" for k, v in (meta or {}).items()).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_text)), meta_text]
    chunks.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = np.asarray(value, dtype=np.float32)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.astype(_F32).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path, expected_shapes: Mapping[str, tuple] | None = None) -> Checkpoint:
    """Read an SZCK file; optionally validate names and shapes against an architecture."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise UnsupportedFormatError("bad checkpoint magic, expected b'SZCK'")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported")
    meta_text = r.take(r.u32()).decode("utf-8")
    meta = dict(line.split("=", 1) for line in meta_text.splitlines() if line)
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32(rank)) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        count = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(r.take(4 * count), dtype=_F32)
        params[name] = payload.reshape(dims).astype(np.float32)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after last record")
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in params:
                raise CheckpointError(f"missing parameter {name!r}")
            if params[name].shape != tuple(shape):
                raise CheckpointError(
                    f"shape mismatch for {name!r}: file {params[name].shape}, architecture {tuple(shape)}"
                )
        extra = sorted(set(params) - set(expected_shapes))
        if extra:
            raise CheckpointError(f"unexpected parameters {extra}")
    return Checkpoint(params, meta)
