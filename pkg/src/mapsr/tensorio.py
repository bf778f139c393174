"""Raster containers and their on-disk formats.

Binary containers share one layout: a 4-byte magic, a little-endian u32
version (currently 1), a fixed number of little-endian u32 dimension
fields, then the payload.

======  ================  ==========================================
magic   dims              payload
======  ================  ==========================================
MSRF    D, H, W           f32, channel-major (d*H*W + u*W + v)
MSRL    C, H, W           u8 class indices, row-major
MSRS    H, W              u32 segment ids, row-major
======  ================  ==========================================

Images are binary PPM (P6, maxval 255).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
NODATA = 255
NODATA_COLOR = (255, 0, 255)

PathLike = str | os.PathLike


class TensorIOError(Exception):
    """Base class for container read/write failures."""


class BadMagicError(TensorIOError):
    pass


class UnsupportedVersionError(TensorIOError):
    pass


class TruncatedFileError(TensorIOError):
    pass


class NonFiniteError(TensorIOError, ValueError):
    pass


class ClassRangeError(TensorIOError, ValueError):
    pass


class ImageFormatError(TensorIOError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, order="C", copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense ``D x H x W`` embedding raster.

    ``patch_size`` and ``source_grid`` record where a patch-grid map came
    from; they are informational and not serialized.
    """

    data: np.ndarray
    patch_size: int | None = None
    source_grid: tuple[int, int] | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"feature map must be a non-empty D x H x W array, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise NonFiniteError("feature map contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """Return a ``(H*W, D)`` float64 view of the per-pixel vectors."""
        d = self.dim
        return self.data.reshape(d, -1).T.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """``H x W`` class raster over ``{0..C-1}``; 255 marks nodata."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValueError(f"label map must be a non-empty H x W array, got shape {data.shape}")
        if not 1 <= self.num_classes <= NODATA:
            raise ValueError(f"num_classes must be in [1, 255], got {self.num_classes}")
        if np.issubdtype(data.dtype, np.integer):
            bad = (data < 0) | ((data >= self.num_classes) & (data != NODATA))
        else:
            raise TypeError(f"label data must be integer, got {data.dtype}")
        if bad.any():
            v = int(data[bad].flat[0])
            raise ClassRangeError(f"class index {v} out of range for C={self.num_classes}")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def valid(self) -> np.ndarray:
        return self.data != NODATA

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class ImageRaster:
    """``3 x H x W`` image with channels in ``[0, 1]``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[0] != 3 or min(data.shape) < 1:
            raise ValueError(f"image must be 3 x H x W, got shape {data.shape}")
        if not np.isfinite(data).all() or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class ScoreMap:
    """``C x H x W`` per-class scores."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[0] < 2 or min(data.shape) < 1:
            raise ValueError(f"score map must be C x H x W with C >= 2, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise NonFiniteError("score map contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# binary containers


def write_container(path: PathLike, magic: bytes, dims: tuple[int, ...], payload: bytes) -> None:
    header = magic + struct.pack(f"<{1 + len(dims)}I", FORMAT_VERSION, *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_container(path: PathLike, magic: bytes, ndims: int) -> tuple[tuple[int, ...], memoryview]:
    """Parse a container header; return its dims and the remaining bytes."""
    raw = Path(path).read_bytes()
    header_len = 4 + 4 * (1 + ndims)
    if len(raw) < 4 or raw[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: header truncated")
    version, *dims = struct.unpack_from(f"<{1 + ndims}I", raw, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    return tuple(dims), memoryview(raw)[header_len:]


def take_payload(buf: memoryview, offset: int, dtype: str, count: int, path: PathLike) -> np.ndarray:
    nbytes = np.dtype(dtype).itemsize * count
    if offset + nbytes > len(buf):
        raise TruncatedFileError(f"{path}: payload truncated (need {nbytes} bytes at offset {offset})")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


def write_feature_map(fmap: FeatureMap, path: PathLike) -> None:
    if not np.isfinite(fmap.data).all():
        raise NonFiniteError("refusing to write non-finite feature map")
    write_container(path, b"MSRF", fmap.shape, fmap.data.astype("<f4").tobytes())


def read_feature_map(path: PathLike) -> FeatureMap:
    (d, h, w), buf = read_container(path, b"MSRF", 3)
    if min(d, h, w) < 1:
        raise TensorIOError(f"{path}: zero dimension in header")
    vals = take_payload(buf, 0, "<f4", d * h * w, path)
    if not np.isfinite(vals).all():
        raise NonFiniteError(f"{path}: non-finite values in payload")
    return FeatureMap(vals.reshape(d, h, w).astype(np.float32))


def write_score_map(scores: ScoreMap, path: PathLike) -> None:
    """Score maps reuse the MSRF container."""
    write_container(path, b"MSRF", scores.shape, scores.data.astype("<f4").tobytes())


def read_score_map(path: PathLike) -> ScoreMap:
    return ScoreMap(read_feature_map(path).data)


def write_label_map(labels: LabelMap, path: PathLike) -> None:
    h, w = labels.shape
    write_container(path, b"MSRL", (labels.num_classes, h, w), labels.data.tobytes())


def read_label_map(path: PathLike) -> LabelMap:
    (c, h, w), buf = read_container(path, b"MSRL", 3)
    if min(h, w) < 1:
        raise TensorIOError(f"{path}: zero dimension in header")
    vals = take_payload(buf, 0, "u1", h * w, path)
    return LabelMap(vals.reshape(h, w).copy(), num_classes=c)


def write_segments(assignment: np.ndarray, path: PathLike) -> None:
    assignment = np.asarray(assignment)
    h, w = assignment.shape
    write_container(path, b"MSRS", (h, w), assignment.astype("<u4").tobytes())


def read_segments(path: PathLike) -> np.ndarray:
    (h, w), buf = read_container(path, b"MSRS", 2)
    return take_payload(buf, 0, "<u4", h * w, path).reshape(h, w).astype(np.int64)


# ---------------------------------------------------------------------------
# PPM


def _ppm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed PPM header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise ImageFormatError("malformed PPM header")
    return tokens, pos + 1


def read_ppm_bytes(path: PathLike) -> np.ndarray:
    """Return the raw ``H x W x 3`` uint8 raster of a P6 file."""
    raw = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), pos = _ppm_tokens(raw, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PPM header") from exc
    if magic != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval}, expected 255")
    if w < 1 or h < 1:
        raise ImageFormatError(f"{path}: non-positive image size")
    n = w * h * 3
    if len(raw) - pos < n:
        raise TruncatedFileError(f"{path}: pixel data truncated")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos).reshape(h, w, 3)


def write_ppm_bytes(rgb: np.ndarray, path: PathLike) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_image(path: PathLike) -> ImageRaster:
    rgb = read_ppm_bytes(path)
    return ImageRaster(np.transpose(rgb, (2, 0, 1)).astype(np.float32) / np.float32(255.0))


def write_image(image: ImageRaster, path: PathLike) -> None:
    # round half up
    q = np.floor(image.data.astype(np.float64) * 255.0 + 0.5)
    write_ppm_bytes(np.transpose(np.clip(q, 0, 255), (1, 2, 0)).astype(np.uint8), path)


def write_colormap(labels: LabelMap, palette, path: PathLike) -> None:
    """Render a label map as a P6 image; nodata pixels become magenta."""
    palette = np.asarray(palette, dtype=np.int64)
    if palette.ndim != 2 or palette.shape != (labels.num_classes, 3):
        raise ValueError(f"palette must have {labels.num_classes} RGB entries, got shape {palette.shape}")
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[: labels.num_classes] = np.clip(palette, 0, 255)
    lut[NODATA] = NODATA_COLOR
    write_ppm_bytes(lut[labels.data], path)


def default_palette(num_classes: int) -> np.ndarray:
    base = np.array(
        [
            [0, 112, 255],  # water
            [38, 115, 0],  # tree canopy
            [163, 255, 115],  # low vegetation
            [156, 156, 156],  # impervious
            [255, 170, 0],
            [230, 0, 0],
            [115, 0, 76],
            [0, 0, 0],
        ],
        dtype=np.int64,
    )
    reps = -(-num_classes // len(base))
    return np.tile(base, (reps, 1))[:num_classes]
