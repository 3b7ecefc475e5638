"""RAW/HDR data model, Bayer pack/unpack and the ``.brk`` binary container.

Every array held by these types is float32 and read-only once constructed.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

PathLike = Union[str, Path]

PATTERNS = ("RGGB", "GRBG", "GBRG", "BGGR")

# Color index used by the pattern-identity checks: R=0, G=1, B=2.
COLOR_INDEX = {"R": 0, "G": 1, "B": 2}
RGGB_CHANNEL_COLORS = (0, 1, 1, 2)


class ShapeError(ValueError):
    """Array dimensions violate a type or operation contract."""


class PatternError(ValueError):
    """A mosaic has the wrong Bayer pattern for the requested operation."""


class TooSmallError(ShapeError):
    """Input has too little margin for a crop-based transform."""


class FormatError(ValueError):
    """A ``.brk`` file is truncated, corrupt or of an unknown version."""


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float32, copy=True)
    if arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim}-D array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BayerMosaic:
    data: np.ndarray
    pattern: str = "RGGB"

    def __post_init__(self):
        data = _frozen(self.data, 2, "BayerMosaic")
        if self.pattern not in PATTERNS:
            raise PatternError(f"unknown Bayer pattern {self.pattern!r}")
        h, w = data.shape
        if h % 2 or w % 2:
            raise ShapeError(f"mosaic dims must be even, got {h}x{w}")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ValueError("mosaic values must be finite and non-negative")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, BayerMosaic):
            return NotImplemented
        return self.pattern == other.pattern and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class PackedRaw:
    """4 x H x W packed RAW with channels (R, G1, G2, B)."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, 3, "PackedRaw")
        if data.shape[0] != 4:
            raise ShapeError(f"packed RAW needs 4 channels, got {data.shape[0]}")
        object.__setattr__(self, "data", data)

    @property
    def hw(self) -> tuple[int, int]:
        return self.data.shape[1:]

    def __eq__(self, other):
        if not isinstance(other, PackedRaw):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class HdrImage:
    """Linear 4 x H x W packed-RGGB image; values may exceed 1."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, 3, "HdrImage")
        if data.shape[0] != 4:
            raise ShapeError(f"HDR image needs 4 channels, got {data.shape[0]}")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ValueError("HDR values must be finite and non-negative")
        object.__setattr__(self, "data", data)

    @property
    def hw(self) -> tuple[int, int]:
        return self.data.shape[1:]

    def __eq__(self, other):
        if not isinstance(other, HdrImage):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class RawBracket:
    """N packed LDR frames, shortest exposure first.

    ``frames`` is stored as one (N, 4, H, W) array; ``frame(i)`` gives a PackedRaw view.
    """

    frames: np.ndarray
    exposures: tuple[float, ...]
    reference_index: int = 0

    def __post_init__(self):
        frames = self.frames
        if isinstance(frames, (list, tuple)):
            frames = np.stack([f.data if isinstance(f, PackedRaw) else f for f in frames])
        frames = _frozen(frames, 4, "RawBracket")
        n = frames.shape[0]
        if frames.shape[1] != 4:
            raise ShapeError(f"frames need 4 channels, got {frames.shape[1]}")
        if n < 2:
            raise ShapeError(f"a bracket needs at least 2 frames, got {n}")
        exposures = tuple(float(e) for e in self.exposures)
        if len(exposures) != n:
            raise ShapeError(f"{n} frames but {len(exposures)} exposures")
        if exposures[0] != 1.0:
            raise ValueError("exposures[0] must be 1 (ratios are relative to frame 0)")
        if any(e <= 0 for e in exposures) or any(b < a for a, b in zip(exposures, exposures[1:])):
            raise ValueError(f"exposures must be positive and non-decreasing: {exposures}")
        if self.reference_index != 0:
            raise ValueError("the reference is always the shortest exposure (index 0)")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "exposures", exposures)

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.frames.shape[2:]

    def frame(self, i: int) -> PackedRaw:
        return PackedRaw(self.frames[i])

    @property
    def reference(self) -> PackedRaw:
        return self.frame(self.reference_index)

    def __eq__(self, other):
        if not isinstance(other, RawBracket):
            return NotImplemented
        return (
            self.exposures == other.exposures
            and self.reference_index == other.reference_index
            and np.array_equal(self.frames, other.frames)
        )


def pack_mosaic(m: BayerMosaic) -> PackedRaw:
    if m.pattern != "RGGB":
        raise PatternError(f"pack_mosaic expects RGGB, got {m.pattern}")
    d = m.data
    return PackedRaw(np.stack([d[0::2, 0::2], d[0::2, 1::2], d[1::2, 0::2], d[1::2, 1::2]]))


def unpack_mosaic(p: PackedRaw) -> BayerMosaic:
    return BayerMosaic(unpack_array(p.data), "RGGB")


def pack_array(d: np.ndarray) -> np.ndarray:
    """Pack a raw (H_m, W_m) array without type checks (negative values allowed)."""
    return np.stack([d[0::2, 0::2], d[0::2, 1::2], d[1::2, 0::2], d[1::2, 1::2]])


def unpack_array(c: np.ndarray) -> np.ndarray:
    if c.ndim != 3 or c.shape[0] != 4:
        raise ShapeError(f"expected (4, H, W), got {c.shape}")
    _, h, w = c.shape
    out = np.empty((2 * h, 2 * w), dtype=c.dtype)
    out[0::2, 0::2] = c[0]
    out[0::2, 1::2] = c[1]
    out[1::2, 0::2] = c[2]
    out[1::2, 1::2] = c[3]
    return out


def color_index_mosaic(h: int, w: int, pattern: str = "RGGB") -> np.ndarray:
    """Mosaic holding the color index (R=0, G=1, B=2) of each site."""
    tile = np.array([[COLOR_INDEX[pattern[0]], COLOR_INDEX[pattern[1]]],
                     [COLOR_INDEX[pattern[2]], COLOR_INDEX[pattern[3]]]], dtype=np.float32)
    return np.tile(tile, (h // 2, w // 2))


def pattern_of(color_mosaic: np.ndarray) -> str:
    """Name the Bayer pattern of a color-index mosaic from its top-left 2x2 block.

    Raises PatternError if the mosaic is not a consistent 2x2 tiling of a known pattern.
    """
    names = {v: k for k, v in COLOR_INDEX.items()}
    tl = color_mosaic[:2, :2].astype(int)
    label = "".join(names[int(v)] for v in tl.ravel())
    if label not in PATTERNS:
        raise PatternError(f"not a Bayer pattern: {label}")
    if not np.array_equal(color_index_mosaic(*color_mosaic.shape, label), color_mosaic):
        raise PatternError("color-index mosaic is not a periodic Bayer tiling")
    return label


# ---------------------------------------------------------------------------
# .brk container
#
#   magic  b"BRK\x00"            4 bytes
#   header <HBBIIIII             version, kind, reserved, n, c, h, w, reference_index
#   exposures                    n little-endian float64 (n = 0 for non-bracket kinds)
#   payload                      n*c*h*w (or c*h*w) little-endian float32, row-major
#   crc32 of header+exposures+payload, <I
# ---------------------------------------------------------------------------

MAGIC = b"BRK\x00"
VERSION = 1
KIND_BRACKET, KIND_IMAGE, KIND_FLOW = 0, 1, 2
_HEADER = struct.Struct("<HBBIIIII")


def _encode(kind: int, payload: np.ndarray, exposures: Sequence[float] = (), ref: int = 0) -> bytes:
    payload = np.ascontiguousarray(payload, dtype="<f4")
    if kind == KIND_BRACKET:
        n, c, h, w = payload.shape
    else:
        n, (c, h, w) = 0, payload.shape
    body = _HEADER.pack(VERSION, kind, 0, n, c, h, w, ref)
    body += np.asarray(exposures, dtype="<f8").tobytes() + payload.tobytes()
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


def _decode(raw: bytes, expect_kind: int):
    if len(raw) < 4 + _HEADER.size + 4 or raw[:4] != MAGIC:
        raise FormatError("not a .brk file (bad magic or too short)")
    version, kind, _, n, c, h, w, ref = _HEADER.unpack_from(raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported .brk version {version}")
    if kind != expect_kind:
        raise FormatError(f".brk kind {kind}, expected {expect_kind}")
    count = (n if kind == KIND_BRACKET else 1) * c * h * w
    start = 4 + _HEADER.size
    expected = start + 8 * n + 4 * count + 4
    if len(raw) != expected:
        raise FormatError(f"file size {len(raw)} does not match header (expected {expected})")
    (crc,) = struct.unpack_from("<I", raw, expected - 4)
    if zlib.crc32(raw[4 : expected - 4]) != crc:
        raise FormatError("checksum mismatch")
    exposures = np.frombuffer(raw, dtype="<f8", count=n, offset=start)
    payload = np.frombuffer(raw, dtype="<f4", count=count, offset=start + 8 * n)
    shape = (n, c, h, w) if kind == KIND_BRACKET else (c, h, w)
    return payload.reshape(shape).astype(np.float32), [float(e) for e in exposures], ref


def bracket_to_bytes(b: RawBracket) -> bytes:
    return _encode(KIND_BRACKET, b.frames, b.exposures, b.reference_index)


def bracket_from_bytes(raw: bytes) -> RawBracket:
    frames, exposures, ref = _decode(raw, KIND_BRACKET)
    try:
        return RawBracket(frames, tuple(exposures), ref)
    except ValueError as exc:
        raise FormatError(f"invalid bracket contents: {exc}") from exc


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def save_bracket(path: PathLike, b: RawBracket, extra_meta: dict | None = None) -> None:
    """Write ``path`` (.brk) and a ``path.meta`` key=value sidecar."""
    path = Path(path)
    _write_atomic(path, bracket_to_bytes(b))
    meta = {
        "n_frames": b.n,
        "height": b.hw[0],
        "width": b.hw[1],
        "reference_index": b.reference_index,
        "exposures": ",".join(repr(e) for e in b.exposures),
    }
    meta.update(extra_meta or {})
    write_meta(path.with_name(path.name + ".meta"), meta)


def load_bracket(path: PathLike) -> RawBracket:
    return bracket_from_bytes(Path(path).read_bytes())


def save_image(path: PathLike, img: HdrImage | np.ndarray) -> None:
    data = img.data if isinstance(img, HdrImage) else img
    _write_atomic(Path(path), _encode(KIND_IMAGE, data))


def load_image(path: PathLike) -> HdrImage:
    data, _, _ = _decode(Path(path).read_bytes(), KIND_IMAGE)
    return HdrImage(data)


def save_flow(path: PathLike, flow: np.ndarray) -> None:
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be (2, H, W), got {flow.shape}")
    _write_atomic(Path(path), _encode(KIND_FLOW, flow))


def load_flow(path: PathLike) -> np.ndarray:
    data, _, _ = _decode(Path(path).read_bytes(), KIND_FLOW)
    return data


def write_meta(path: PathLike, meta: dict) -> None:
    lines = [f"{k}={v}" for k, v in meta.items()]
    _write_atomic(Path(path), ("\n".join(lines) + "\n").encode())


def read_meta(path: PathLike) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed line {line!r}")
        out[key.strip()] = value.strip()
    return out
