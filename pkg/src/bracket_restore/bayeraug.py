"""Bayer-preserving flips and rotations.

A plain flip or quarter turn of an RGGB mosaic moves a green site to the top-left
corner. Dropping one row/column at each affected border shifts the phase back to
RGGB and keeps both dimensions even, so the result still packs into (R, G, G, B).

Rotations are clockwise. The transform order is rotation, then vertical flip,
then horizontal flip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    BayerMosaic,
    HdrImage,
    PatternError,
    RawBracket,
    ShapeError,
    TooSmallError,
    pack_array,
    unpack_array,
)


@dataclass(frozen=True)
class AugmentSpec:
    flip_v: bool = False
    flip_h: bool = False
    rot90_quarter_turns: int = 0

    def __post_init__(self):
        if self.rot90_quarter_turns not in (0, 1, 2, 3):
            raise ValueError(f"quarter turns must be in 0..3, got {self.rot90_quarter_turns}")

    @property
    def is_identity(self) -> bool:
        return not (self.flip_v or self.flip_h or self.rot90_quarter_turns)


def random_spec(rng: np.random.Generator) -> AugmentSpec:
    """Draw a spec; always consumes exactly three draws from ``rng``."""
    v, h = rng.integers(0, 2, size=2)
    k = rng.integers(0, 4)
    return AugmentSpec(bool(v), bool(h), int(k))


def _need(size: int, axis: str) -> None:
    if size < 4:
        raise TooSmallError(f"{axis} extent {size} < 4; cannot crop after transform")


def _check_even(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] % 2 or a.shape[1] % 2:
        raise ShapeError(f"expected an even-sized 2-D mosaic, got {a.shape}")


# array-level transforms: any dtype, no value checks


def flip_v_array(a: np.ndarray) -> np.ndarray:
    _check_even(a)
    _need(a.shape[0], "height")
    return a[::-1][1:-1]


def flip_h_array(a: np.ndarray) -> np.ndarray:
    _check_even(a)
    _need(a.shape[1], "width")
    return a[:, ::-1][:, 1:-1]


def rot90_array(a: np.ndarray, quarter_turns: int) -> np.ndarray:
    _check_even(a)
    k = quarter_turns % 4
    if k == 0:
        return a
    r = np.rot90(a, -k)
    # Which axes need the phase shift after rotating RGGB clockwise:
    # k=1 -> GRBG (columns), k=2 -> BGGR (both), k=3 -> GBRG (rows).
    if k in (1, 2):
        _need(r.shape[1], "width")
        r = r[:, 1:-1]
    if k in (2, 3):
        _need(r.shape[0], "height")
        r = r[1:-1]
    return r


def augment_array(a: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    out = rot90_array(a, spec.rot90_quarter_turns)
    if spec.flip_v:
        out = flip_v_array(out)
    if spec.flip_h:
        out = flip_h_array(out)
    return np.ascontiguousarray(out)


def naive_flip_v_array(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a[::-1])


def naive_flip_h_array(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a[:, ::-1])


# BayerMosaic wrappers


def _rggb(m: BayerMosaic) -> None:
    if m.pattern != "RGGB":
        raise PatternError(f"expected an RGGB mosaic, got {m.pattern}")


def flip_v_preserving(m: BayerMosaic) -> BayerMosaic:
    _rggb(m)
    return BayerMosaic(flip_v_array(m.data), "RGGB")


def flip_h_preserving(m: BayerMosaic) -> BayerMosaic:
    _rggb(m)
    return BayerMosaic(flip_h_array(m.data), "RGGB")


def rot90_preserving(m: BayerMosaic, quarter_turns: int) -> BayerMosaic:
    _rggb(m)
    return BayerMosaic(rot90_array(m.data, quarter_turns), "RGGB")


def augment_mosaic(m: BayerMosaic, spec: AugmentSpec) -> BayerMosaic:
    _rggb(m)
    return BayerMosaic(augment_array(m.data, spec), "RGGB")


def naive_flip_v(m: BayerMosaic) -> BayerMosaic:
    """Plain vertical flip; relabels the pattern (RGGB -> GBRG)."""
    flipped = {"RGGB": "GBRG", "GBRG": "RGGB", "GRBG": "BGGR", "BGGR": "GRBG"}
    return BayerMosaic(naive_flip_v_array(m.data), flipped[m.pattern])


def naive_flip_h(m: BayerMosaic) -> BayerMosaic:
    """Plain horizontal flip; relabels the pattern (RGGB -> GRBG)."""
    flipped = {"RGGB": "GRBG", "GRBG": "RGGB", "GBRG": "BGGR", "BGGR": "GBRG"}
    return BayerMosaic(naive_flip_h_array(m.data), flipped[m.pattern])


def augment_packed(c: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Apply ``spec`` to a (4, H, W) packed array via its mosaic."""
    if spec.is_identity:
        return c
    return pack_array(augment_array(unpack_array(c), spec))


def augment_bracket(b: RawBracket, gt: HdrImage, spec: AugmentSpec) -> tuple[RawBracket, HdrImage]:
    """Apply one spec to every frame and to the ground truth."""
    if b.hw != gt.hw:
        raise ShapeError(f"bracket frames are {b.hw} but ground truth is {gt.hw}")
    if spec.is_identity:
        return b, gt
    frames = np.stack([augment_packed(f, spec) for f in b.frames])
    return RawBracket(frames, b.exposures, b.reference_index), HdrImage(augment_packed(gt.data, spec))


def transform_motion(motion, spec: AugmentSpec) -> np.ndarray:
    """Map a global displacement (dx, dy) through ``spec``.

    Crops do not change a constant displacement, so only the rotation and flips matter.
    Works on (..., 2) arrays.
    """
    m = np.asarray(motion, dtype=np.float64)
    dx, dy = m[..., 0], m[..., 1]
    for _ in range(spec.rot90_quarter_turns):
        # clockwise turn in image coordinates (y down): (x, y) -> (-y, x)
        dx, dy = -dy, dx
    if spec.flip_v:
        dy = -dy
    if spec.flip_h:
        dx = -dx
    return np.stack([dx, dy], axis=-1)
