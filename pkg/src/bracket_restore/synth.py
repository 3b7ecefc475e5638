"""Synthetic degraded brackets with HDR ground truth.

Scenes are procedural (smooth background, soft ellipses, thin strokes) and are
evaluated at continuous mosaic coordinates, so a frame moved by a sub-pixel global
translation is rendered exactly instead of interpolated. Motion blur averages
several renders along the drift direction.

Motions are (dx, dy) in mosaic pixels with the flow convention of ``flow``:
frame_i(q) = scene(q - motion_i), hence reference(p) = frame_i(p + motion_i).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .core import HdrImage, RawBracket, ShapeError, pack_array, save_bracket, save_image, read_meta

# RGGB site colors for the 2x2 mosaic cell
_SITE_COLOR = np.array([[0, 1], [1, 2]])


@dataclass(frozen=True)
class DegradationParams:
    exposure_ratios: tuple[float, ...] = (1.0, 4.0, 16.0, 64.0, 256.0)
    read_noise_sigma: float = 0.005
    shot_noise_gain: float = 0.001
    blur_kernel_sizes: tuple[int, ...] = (1, 1, 3, 3, 5)
    max_drift: float = 1.5
    jitter: float = 0.5
    saturation: float = 1.0

    def __post_init__(self):
        r = tuple(float(x) for x in self.exposure_ratios)
        k = tuple(int(x) for x in self.blur_kernel_sizes)
        object.__setattr__(self, "exposure_ratios", r)
        object.__setattr__(self, "blur_kernel_sizes", k)
        if not r or r[0] != 1.0:
            raise ValueError("the first exposure ratio must be 1")
        if any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError(f"exposure ratios must be strictly increasing: {r}")
        if len(k) != len(r):
            raise ValueError("one blur kernel size per exposure is required")
        if any(s < 1 or s % 2 == 0 for s in k):
            raise ValueError(f"blur kernel sizes must be odd and >= 1: {k}")
        if self.read_noise_sigma < 0 or self.shot_noise_gain < 0:
            raise ValueError("noise parameters must be >= 0")
        if self.max_drift < 0 or self.jitter < 0:
            raise ValueError("motion parameters must be >= 0")

    @property
    def n_frames(self) -> int:
        return len(self.exposure_ratios)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown degradation keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class _Ellipse:
    cx: float
    cy: float
    rx: float
    ry: float
    angle: float
    color: tuple[float, float, float]
    edge: float


@dataclass(frozen=True)
class _Stroke:
    x0: float
    y0: float
    x1: float
    y1: float
    width: float
    color: tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class SceneSource:
    """Procedural HDR scene plus the exact per-frame global motions (N, 2)."""

    height: int
    width: int
    motions: np.ndarray
    background: tuple = ()
    ellipses: tuple = ()
    strokes: tuple = ()
    flat_value: float | None = None

    @classmethod
    def flat(cls, value: float, height: int, width: int, n_frames: int = 2) -> "SceneSource":
        return cls(height, width, np.zeros((n_frames, 2)), flat_value=float(value))

    def render(self, dx: float = 0.0, dy: float = 0.0) -> np.ndarray:
        """Mosaic (float64) of the scene translated by (dx, dy)."""
        h, w = self.height, self.width
        if self.flat_value is not None:
            return np.full((h, w), self.flat_value)
        y, x = np.mgrid[0:h, 0:w].astype(np.float64)
        color = np.tile(_SITE_COLOR, (h // 2, w // 2))
        x = x - dx
        y = y - dy
        rgb = np.zeros((3, h, w))
        base, gx, gy, amp, fx, fy, phase = self.background
        u, v = x / w, y / h
        shade = (1 + gx * u + gy * v) * (1 + amp * np.sin(2 * np.pi * (fx * u + fy * v) + phase))
        for c in range(3):
            rgb[c] = base[c] * shade
        for e in self.ellipses:
            ca, sa = math.cos(e.angle), math.sin(e.angle)
            xr = (x - e.cx) * ca + (y - e.cy) * sa
            yr = -(x - e.cx) * sa + (y - e.cy) * ca
            r = np.sqrt((xr / e.rx) ** 2 + (yr / e.ry) ** 2)
            mask = 0.5 * (1 - np.tanh((r - 1) * min(e.rx, e.ry) / e.edge))
            for c in range(3):
                rgb[c] += e.color[c] * mask
        for s in self.strokes:
            px, py = s.x1 - s.x0, s.y1 - s.y0
            t = np.clip(((x - s.x0) * px + (y - s.y0) * py) / (px * px + py * py), 0, 1)
            d2 = (x - s.x0 - t * px) ** 2 + (y - s.y0 - t * py) ** 2
            mask = np.exp(-d2 / (2 * s.width**2))
            for c in range(3):
                rgb[c] += s.color[c] * mask
        return np.take_along_axis(rgb, color[None], 0)[0]

    @property
    def clean(self) -> np.ndarray:
        return self.render(0.0, 0.0)


def _loguniform(rng, lo, hi, size=None):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


def _tint(rng, level):
    t = rng.uniform(0.6, 1.4, 3)
    return tuple(float(level * v) for v in t / t.mean())


def _sample_motions(rng, n_frames, max_drift, jitter):
    ang = rng.uniform(0, 2 * np.pi)
    mag = rng.uniform(0, max_drift)
    drift = np.array([math.cos(ang), math.sin(ang)]) * mag
    motions = np.arange(n_frames)[:, None] * drift[None] + rng.normal(0, jitter, (n_frames, 2))
    motions[0] = 0.0
    return motions


def synth_scene(rng: np.random.Generator, h_m: int, w_m: int,
                params: DegradationParams | None = None, min_range: float = 100.0) -> SceneSource:
    """Random scene of mosaic size (h_m, w_m) with dynamic range >= ``min_range``."""
    if h_m % 2 or w_m % 2 or h_m < 2 or w_m < 2:
        raise ShapeError(f"mosaic dims must be even and positive, got {h_m}x{w_m}")
    params = params or DegradationParams()
    while True:
        background = (
            _tint(rng, float(_loguniform(rng, 0.003, 0.03))),
            float(rng.uniform(-0.8, 0.8)), float(rng.uniform(-0.8, 0.8)),
            float(rng.uniform(0, 0.5)), float(rng.uniform(0.5, 3)), float(rng.uniform(0.5, 3)),
            float(rng.uniform(0, 2 * np.pi)),
        )
        ellipses = []
        n_ell = int(rng.integers(3, 7))
        for j in range(n_ell):
            level = float(rng.uniform(1.5, 6.0)) if j == 0 else float(_loguniform(rng, 0.01, 1.0))
            ellipses.append(_Ellipse(
                cx=float(rng.uniform(0, w_m)), cy=float(rng.uniform(0, h_m)),
                rx=float(rng.uniform(0.05, 0.25) * w_m), ry=float(rng.uniform(0.05, 0.25) * h_m),
                angle=float(rng.uniform(0, np.pi)), color=_tint(rng, level),
                edge=float(rng.uniform(0.7, 2.0)),
            ))
        strokes = []
        for _ in range(int(rng.integers(4, 11))):
            x0, x1 = rng.uniform(0, w_m, 2)
            y0, y1 = rng.uniform(0, h_m, 2)
            strokes.append(_Stroke(float(x0), float(y0), float(x1), float(y1),
                                   width=float(rng.uniform(0.6, 1.6)),
                                   color=_tint(rng, float(_loguniform(rng, 0.02, 0.6)))))
        motions = _sample_motions(rng, params.n_frames, params.max_drift, params.jitter)
        scene = SceneSource(h_m, w_m, motions, background, tuple(ellipses), tuple(strokes))
        clean = scene.clean
        if clean.min() > 0 and clean.max() / clean.min() >= min_range:
            return scene


def render_bracket(scene: SceneSource, p: DegradationParams,
                   rng: np.random.Generator) -> tuple[RawBracket, HdrImage]:
    """Render the degraded LDR frames and the exposure-normalized clean reference."""
    if len(scene.motions) < p.n_frames:
        raise ValueError(f"scene has {len(scene.motions)} motions for {p.n_frames} frames")
    frames = []
    for i, (ratio, k) in enumerate(zip(p.exposure_ratios, p.blur_kernel_sizes)):
        mdx, mdy = scene.motions[i]
        if k == 1:
            img = scene.render(mdx, mdy)
        else:
            drift = scene.motions[min(i + 1, len(scene.motions) - 1)] - scene.motions[max(i - 1, 0)]
            norm = float(np.hypot(*drift))
            ux, uy = (drift / norm) if norm > 1e-9 else (1.0, 0.0)
            taps = np.linspace(-(k - 1) / 2, (k - 1) / 2, k)
            img = np.mean([scene.render(mdx + t * ux, mdy + t * uy) for t in taps], axis=0)
        signal = img * ratio
        var = p.read_noise_sigma**2 + p.shot_noise_gain * signal
        noisy = signal + np.sqrt(var) * rng.standard_normal(signal.shape)
        frames.append(pack_array(np.clip(noisy, 0, p.saturation)))
    bracket = RawBracket(np.stack(frames), p.exposure_ratios)
    return bracket, HdrImage(pack_array(scene.clean))


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def train_count(n_scenes: int) -> int:
    return math.ceil(0.9 * n_scenes)


def make_dataset(n_scenes: int, dims: tuple[int, int], params: DegradationParams, seed: int,
                 out_dir) -> Path:
    """Write ``n_scenes`` brackets + ground truths and a manifest; returns the manifest path.

    ``dims`` is the packed (H, W). The manifest is written last, so a failed run never
    leaves one behind.
    """
    out_dir = Path(out_dir)
    h, w = dims
    scene_dir = out_dir / "scenes"
    try:
        scene_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {scene_dir}: {exc}") from exc
    n_train = train_count(n_scenes)
    rows = []
    for i in range(n_scenes):
        s = scene_seed(seed, i)
        rng = np.random.default_rng(s)
        scene = synth_scene(rng, 2 * h, 2 * w, params)
        bracket, gt = render_bracket(scene, params, rng)
        sid = f"scene_{i:04d}"
        bpath = scene_dir / f"{sid}.brk"
        gpath = scene_dir / f"{sid}_gt.brk"
        packed_motion = scene.motions / 2
        try:
            save_bracket(bpath, bracket, {
                "motions": ";".join(f"{float(dx)!r},{float(dy)!r}" for dx, dy in packed_motion),
                "seed": s,
            })
            save_image(gpath, gt)
        except OSError as exc:
            raise OSError(f"failed writing {bpath}: {exc}") from exc
        split = "train" if i < n_train else "val"
        rows.append(f"{sid}\t{bpath.relative_to(out_dir)}\t{gpath.relative_to(out_dir)}\t{split}\t{s}")

    header = [
        "# id\tbracket_path\tgt_path\tsplit\tseed",
        f"# dataset_seed={seed} dims={h}x{w}",
        "# params=" + json.dumps(params.to_dict(), sort_keys=True),
    ]
    manifest = out_dir / "manifest.tsv"
    tmp = manifest.with_name("manifest.tsv.tmp")
    tmp.write_text("\n".join(header + rows) + "\n")
    tmp.replace(manifest)
    return manifest


@dataclass(frozen=True)
class ManifestRow:
    id: str
    bracket_path: Path
    gt_path: Path
    split: str
    seed: int

    def motions(self) -> np.ndarray:
        return read_motions(self.bracket_path)


def read_motions(bracket_path) -> np.ndarray:
    """Stored global motions (N, 2) in packed pixels, from the bracket sidecar."""
    bracket_path = Path(bracket_path)
    meta_path = bracket_path.with_name(bracket_path.name + ".meta")
    if not meta_path.exists():
        raise FileNotFoundError(f"no stored motions for {bracket_path} (missing {meta_path.name})")
    meta = read_meta(meta_path)
    return np.array([[float(v) for v in pair.split(",")] for pair in meta["motions"].split(";")])


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}: bad manifest row {line!r}")
        sid, b, g, split, s = parts
        rows.append(ManifestRow(sid, path.parent / b, path.parent / g, split, int(s)))
    return rows
