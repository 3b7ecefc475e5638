"""Report figures (matplotlib, file output only) and plain PGM/PPM previews."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import unpack_array  # noqa: E402
from .objective import mu_tonemap  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# display colors for R, G, B mosaic sites
SITE_RGB = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


# ---------------------------------------------------------------- PGM / PPM

def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5, maxval 255."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 array")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6, maxval 255."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("PPM needs an (H, W, 3) uint8 array")
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file written by this module."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    if int(maxval) != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM header")
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(body, np.uint8).reshape(shape)


def tonemap_preview(packed: np.ndarray) -> np.ndarray:
    """Channel-average of the tonemapped packed image as uint8 (H, W)."""
    return to_uint8(np.mean(mu_tonemap(packed), axis=0))


def site_overlay(mosaic: np.ndarray, colors: np.ndarray, gain: float = 1.0) -> np.ndarray:
    """Each site drawn in the color of its filter; ``colors`` is the 0/1/2 index mosaic."""
    v = np.clip(np.asarray(mosaic, np.float64) * gain, 0, 1)[..., None]
    return to_uint8(v * SITE_RGB[np.asarray(colors, int)])


# ------------------------------------------------------------------ figures

def plot_loss_curve(history, path, smooth: int = 50, val: list[tuple[int, float]] | None = None) -> Path:
    """history rows are (step, lr, loss, grad_norm)."""
    h = np.asarray(history, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.plot(h[:, 0], h[:, 2], lw=0.5, alpha=0.4, color="0.4", label="loss")
        if len(h) >= smooth:
            k = np.ones(smooth) / smooth
            ax.plot(h[smooth - 1:, 0], np.convolve(h[:, 2], k, mode="valid"), color="C0",
                    label=f"{smooth}-step mean")
        ax.set_xlabel("step")
        ax.set_ylabel("tonemapped L1")
        ax.set_yscale("log")
        if val:
            ax2 = ax.twinx()
            vs, vp = zip(*val)
            ax2.plot(vs, vp, "o-", ms=3, color="C3", label="val PSNR")
            ax2.set_ylabel("val PSNR (dB)")
        ax.legend(loc="upper right")
        return _save(fig, path)


def plot_ablation(table: list[dict], path) -> Path:
    names = [r["Variant"] for r in table]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        a1.bar(x, [r["PSNR"] for r in table], color="C0")
        a1.set_ylabel("PSNR (dB)")
        a2.bar(x, [r["SSIM"] for r in table], color="C1")
        a2.set_ylabel("SSIM")
        for a in (a1, a2):
            a.set_xticks(x, names)
        return _save(fig, path)


def plot_eval(rows: list[dict], path) -> Path:
    b = np.array([r["baseline_psnr"] for r in rows])
    m = np.array([r["psnr"] for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        ax.scatter(b, m, s=12)
        lo, hi = min(b.min(), m.min()) - 1, max(b.max(), m.max()) + 1
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.7)
        ax.set_xlabel("passthrough PSNR (dB)")
        ax.set_ylabel("model PSNR (dB)")
        return _save(fig, path)


def plot_augment_preview(panels: list[tuple[str, np.ndarray]], path) -> Path:
    """Row of labeled RGB uint8 images."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4))
        for ax, (title, img) in zip(np.atleast_1d(axes), panels):
            ax.imshow(img, interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
        return _save(fig, path)


def packed_to_overlay(packed: np.ndarray, colors: np.ndarray, gain: float = 1.0) -> np.ndarray:
    return site_overlay(unpack_array(packed), colors, gain)
