"""Optical flow between bracket frames and bilinear backward warping.

Flow convention: channel 0 is the horizontal and channel 1 the vertical displacement,
in packed-resolution pixels. Position p of the reference samples position p + f(p) of
the source, so ``backward_warp(src, f)`` is aligned with the reference.
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import PackedRaw, ShapeError

GAMMA = 2.2


def bilinear_sample(x: torch.Tensor, sx: torch.Tensor, sy: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` (B, C, H, W) at real coordinates ``sx, sy`` (B, H', W').

    Coordinates are clamped to the image, so out-of-range samples repeat the border.
    At integer coordinates the result is exact.
    """
    b, c, h, w = x.shape
    sx = sx.clamp(0, w - 1)
    sy = sy.clamp(0, h - 1)
    x0 = sx.detach().floor()
    y0 = sy.detach().floor()
    wx = sx - x0
    wy = sy - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = x.reshape(b, c, h * w)
    out_hw = sx.shape[1:]

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, -1).expand(b, c, -1)
        return flat.gather(2, idx).reshape(b, c, *out_hw)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def base_grid(h: int, w: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.arange(h, dtype=like.dtype, device=like.device)
    xs = torch.arange(w, dtype=like.dtype, device=like.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return gx, gy


def backward_warp(x, flow):
    """Warp ``x`` by ``flow``: out(p) = x(p + flow(p)), bilinear, clamp-to-edge.

    Accepts tensors (B, C, H, W) with flow (B, 2, H, W), unbatched (C, H, W) with
    (2, H, W), or numpy arrays / PackedRaw of the unbatched form.
    """
    if isinstance(x, PackedRaw):
        return PackedRaw(backward_warp(x.data, flow))
    if isinstance(x, np.ndarray):
        out = backward_warp(torch.from_numpy(np.ascontiguousarray(x)),
                            torch.as_tensor(np.asarray(flow), dtype=torch.from_numpy(x[:0]).dtype))
        return out.numpy()
    unbatched = x.dim() == 3
    if unbatched:
        x, flow = x.unsqueeze(0), flow.unsqueeze(0)
    if flow.shape[1] != 2 or flow.shape[-2:] != x.shape[-2:] or flow.shape[0] != x.shape[0]:
        raise ShapeError(f"flow {tuple(flow.shape)} does not match image {tuple(x.shape)}")
    gx, gy = base_grid(x.shape[2], x.shape[3], flow)
    out = bilinear_sample(x, gx + flow[:, 0], gy + flow[:, 1])
    return out[0] if unbatched else out


def exposure_normalize(x, ratio: float):
    """Bring a frame to the reference brightness and gamma-compress it (flow input only)."""
    if ratio <= 0:
        raise ValueError(f"exposure ratio must be positive, got {ratio}")
    if isinstance(x, PackedRaw):
        return PackedRaw(exposure_normalize(x.data, ratio))
    if isinstance(x, torch.Tensor):
        return (x / ratio).clamp(0, 1) ** (1 / GAMMA)
    return np.clip(np.asarray(x) / ratio, 0, 1) ** (1 / GAMMA)


def luminance_proxy(x: torch.Tensor) -> torch.Tensor:
    """Mean of the 4 packed channels, keeping a singleton channel axis."""
    return x.mean(dim=-3, keepdim=True)


class FlowEstimator(Protocol):
    def __call__(self, src: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        """src, ref: (B, 1, H, W) exposure-normalized luminance; returns (B, 2, H, W)."""


class ZeroFlow:
    def __call__(self, src, ref):
        b, _, h, w = src.shape
        return src.new_zeros(b, 2, h, w)


class OracleFlow:
    """Constant flow from known global motions (one (dx, dy) per batch element)."""

    def __init__(self, motions):
        self.motions = torch.as_tensor(np.asarray(motions, dtype=np.float64))

    def __call__(self, src, ref):
        b, _, h, w = src.shape
        m = self.motions.to(src.dtype).reshape(b, 2, 1, 1)
        return m.expand(b, 2, h, w).clone()


class PyramidFlow:
    """Coarse-to-fine Lucas-Kanade with local least squares.

    Each level runs ``iterations`` warp-and-solve steps; the 2x2 normal equations are
    summed over a ``window`` x ``window`` box and regularized by ``eps``. After each
    step the flow is box-smoothed ``smooth`` times, weighted by the system determinant.
    """

    def __init__(self, levels: int = 3, iterations: int = 10, window: int = 5, eps: float = 1e-2,
                 smooth: int = 3):
        self.levels = levels
        self.iterations = iterations
        self.window = window
        self.eps = eps
        self.smooth = smooth

    def _box(self, t):
        k = self.window
        return F.avg_pool2d(F.pad(t, (k // 2,) * 4, mode="replicate"), k, stride=1)

    @staticmethod
    def _grad(t):
        p = F.pad(t, (1, 1, 1, 1), mode="replicate")
        gx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / 2
        gy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / 2
        return gx, gy

    @torch.no_grad()
    def __call__(self, src, ref):
        if src.shape != ref.shape:
            raise ShapeError(f"src {tuple(src.shape)} vs ref {tuple(ref.shape)}")
        pyr = [(src, ref)]
        for _ in range(self.levels - 1):
            s, r = pyr[-1]
            if min(s.shape[-2:]) < 8:
                break
            pyr.append((F.avg_pool2d(s, 2, ceil_mode=True), F.avg_pool2d(r, 2, ceil_mode=True)))

        flow = None
        for s, r in reversed(pyr):
            b, _, h, w = s.shape
            if flow is None:
                flow = s.new_zeros(b, 2, h, w)
            else:
                sy, sx = h / flow.shape[2], w / flow.shape[3]
                flow = F.interpolate(flow, size=(h, w), mode="bilinear", align_corners=False)
                flow = torch.stack([flow[:, 0] * sx, flow[:, 1] * sy], 1)
            rgx, rgy = self._grad(r)
            for _ in range(self.iterations):
                warped = backward_warp(s, flow)
                wgx, wgy = self._grad(warped)
                ix, iy = (wgx + rgx) / 2, (wgy + rgy) / 2
                it = warped - r
                a = self._box(ix * ix) + self.eps
                bb = self._box(ix * iy)
                c = self._box(iy * iy) + self.eps
                px = self._box(ix * it)
                py = self._box(iy * it)
                det = a * c - bb * bb
                dx = -(c * px - bb * py) / det
                dy = -(a * py - bb * px) / det
                flow = flow + torch.cat([dx, dy], 1)
                # spread well-conditioned estimates into textureless areas
                for _ in range(self.smooth):
                    flow = self._box(det * flow) / self._box(det)
        return flow


def estimate_flow(est: FlowEstimator, src, ref):
    """Flow from ``ref`` to ``src`` on exposure-normalized inputs.

    Accepts PackedRaw / (4, H, W) arrays or batched (B, 4, H, W) tensors; the luminance
    proxy is taken here.
    """
    if isinstance(src, PackedRaw):
        src, ref = src.data, ref.data
    unbatched = not isinstance(src, torch.Tensor) or src.dim() == 3
    s = torch.as_tensor(np.asarray(src) if not isinstance(src, torch.Tensor) else src)
    r = torch.as_tensor(np.asarray(ref) if not isinstance(ref, torch.Tensor) else ref)
    if s.shape != r.shape:
        raise ShapeError(f"src {tuple(s.shape)} vs ref {tuple(r.shape)}")
    if unbatched:
        s, r = s.unsqueeze(0), r.unsqueeze(0)
    f = est(luminance_proxy(s), luminance_proxy(r))
    return f[0] if unbatched else f


def bracket_flows(est: FlowEstimator, frames: torch.Tensor, exposures: torch.Tensor,
                  oracle_motions: Sequence | None = None) -> torch.Tensor:
    """Flows for every non-reference frame of a batch.

    frames: (B, N, 4, H, W); exposures: (B, N). Returns (B, N-1, 2, H, W).
    ``oracle_motions`` (B, N, 2), when given, replaces ``est`` with OracleFlow per frame.
    """
    b, n = frames.shape[:2]
    ref = exposure_normalize(frames[:, 0], 1.0)
    out = []
    for i in range(1, n):
        src = exposure_normalize(frames[:, i] / exposures[:, i].reshape(b, 1, 1, 1), 1.0)
        e = est if oracle_motions is None else OracleFlow(np.asarray(oracle_motions)[:, i])
        with torch.no_grad():
            out.append(estimate_flow(e, src, ref))
    return torch.stack(out, 1)
