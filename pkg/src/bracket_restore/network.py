"""Restoration network: shared feature extraction, flow-guided alignment
(deformable branch + spatial attention branch), unidirectional recurrent
aggregation, and reconstruction with a feature-level skip from the reference.

Tensors are batched: frames (B, N, 4, H, W), flows (B, N-1, 2, H, W) for
frames 1..N-1 relative to frame 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core import HdrImage, RawBracket, ShapeError
from .flow import base_grid, bilinear_sample, bracket_flows


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    n_extract_blocks: int = 2
    n_agg_blocks: int = 3
    n_recon_blocks: int = 3
    deformable_groups: int = 4
    kernel_size: int = 3
    negative_slope: float = 0.1
    use_ffam: bool = True
    use_efam: bool = True
    center_tap_only: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("channels", "n_extract_blocks", "n_agg_blocks", "n_recon_blocks", "deformable_groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.channels % self.deformable_groups:
            raise ConfigError(f"deformable_groups={self.deformable_groups} does not divide channels={self.channels}")
        if self.kernel_size != 3:
            raise ConfigError("only 3x3 kernels are supported")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def conv3(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1)


class ResidualBlock(nn.Module):
    """x + conv3(act(conv3(x)))"""

    def __init__(self, c, slope=0.1):
        super().__init__()
        self.conv1 = conv3(c, c)
        self.conv2 = conv3(c, c)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class EnhancedResidualBlock(nn.Module):
    """x + conv1x1(act(conv3(act(conv3(x)))))"""

    def __init__(self, c, slope=0.1):
        super().__init__()
        self.conv1 = conv3(c, c)
        self.conv2 = conv3(c, c)
        self.conv3 = nn.Conv2d(c, c, 1)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return x + self.conv3(self.act(self.conv2(self.act(self.conv1(x)))))


def block_stack(n, c, slope, enhanced):
    cls = EnhancedResidualBlock if enhanced else ResidualBlock
    return nn.Sequential(*[cls(c, slope) for _ in range(n)])


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv_in = conv3(4, cfg.channels)
        self.blocks = block_stack(cfg.n_extract_blocks, cfg.channels, cfg.negative_slope, enhanced=False)

    def forward(self, x):
        return self.blocks(self.conv_in(x))


# Logit giving a modulation gate of 1/9 per tap at initialization.
MASK_INIT_LOGIT = -math.log(8.0)


class FlowGuidedDeformAlign(nn.Module):
    """Modulated deformable 3x3 sampling around flow-displaced positions.

    Each tap k of group g samples the source feature at
    ``p + tap_k + flow(p) + residual_offset[g, k](p)`` (clamp-to-edge bilinear) and is
    scaled by a sigmoid gate. Residual offsets and gates come from a conv head over
    concat(warped source, reference, flow); the head's last layer starts at zero, and
    the sampling weights start as a per-channel identity, so at init the branch is the
    flow-warped mean over taps (plain backward warp when only the centre tap is used).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, g = cfg.channels, cfg.deformable_groups
        self.groups = g
        if cfg.center_tap_only:
            self.taps = [(0, 0)]
        else:
            self.taps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
        k = len(self.taps)
        self.head = nn.Sequential(
            conv3(2 * c + 2, c),
            nn.LeakyReLU(cfg.negative_slope),
            conv3(c, 3 * g * k),
        )
        self.weight = nn.Parameter(torch.zeros(c, c, k))
        self.bias = nn.Parameter(torch.zeros(c))

    def reset_alignment(self):
        k = len(self.taps)
        last = self.head[-1]
        with torch.no_grad():
            last.weight.zero_()
            last.bias.zero_()
            last.bias[2 * self.groups * k :] = MASK_INIT_LOGIT
            eye = torch.eye(self.weight.shape[0], dtype=self.weight.dtype)
            self.weight.copy_(eye.unsqueeze(-1).expand(-1, -1, k) * (9.0 / k))
            self.bias.zero_()

    def forward(self, feat, warped, ref, flow):
        b, c, h, w = feat.shape
        g, k = self.groups, len(self.taps)
        head = self.head(torch.cat([warped, ref, flow], 1))
        offsets = head[:, : 2 * g * k].reshape(b, g, k, 2, h, w)
        gates = torch.sigmoid(head[:, 2 * g * k :]).reshape(b, g, 1, k, h, w)

        gx, gy = base_grid(h, w, feat)
        fx = flow[:, 0].unsqueeze(1)
        fy = flow[:, 1].unsqueeze(1)
        grouped = feat.reshape(b * g, c // g, h, w)
        samples = []
        for t, (dy, dx) in enumerate(self.taps):
            sx = ((gx + dx) + fx) + offsets[:, :, t, 0]
            sy = ((gy + dy) + fy) + offsets[:, :, t, 1]
            s = bilinear_sample(grouped, sx.reshape(b * g, h, w), sy.reshape(b * g, h, w))
            samples.append(s.reshape(b, g, c // g, h, w))
        # (B, G, C/G, K, H, W) -> (B, C, K, H, W), modulated per group and tap
        stacked = torch.stack(samples, 3) * gates
        stacked = stacked.reshape(b, c * k, h, w)
        return F.conv2d(stacked, self.weight.reshape(c, c * k, 1, 1), self.bias)


class SpatialAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv = conv3(2 * cfg.channels, cfg.channels)

    def attention(self, warped, ref):
        return torch.sigmoid(self.conv(torch.cat([warped, ref], 1)))

    def forward(self, warped, ref):
        return warped * self.attention(warped, ref)


class RecurrentAggregator(nn.Module):
    """h_1 = x_1; h_i = blocks(fuse(concat(h_{i-1}, x_i))) in frame order."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fuse = conv3(2 * cfg.channels, cfg.channels)
        self.blocks = block_stack(cfg.n_agg_blocks, cfg.channels, cfg.negative_slope, enhanced=cfg.use_efam)

    def forward(self, aligned: list[torch.Tensor]) -> torch.Tensor:
        if not aligned:
            raise ShapeError("aggregation needs at least one feature map")
        h = aligned[0]
        for x in aligned[1:]:
            h = self.blocks(self.fuse(torch.cat([h, x], 1)))
        return h


class Reconstruction(nn.Module):
    """I = proj(tail(blocks(AF)) + F_ref)"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = block_stack(cfg.n_recon_blocks, cfg.channels, cfg.negative_slope, enhanced=False)
        self.tail = conv3(cfg.channels, cfg.channels)
        self.proj = conv3(cfg.channels, 4)

    def forward(self, agg, ref_feat):
        return self.proj(self.tail(self.blocks(agg)) + ref_feat)


def _init_residual_tails(module: nn.Module, scale: float = 0.1):
    for m in module.modules():
        last = None
        if isinstance(m, ResidualBlock):
            last = m.conv2
        elif isinstance(m, EnhancedResidualBlock):
            last = m.conv3
        if last is not None:
            with torch.no_grad():
                last.weight.mul_(scale)
                last.bias.zero_()


class BracketRestorer(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.extract = FeatureExtractor(cfg)
            self.fda = FlowGuidedDeformAlign(cfg)
            self.sfa = SpatialAttention(cfg)
            self.aggregate = RecurrentAggregator(cfg)
            self.reconstruct = Reconstruction(cfg)
        self.fda.reset_alignment()
        _init_residual_tails(self)

    def extract_features(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, N, 4, H, W) -> (B, N, C, H, W), same weights for every frame."""
        b, n = frames.shape[:2]
        feats = self.extract(frames.flatten(0, 1))
        return feats.reshape(b, n, *feats.shape[1:])

    def align(self, feats: torch.Tensor, flows: torch.Tensor):
        """Return (aligned, warped) features, both (B, N, C, H, W).

        Frame 0 goes through the same path with zero flow, so its warped feature is itself.
        """
        from .flow import backward_warp

        b, n, c, h, w = feats.shape
        zero = flows.new_zeros(b, 1, 2, h, w)
        all_flows = torch.cat([zero, flows], 1).flatten(0, 1)
        src = feats.flatten(0, 1)
        warped = torch.cat([feats[:, :1], backward_warp(feats[:, 1:].flatten(0, 1),
                                                        flows.flatten(0, 1)).reshape(b, n - 1, c, h, w)], 1)
        if not self.config.use_ffam:
            return warped, warped
        ref = feats[:, :1].expand(-1, n, -1, -1, -1).flatten(0, 1)
        wflat = warped.flatten(0, 1)
        fused = self.fda(src, wflat, ref, all_flows) + self.sfa(wflat, ref)
        return fused.reshape(b, n, c, h, w), warped

    def forward(self, frames: torch.Tensor, flows: torch.Tensor) -> torch.Tensor:
        n = frames.shape[1]
        if flows.shape[1] != n - 1 or flows.shape[-2:] != frames.shape[-2:]:
            raise ShapeError(f"flows {tuple(flows.shape)} do not match frames {tuple(frames.shape)}")
        feats = self.extract_features(frames)
        aligned, _ = self.align(feats, flows)
        agg = self.aggregate(list(aligned.unbind(1)))
        return self.reconstruct(agg, feats[:, 0])

    def receptive_radius(self, n_frames: int) -> int:
        """Radius in pixels of the conv receptive field, ignoring flow and learned offsets."""
        cfg = self.config
        r = 1 + 2 * cfg.n_extract_blocks
        if cfg.use_ffam:
            r += 3  # offset head (2 convs) + deformable tap
        r += (n_frames - 1) * (1 + 2 * cfg.n_agg_blocks)
        r += 2 * cfg.n_recon_blocks + 2
        return r


def param_groups(model: BracketRestorer) -> dict[str, list[tuple[str, nn.Parameter]]]:
    """Parameters keyed by top-level submodule (extract, fda, sfa, aggregate, reconstruct)."""
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        groups.setdefault(name.split(".")[0], []).append((name, p))
    return groups


def frames_tensor(bracket: RawBracket, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    frames = torch.tensor(bracket.frames, dtype=dtype).unsqueeze(0)
    exposures = torch.as_tensor(bracket.exposures, dtype=dtype).unsqueeze(0)
    return frames, exposures


@torch.no_grad()
def restore(bracket: RawBracket, model: BracketRestorer, estimator, motions=None) -> HdrImage:
    """Full pipeline on one bracket; negative outputs are clipped to 0 for the HDR type."""
    dtype = next(model.parameters()).dtype
    frames, exposures = frames_tensor(bracket, dtype)
    flows = bracket_flows(estimator, frames, exposures,
                          None if motions is None else np.asarray(motions)[None])
    out = model(frames, flows)[0]
    return HdrImage(out.clamp(min=0).to(torch.float32).numpy())


def tile_halo(model: BracketRestorer, n_frames: int, flows: torch.Tensor, margin: int = 4) -> int:
    """Context needed around a tile so its core matches the untiled result."""
    reach = math.ceil(float(flows.abs().max())) if flows.numel() else 0
    return model.receptive_radius(n_frames) + reach + margin


@torch.no_grad()
def predict_tiled(model: BracketRestorer, frames: torch.Tensor, flows: torch.Tensor, tile: int,
                  halo: int | None = None) -> torch.Tensor:
    """Run ``model`` on tile cores of size ``tile`` with ``halo`` context on each side.

    Flows are passed in for the whole image so every tile sees the same motion field.
    """
    if tile < 1:
        raise ValueError("tile must be >= 1")
    b, n, _, h, w = frames.shape
    if halo is None:
        halo = tile_halo(model, n, flows)
    out = frames.new_zeros(b, 4, h, w)
    for y0 in range(0, h, tile):
        for x0 in range(0, w, tile):
            y1, x1 = min(y0 + tile, h), min(x0 + tile, w)
            ya, xa = max(y0 - halo, 0), max(x0 - halo, 0)
            yb, xb = min(y1 + halo, h), min(x1 + halo, w)
            # flows are relative offsets, so cropping them keeps them valid
            part = model(frames[..., ya:yb, xa:xb], flows[..., ya:yb, xa:xb])
            out[..., y0:y1, x0:x1] = part[..., y0 - ya:y1 - ya, x0 - xa:x1 - xa]
    return out


@torch.no_grad()
def restore_tiled(bracket: RawBracket, model: BracketRestorer, estimator, tile: int,
                  motions=None) -> HdrImage:
    dtype = next(model.parameters()).dtype
    frames, exposures = frames_tensor(bracket, dtype)
    flows = bracket_flows(estimator, frames, exposures,
                          None if motions is None else np.asarray(motions)[None])
    out = predict_tiled(model, frames, flows, tile)[0]
    return HdrImage(out.clamp(min=0).to(torch.float32).numpy())
