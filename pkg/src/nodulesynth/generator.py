"""Coarse-to-fine 3D in-painting generator.

Two stacked hourglass networks: the coarse stage maps (masked patch, label
map) to a rough reconstruction; the refinement stage consumes the coarse
output together with the original context and sharpens the masked region,
optionally borrowing background textures through a contextual-attention
branch at the bottleneck. Mask voxels are 1 where content must be
in-painted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from nodulesynth import checkpoint

_NORM_EPS = 1e-6  # lower clamp on feature-patch norms in cosine similarity


@dataclass
class GeneratorConfig:
    base_channels: int = 32
    depth: int = 3
    attention_patch_size: int = 3
    attention_softmax_scale: float = 10.0
    use_attention: bool = True
    max_channels: int = 128

    def __post_init__(self) -> None:
        if self.base_channels < 1 or self.depth < 1 or self.attention_patch_size < 1:
            raise ValueError(f"invalid generator config {self}")

    def channels(self) -> list[int]:
        return [min(self.base_channels * 2**l, self.max_channels) for l in range(self.depth + 1)]


@dataclass
class GeneratorOutput:
    """Coarse and refined reconstructions plus the context-preserving composite."""

    coarse: torch.Tensor
    refined: torch.Tensor
    composite: torch.Tensor


def contextual_attention(
    features: torch.Tensor,
    mask: torch.Tensor,
    patch_size: int,
    softmax_scale: float,
) -> torch.Tensor:
    """Reconstruct foreground features from attention over background patches.

    For each foreground location (``mask == 1``) the cosine similarity
    between its ``patch_size``-cube feature neighborhood (zero padded) and
    every background neighborhood is computed; softmax over the background
    (scaled by ``softmax_scale``) weights a combination of the background
    locations' center feature vectors. Background locations pass through
    unchanged.

    ``features`` is (C, X, Y, Z); ``mask`` is a binary (X, Y, Z) array on the
    same grid. Raises ValueError when no background exists or the patch size
    exceeds the grid.
    """
    if features.dim() != 4:
        raise ValueError(f"features must be (C, X, Y, Z), got {tuple(features.shape)}")
    grid = features.shape[1:]
    if tuple(mask.shape) != tuple(grid):
        raise ValueError(f"mask shape {tuple(mask.shape)} != feature grid {tuple(grid)}")
    if any(patch_size > g for g in grid):
        raise ValueError(f"patch_size {patch_size} exceeds feature grid {tuple(grid)}")

    flat_mask = mask.reshape(-1) > 0
    bg = ~flat_mask
    if not bool(bg.any()):
        raise ValueError("no background (mask == 0) locations available")
    if not bool(flat_mask.any()):
        return features

    c = features.shape[0]
    pad = patch_size // 2
    padded = F.pad(features.unsqueeze(0), (pad, pad, pad, pad, pad, pad))
    patches = (
        padded.unfold(2, patch_size, 1).unfold(3, patch_size, 1).unfold(4, patch_size, 1)
    )  # (1, C, X, Y, Z, p, p, p)
    vecs = patches.permute(0, 2, 3, 4, 1, 5, 6, 7).reshape(-1, c * patch_size**3)
    normed = vecs / vecs.norm(dim=1, keepdim=True).clamp_min(_NORM_EPS)

    centers = features.reshape(c, -1).transpose(0, 1)  # (N, C)
    sim = normed[flat_mask] @ normed[bg].transpose(0, 1)
    weights = torch.softmax(softmax_scale * sim, dim=1)
    filled = weights @ centers[bg]

    out = centers.clone()
    out[flat_mask] = filled.to(out.dtype)
    return out.transpose(0, 1).reshape(features.shape)


def _conv(cin: int, cout: int, stride: int = 1, dilation: int = 1, kernel: int = 3) -> nn.Conv3d:
    pad = dilation * (kernel - 1) // 2
    return nn.Conv3d(cin, cout, kernel, stride=stride, padding=pad, dilation=dilation)


class Hourglass(nn.Module):
    """Strided-conv encoder, dilated bottleneck, interpolate+conv decoder
    with skip connections, and an optional contextual-attention branch."""

    def __init__(self, in_channels: int, config: GeneratorConfig, with_attention: bool):
        super().__init__()
        self.config = config
        self.with_attention = with_attention and config.use_attention
        chs = config.channels()
        self.stem = _conv(in_channels, chs[0])
        self.down = nn.ModuleList(_conv(chs[l], chs[l + 1], stride=2) for l in range(config.depth))
        self.dilated1 = _conv(chs[-1], chs[-1], dilation=2)
        self.dilated2 = _conv(chs[-1], chs[-1], dilation=4)
        if self.with_attention:
            self.attn_pre = _conv(chs[-1], chs[-1])
            self.attn_post = _conv(chs[-1], chs[-1])
            self.branch_fuse = _conv(2 * chs[-1], chs[-1], kernel=1)
        self.up = nn.ModuleList(_conv(chs[l + 1], chs[l]) for l in range(config.depth))
        self.skip_fuse = nn.ModuleList(_conv(2 * chs[l], chs[l]) for l in range(config.depth))
        self.head = _conv(chs[0], 1)

    def _check_shape(self, x: torch.Tensor) -> None:
        factor = 2**self.config.depth
        if any(int(s) % factor for s in x.shape[2:]):
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by 2^depth = {factor}"
            )

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        self._check_shape(x)
        skips = [F.elu(self.stem(x))]
        for down in self.down:
            skips.append(F.elu(down(skips[-1])))
        h = F.elu(self.dilated1(skips[-1]))
        h = F.elu(self.dilated2(h))
        if self.with_attention:
            a = F.elu(self.attn_pre(skips[-1]))
            a = self._attend(a, mask)
            a = F.elu(self.attn_post(a))
            h = F.elu(self.branch_fuse(torch.cat([h, a], dim=1)))
        for level in reversed(range(self.config.depth)):
            h = F.interpolate(h, scale_factor=2, mode="trilinear", align_corners=True)
            h = F.elu(self.up[level](h))
            h = F.elu(self.skip_fuse[level](torch.cat([h, skips[level]], dim=1)))
        return torch.tanh(self.head(h))

    def _attend(self, feats: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        if mask is None:
            return feats
        factor = 2**self.config.depth
        # A bottleneck cell is foreground if any covered voxel is masked.
        mask_ds = F.max_pool3d(mask.to(feats.dtype), kernel_size=factor, stride=factor)
        patch_size = min(self.config.attention_patch_size, *feats.shape[2:])
        if patch_size % 2 == 0:
            patch_size = max(patch_size - 1, 1)  # keep neighborhoods centered
        out = []
        for b in range(feats.shape[0]):
            m = mask_ds[b, 0] > 0
            if bool(m.all()) or not bool(m.any()):
                out.append(feats[b])  # no background to borrow from, or nothing to fill
                continue
            out.append(
                contextual_attention(
                    feats[b], m, patch_size, self.config.attention_softmax_scale
                )
            )
        return torch.stack(out, dim=0)


class CoarseGenerator(Hourglass):
    """First stage: (masked patch, label map) -> rough reconstruction."""

    def __init__(self, config: GeneratorConfig):
        super().__init__(in_channels=2, config=config, with_attention=False)

    def forward(self, masked: torch.Tensor, label_map: torch.Tensor) -> torch.Tensor:
        if masked.shape != label_map.shape:
            raise ValueError(
                f"shape mismatch: masked {tuple(masked.shape)}, label_map {tuple(label_map.shape)}"
            )
        return super().forward(torch.cat([masked, label_map], dim=1))


class RefineGenerator(Hourglass):
    """Second stage: (coarse, masked patch, mask, label map) -> refined patch."""

    def __init__(self, config: GeneratorConfig):
        super().__init__(in_channels=4, config=config, with_attention=True)

    def forward(
        self,
        coarse: torch.Tensor,
        masked: torch.Tensor,
        mask: torch.Tensor,
        label_map: torch.Tensor,
    ) -> torch.Tensor:
        shapes = {tuple(t.shape) for t in (coarse, masked, mask, label_map)}
        if len(shapes) != 1:
            raise ValueError(f"refine inputs must share one shape, got {shapes}")
        x = torch.cat([coarse, masked, mask, label_map], dim=1)
        return Hourglass.forward(self, x, mask=mask)


class InpaintGenerator(nn.Module):
    """The stacked generator G = G2(G1(.)) with context-preserving compositing."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.coarse = CoarseGenerator(config)
        self.refine = RefineGenerator(config)

    def generate(
        self, masked: torch.Tensor, mask: torch.Tensor, label_map: torch.Tensor
    ) -> GeneratorOutput:
        """Run both stages; the composite keeps the context bit-exactly."""
        coarse = self.coarse(masked, label_map)
        refined = self.refine(coarse, masked, mask, label_map)
        mask = mask.to(refined.dtype)
        composite = mask * refined + (1.0 - mask) * masked
        return GeneratorOutput(coarse=coarse, refined=refined, composite=composite)

    forward = generate


def build_generator(config: GeneratorConfig, seed: int) -> InpaintGenerator:
    """Deterministically initialized generator for a given seed."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return InpaintGenerator(config)


def save_generator(net: InpaintGenerator, out_dir: str | Path) -> None:
    checkpoint.save_network(net, out_dir, asdict(net.config))


def load_generator(ckpt_dir: str | Path) -> InpaintGenerator:
    config = GeneratorConfig(**checkpoint.read_config(ckpt_dir))
    net = InpaintGenerator(config)
    checkpoint.load_network(net, ckpt_dir)
    return net
