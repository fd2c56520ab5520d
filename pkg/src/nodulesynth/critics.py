"""Local and global Wasserstein critics with auxiliary domain-class heads.

Each critic shares one convolutional trunk feeding two independent linear
heads: an unbounded scalar realness score and 3-way domain logits over
{fake, benign, malignant}. No batch-coupled normalization anywhere; the
per-sample gradient penalty requires sample-independent forward passes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from nodulesynth import checkpoint


@dataclass
class CriticOutput:
    wscore: torch.Tensor  # (B,) unbounded realness scores
    class_logits: torch.Tensor  # (B, 3) domain logits


@dataclass
class CriticConfig:
    base_channels: int = 32
    depth: int = 3
    input_kind: str = "global"  # "local" sees a fixed-size crop of the masked area
    local_crop_margin: int = 4
    local_shape: tuple[int, int, int] = (32, 32, 16)
    max_channels: int = 256

    def __post_init__(self) -> None:
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError(f"invalid critic config {self}")
        if self.input_kind not in ("local", "global"):
            raise ValueError(f"input_kind must be 'local' or 'global', got {self.input_kind!r}")


def crop_local(
    patch: torch.Tensor | np.ndarray,
    mask: torch.Tensor | np.ndarray,
    margin: int = 4,
    out_shape: tuple[int, int, int] = (32, 32, 16),
) -> torch.Tensor | np.ndarray:
    """Fixed-size crop around the masked region.

    Takes the axis-aligned bounding box of the mask, expands it by
    ``margin`` voxels, clips to the patch bounds, and trilinearly resamples
    to ``out_shape``. Differentiable w.r.t. the patch values.
    """
    was_numpy = isinstance(patch, np.ndarray)
    t = torch.as_tensor(np.ascontiguousarray(patch)) if was_numpy else patch
    m = torch.as_tensor(np.ascontiguousarray(mask)) if isinstance(mask, np.ndarray) else mask
    if t.shape != m.shape or t.dim() != 3:
        raise ValueError(f"patch {tuple(t.shape)} and mask {tuple(m.shape)} must be equal 3D shapes")
    idx = (m > 0).nonzero()
    if idx.numel() == 0:
        raise ValueError("cannot crop around an empty mask")
    lo = (idx.min(dim=0).values - margin).clamp_min(0)
    hi = torch.minimum(
        idx.max(dim=0).values + margin, torch.tensor(t.shape, device=idx.device) - 1
    )
    crop = t[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    if tuple(crop.shape) != tuple(out_shape):
        crop = F.interpolate(
            crop[None, None].float() if was_numpy else crop[None, None],
            size=tuple(out_shape),
            mode="trilinear",
            align_corners=True,
        )[0, 0]
    return crop.numpy() if was_numpy else crop


def mask_bounding_box(mask: np.ndarray, margin: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(lo, hi) inclusive index bounds of the mask, expanded and clipped."""
    idx = np.argwhere(mask > 0)
    if idx.size == 0:
        raise ValueError("cannot bound an empty mask")
    lo = np.maximum(idx.min(axis=0) - margin, 0)
    hi = np.minimum(idx.max(axis=0) + margin, np.asarray(mask.shape) - 1)
    return lo, hi


class Critic(nn.Module):
    """Shared trunk with independent Wasserstein and classification heads."""

    def __init__(self, config: CriticConfig):
        super().__init__()
        self.config = config
        chs = [min(config.base_channels * 2**l, config.max_channels) for l in range(config.depth + 1)]
        layers = [nn.Conv3d(2, chs[0], 3, stride=1, padding=1), nn.ELU()]
        for l in range(config.depth):
            layers += [nn.Conv3d(chs[l], chs[l + 1], 3, stride=2, padding=1), nn.ELU()]
        self.trunk = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.wscore_head = nn.Linear(chs[-1], 1)
        self.class_head = nn.Linear(chs[-1], 3)

    def forward(self, patch: torch.Tensor, label_map: torch.Tensor) -> CriticOutput:
        if patch.shape != label_map.shape:
            raise ValueError(
                f"shape mismatch: patch {tuple(patch.shape)}, label_map {tuple(label_map.shape)}"
            )
        feats = self.pool(self.trunk(torch.cat([patch, label_map], dim=1))).flatten(1)
        return CriticOutput(
            wscore=self.wscore_head(feats).squeeze(1),
            class_logits=self.class_head(feats),
        )


def build_critic(config: CriticConfig, seed: int) -> Critic:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Critic(config)


def save_critic(net: Critic, out_dir: str | Path) -> None:
    checkpoint.save_network(net, out_dir, asdict(net.config))


def load_critic(ckpt_dir: str | Path) -> Critic:
    raw = checkpoint.read_config(ckpt_dir)
    raw["local_shape"] = tuple(raw.get("local_shape", (32, 32, 16)))
    net = Critic(CriticConfig(**raw))
    checkpoint.load_network(net, ckpt_dir)
    return net
