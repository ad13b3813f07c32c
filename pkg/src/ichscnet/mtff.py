"""Multi-task feature fusion: group aggregation bridges chained from the deepest stage to the finest."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import N_SCALES

DILATIONS = (1, 3, 5, 7)


class GroupAggregationBridge(nn.Module):
    def __init__(self, image_channels: int, lower_channels: int, out_channels: int = 32, group_width: int | None = None):
        super().__init__()
        for name, c in (("image_feat", image_channels), ("lower_feat", lower_channels)):
            if c % 4:
                raise ValueError(f"{name} has {c} channels, not divisible by 4")
        self.group_count = 4
        self.image_channels = image_channels
        self.lower_channels = lower_channels
        group_in = image_channels // 4 + 1 + lower_channels // 4
        group_out = group_width or max(out_channels // 4, 1)
        self.dilated_convs = nn.ModuleList(
            nn.Conv2d(group_in, group_out, 3, padding=d, dilation=d) for d in DILATIONS
        )
        self.fuse_conv = nn.Conv2d(4 * group_out, out_channels, 1)

    def groups(self, image_feat, valid_mask, lower_feat):
        """Pre-fusion concatenation of the four dilated group outputs."""
        if image_feat.shape[1] % 4 or lower_feat.shape[1] % 4:
            raise ValueError(
                f"channel counts ({image_feat.shape[1]}, {lower_feat.shape[1]}) must be divisible by 4"
            )
        if not (image_feat.shape[-2:] == valid_mask.shape[-2:] == lower_feat.shape[-2:]):
            raise ValueError("GAB inputs must share one spatial size")
        img_chunks = image_feat.chunk(4, dim=1)
        low_chunks = lower_feat.chunk(4, dim=1)
        outs = [
            conv(torch.cat([img_chunks[g], valid_mask, low_chunks[g]], dim=1))
            for g, conv in enumerate(self.dilated_convs)
        ]
        return torch.cat(outs, dim=1)

    def forward(self, image_feat, valid_mask, lower_feat):
        return F.gelu(self.fuse_conv(F.gelu(self.groups(image_feat, valid_mask, lower_feat))))


def gab_forward(gab: GroupAggregationBridge, image_feat, valid_mask, lower_feat=None, constant=None):
    if lower_feat is None:
        if constant is None:
            raise ValueError("the deepest stage needs a learned constant in place of lower_feat")
        lower_feat = constant.expand(image_feat.shape[0], -1, -1, -1)
    return gab(image_feat, valid_mask, lower_feat)


@dataclass
class StageOutputs:
    fused: list[torch.Tensor]  # per stage, (B, C_F, R, R)
    stage_logits: list[torch.Tensor]  # per stage, (B, 1, R, R)
    S: torch.Tensor  # (B, 1, H, W) probabilities
    S_low: torch.Tensor  # (B, 1, R, R) probabilities, pre-upsampling
    F: torch.Tensor  # (B, C_F, R, R)

    @property
    def stage_masks(self):
        return [torch.sigmoid(x) for x in self.stage_logits]


class MTFF(nn.Module):
    def __init__(self, image_channels: list[int], resolution: int, fused_channels: int = 32, vm_skip: bool = True):
        super().__init__()
        self.fused_channels = fused_channels
        self.vm_skip = vm_skip
        self.gab = nn.ModuleList(GroupAggregationBridge(c, fused_channels, fused_channels) for c in image_channels)
        self.mask_head = nn.ModuleList(nn.Conv2d(fused_channels, 1, 3, padding=1) for _ in image_channels)
        self.deepest_lower = nn.Parameter(torch.zeros(1, fused_channels, resolution, resolution))

    def forward(self, resized, vm_probs, vm_logits, out_size, fused_hook=None) -> StageOutputs:
        fused = [None] * N_SCALES
        logits = [None] * N_SCALES
        running = None
        lower = None
        for s in reversed(range(N_SCALES)):
            if lower is None:
                f = gab_forward(self.gab[s], resized[s], vm_probs[s], None, self.deepest_lower)
            else:
                f = gab_forward(self.gab[s], resized[s], vm_probs[s], lower)
            if fused_hook is not None:
                f = fused_hook(s, f)
            fused[s] = f
            running = f if running is None else running + f
            logit = self.mask_head[s](running)
            if self.vm_skip and vm_logits is not None:
                logit = logit + vm_logits[s]
            logits[s] = logit
            lower = f
        return _finish(fused, logits, out_size)


class ConcatFusion(nn.Module):
    """Ablation replacement for MTFF: channel concatenation followed by 1x1 fusion."""

    def __init__(self, image_channels: list[int], fused_channels: int = 32, vm_skip: bool = True):
        super().__init__()
        self.vm_skip = vm_skip
        self.stage_fuse = nn.ModuleList(nn.Conv2d(c + 1, fused_channels, 1) for c in image_channels)
        self.final_fuse = nn.Conv2d(sum(image_channels) + N_SCALES, fused_channels, 1)
        self.mask_head = nn.ModuleList(nn.Conv2d(fused_channels, 1, 1) for _ in image_channels)

    def forward(self, resized, vm_probs, vm_logits, out_size, fused_hook=None) -> StageOutputs:
        fused = [F.gelu(self.stage_fuse[s](torch.cat([resized[s], vm_probs[s]], 1))) for s in range(N_SCALES)]
        f_out = F.gelu(self.final_fuse(torch.cat(list(resized) + list(vm_probs), 1)))
        fused[0] = f_out
        logits = []
        for s in range(N_SCALES):
            logit = self.mask_head[s](fused[s])
            if self.vm_skip and vm_logits is not None:
                logit = logit + vm_logits[s]
            logits.append(logit)
        return _finish(fused, logits, out_size)


def _finish(fused, logits, out_size) -> StageOutputs:
    up = F.interpolate(logits[0], size=out_size, mode="bilinear", align_corners=False)
    return StageOutputs(fused=fused, stage_logits=logits, S=torch.sigmoid(up), S_low=torch.sigmoid(logits[0]), F=fused[0])


def mtff_forward(mtff: MTFF, pyramid, vms, out_size) -> StageOutputs:
    return mtff(pyramid.resized, vms.masks, vms.logits, out_size)


class PixelProjection(nn.Module):
    """1x1 conv to two channels and a per-pixel softmax."""

    def __init__(self, fused_channels: int = 32):
        super().__init__()
        self.conv = nn.Conv2d(fused_channels, 2, 1)

    def forward(self, feat):
        return torch.softmax(self.conv(feat), dim=1)


def project_to_distribution(proj: PixelProjection, feat):
    return proj(feat)
