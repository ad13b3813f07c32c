"""Cross-modal interaction: text-conditioned rough mask, then prompt-guided valid mask."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import FeaturePyramid, PromptSet, N_SCALES


class ChannelNorm(nn.Module):
    """Standardizes the channel vector at every pixel, then applies a per-channel affine map."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class CrossModalAttention(nn.Module):
    """Image queries (max-pool + conv) attend over text keys/values (two distinct 1D convs)."""

    def __init__(self, image_channels: int, text_dim: int = 64, attn_dim: int = 64, out_channels: int = 32):
        super().__init__()
        self.attn_dim = attn_dim
        self.q_proj = nn.Sequential(nn.MaxPool2d(2), nn.Conv2d(image_channels, attn_dim, 1))
        self.k_proj = nn.Conv1d(text_dim, attn_dim, 1)
        self.v_proj = nn.Conv1d(text_dim, attn_dim, 1)
        self.out_proj = nn.Conv2d(attn_dim, out_channels, 1)
        self.norm = ChannelNorm(out_channels)

    def weights(self, image_feat, text_emb, text_mask=None):
        """Attention weights (B, queries, tokens) plus the pooled query grid size."""
        q = self.q_proj(image_feat)
        hq, wq = q.shape[-2:]
        q = q.flatten(2).transpose(1, 2)
        k = self.k_proj(text_emb.transpose(1, 2)).transpose(1, 2)
        if q.shape[-1] != k.shape[-1]:
            raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
        scores = q @ k.transpose(1, 2) / math.sqrt(self.attn_dim)
        if text_mask is not None:
            scores = scores.masked_fill(~text_mask.unsqueeze(1), float("-inf"))
        return torch.softmax(scores, dim=-1), (hq, wq)

    def forward(self, image_feat, text_emb, text_mask=None):
        attn, (hq, wq) = self.weights(image_feat, text_emb, text_mask)
        v = self.v_proj(text_emb.transpose(1, 2)).transpose(1, 2)
        out = (attn @ v).transpose(1, 2).reshape(v.shape[0], self.attn_dim, hq, wq)
        out = F.interpolate(out, size=image_feat.shape[-2:], mode="bilinear", align_corners=False)
        return self.norm(self.out_proj(out))


class SamClipScale(nn.Module):
    """Trainable parts of one interaction module: attention, mask projection and ablation stand-ins."""

    def __init__(self, image_channels: int, resolution: int, text_dim=64, attn_dim=64, mask_channels=32):
        super().__init__()
        self.attention = CrossModalAttention(image_channels, text_dim, attn_dim, mask_channels)
        self.mask_conv = nn.Conv2d(mask_channels, image_channels, 1)
        # sam_only: no text, the rough mask is a learned constant
        self.constant_rough = nn.Parameter(torch.zeros(1, mask_channels, resolution, resolution))
        # clip_only: no prompt/decoder, VM comes straight from the rough mask
        self.vm_head = nn.Conv2d(mask_channels, 1, 1)
        self.attention_enabled = True  # test hook: False drops the attention branch


def rough_mask(scale_mod: SamClipScale, clip_image_embedding, image_feat, text_emb, text_mask=None):
    """M_clip = Norm(Att(Q, K, V)) + frozen image embedding, shape (B, C_m, R, R)."""
    if not scale_mod.attention_enabled:
        return clip_image_embedding
    att = scale_mod.attention(image_feat, text_emb, text_mask)
    if att.shape != clip_image_embedding.shape:
        raise ValueError(f"attention output {tuple(att.shape)} != image embedding {tuple(clip_image_embedding.shape)}")
    return att + clip_image_embedding


def synthesize_prompts(bbox, rough_mask_raster: np.ndarray, seed: int, k_fg: int = 3, k_bg: int = 1) -> PromptSet:
    """Box plus points sampled from the rough mask (foreground) and the box minus the mask (background)."""
    rough = np.asarray(rough_mask_raster, dtype=bool)
    if not rough.any():
        raise ValueError("rough mask has no foreground pixel")
    h, w = rough.shape
    x0, y0, x1, y1 = (int(v) for v in bbox)
    if not (0 <= x0 < x1 < w and 0 <= y0 < y1 < h):
        raise ValueError(f"invalid bbox {bbox} for a {h}x{w} raster")
    rng = np.random.default_rng(seed)
    fy, fx = np.nonzero(rough)
    pick = rng.integers(0, len(fy), size=k_fg)
    points = [((fx[i] + 0.5) / w, (fy[i] + 0.5) / h, True) for i in pick]
    inside = np.zeros_like(rough)
    inside[y0 : y1 + 1, x0 : x1 + 1] = True
    by, bx = np.nonzero(inside & ~rough)
    if len(by) and k_bg > 0:
        pick = rng.integers(0, len(by), size=k_bg)
        points += [((bx[i] + 0.5) / w, (by[i] + 0.5) / h, False) for i in pick]
    box = (x0 / w, y0 / h, (x1 + 1) / w, (y1 + 1) / h)
    return PromptSet(box=box, points=tuple((float(x), float(y), bool(f)) for x, y, f in points))


def valid_mask_logits(scale_mod, decoder, scale, m_clip, image_feat, prompt_emb, prompt_mask, grid_pe):
    proj = scale_mod.mask_conv(m_clip)
    if proj.shape != image_feat.shape:
        raise ValueError(f"projected rough mask {tuple(proj.shape)} != image feature {tuple(image_feat.shape)}")
    return decoder(proj + image_feat, scale, prompt_emb, prompt_mask, grid_pe)


def valid_mask(scale_mod, decoder, scale, m_clip, image_feat, prompt_emb, prompt_mask, grid_pe):
    """VM probabilities (B, 1, R, R)."""
    return torch.sigmoid(valid_mask_logits(scale_mod, decoder, scale, m_clip, image_feat, prompt_emb, prompt_mask, grid_pe))


@dataclass
class ValidMaskSet:
    masks: list[torch.Tensor]  # sigmoid probabilities (B, 1, R, R)
    logits: list[torch.Tensor]
    rough: list[torch.Tensor]

    def __post_init__(self):
        if len(self.masks) != N_SCALES:
            raise ValueError("a ValidMaskSet has exactly 4 masks")


def run_scale_module(model, scale: int, pyramid: FeaturePyramid, text_emb, text_mask, prompt_emb, prompt_mask):
    """One interaction module; ``model`` carries the shared encoders, decoder and per-scale parts."""
    return model.scale_forward(scale, pyramid, text_emb, text_mask, prompt_emb, prompt_mask)
