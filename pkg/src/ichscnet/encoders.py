"""Image pyramid stem and small stand-ins for the CLIP/SAM encoders and the SAM mask decoder."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .synth_data import AGE_RANGE, GCS_RANGE, GENDERS, LOCATIONS, ONSET_RANGE, STAY_RANGE, TREATMENTS

FROZEN, FINE_TUNE, TRAIN = "frozen", "fine-tune", "train"
N_SCALES = 4


# ---------------------------------------------------------------------------
# pyramid


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]  # (B, C_s, H/2^s, W/2^s)
    resized: list[torch.Tensor]  # (B, C_s, R, R)

    def __post_init__(self):
        if len(self.levels) != N_SCALES or len(self.resized) != N_SCALES:
            raise ValueError("a FeaturePyramid has exactly 4 levels")


class PyramidStem(nn.Module):
    """Stem conv at full resolution followed by three stride-2 down-sampling blocks."""

    def __init__(self, base_channels: int = 16, resolution: int = 64):
        super().__init__()
        c = base_channels
        self.channels = [c, 2 * c, 4 * c, 8 * c]
        self.resolution = resolution
        self.stem = nn.Conv2d(1, c, 3, padding=1)
        self.down = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(self.channels[s], self.channels[s + 1], 3, stride=2, padding=1),
                nn.GELU(),
                nn.Conv2d(self.channels[s + 1], self.channels[s + 1], 3, padding=1),
                nn.GELU(),
            )
            for s in range(3)
        )

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        if image.dim() == 3:
            image = image.unsqueeze(1)
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"image size {h}x{w} must be divisible by 8")
        x = F.gelu(self.stem(image))
        levels = [x]
        for block in self.down:
            x = block(x)
            levels.append(x)
        r = self.resolution
        resized = [F.interpolate(lv, size=(r, r), mode="bilinear", align_corners=False) for lv in levels]
        return FeaturePyramid(levels, resized)


def build_pyramid(stem: PyramidStem, image) -> FeaturePyramid:
    """``image`` is an (H, W) uint8 raster or a float tensor (B, 1, H, W) scaled to [0, 1]."""
    if isinstance(image, np.ndarray):
        if image.ndim != 2:
            raise ValueError("expected a single (H, W) grayscale raster")
        p = next(stem.parameters())
        image = torch.as_tensor(image, dtype=p.dtype, device=p.device)[None, None] / 255.0
    return stem(image)


# ---------------------------------------------------------------------------
# text


_TOKEN_RE = re.compile(r"\d+(?:\.\d+)?|[a-z]+")

# numeric tokens are binned by the keyword that precedes them
_NUMBER_CONTEXT = {
    "age": ("age", 5),
    "stay": ("stay", 5),
    "ct": ("onset", 6),
    "gcs": ("gcs", 1),
    "volume": ("vol", 5),
}

PAD, UNK = "<pad>", "<unk>"


def _bin_token(prefix: str, width: int, value: float) -> str:
    return f"{prefix}_{int(value // width)}"


def build_vocabulary() -> dict[str, int]:
    words = set()
    template = (
        "age hospital stay d onset to ct h gcs treatment hemorrhage at volume ml "
        + " ".join(g.lower() for g in GENDERS)
        + " "
        + " ".join(TREATMENTS)
        + " "
        + " ".join(loc.replace("-", " ") for loc in LOCATIONS)
    )
    words.update(template.split())
    for a in range(AGE_RANGE[0], AGE_RANGE[1] + 1):
        words.add(_bin_token("age", 5, a))
    for d in range(STAY_RANGE[0], STAY_RANGE[1] + 1):
        words.add(_bin_token("stay", 5, d))
    for hrs in range(ONSET_RANGE[0], ONSET_RANGE[1] + 1):
        words.add(_bin_token("onset", 6, hrs))
    for g in range(GCS_RANGE[0], GCS_RANGE[1] + 1):
        words.add(_bin_token("gcs", 1, g))
    for v in range(0, 200, 5):
        words.add(_bin_token("vol", 5, v))
    return {tok: i for i, tok in enumerate([PAD, UNK] + sorted(words))}


def tokenize(text: str) -> list[str]:
    if not text or not text.strip():
        raise ValueError("cannot tokenize an empty string")
    raw = _TOKEN_RE.findall(text.lower())
    out = []
    prev = None
    for tok in raw:
        if tok[0].isdigit():
            ctx = _NUMBER_CONTEXT.get(prev)
            out.append(_bin_token(ctx[0], ctx[1], float(tok)) if ctx else tok)
        else:
            out.append(tok)
        prev = tok
    return out


class TextEncoder(nn.Module):
    """Lookup-table text encoder; frozen after seeded random initialization."""

    def __init__(self, dim: int = 64, vocab: dict[str, int] | None = None, seed: int = 0):
        super().__init__()
        self.vocab = dict(vocab) if vocab is not None else build_vocabulary()
        self.dim = dim
        self.embedding = nn.Embedding(len(self.vocab), dim, padding_idx=self.vocab[PAD])
        g = torch.Generator().manual_seed(int(seed) + 101)
        with torch.no_grad():
            self.embedding.weight.copy_(torch.randn(len(self.vocab), dim, generator=g))
            self.embedding.weight[self.vocab[PAD]].zero_()

    def token_ids(self, text: str) -> list[int]:
        unk = self.vocab[UNK]
        return [self.vocab.get(tok, unk) for tok in tokenize(text)]

    def batch_ids(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        ids = [self.token_ids(t) for t in texts]
        n = max(len(x) for x in ids)
        out = torch.full((len(ids), n), self.vocab[PAD], dtype=torch.long)
        mask = torch.zeros((len(ids), n), dtype=torch.bool)
        for i, row in enumerate(ids):
            out[i, : len(row)] = torch.tensor(row)
            mask[i, : len(row)] = True
        return out, mask

    def forward(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (embeddings (B, L, d_t), valid-token mask (B, L))."""
        ids, mask = self.batch_ids(texts)
        ids = ids.to(self.embedding.weight.device)
        return self.embedding(ids), mask.to(ids.device)

    def save_vocabulary(self, path) -> None:
        Path(path).write_text(json.dumps(self.vocab, indent=1, sort_keys=True), encoding="utf-8")

    @staticmethod
    def load_vocabulary(path) -> dict[str, int]:
        return json.loads(Path(path).read_text(encoding="utf-8"))


def encode_text(encoder: TextEncoder, rendered: str) -> torch.Tensor:
    emb, _ = encoder([rendered])
    return emb[0]


# ---------------------------------------------------------------------------
# prompts


BOX_MIN, BOX_MAX, FG_POINT, BG_POINT = range(4)


@dataclass(frozen=True)
class PromptSet:
    box: tuple[float, float, float, float]
    points: tuple[tuple[float, float, bool], ...]

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if len(self.points) < 1:
            raise ValueError("a PromptSet needs at least one point")
        coords = list(self.box) + [c for p in self.points for c in p[:2]]
        if any(not 0.0 <= c <= 1.0 for c in coords):
            raise ValueError("prompt coordinates must be normalized to [0, 1]")


class PromptEncoder(nn.Module):
    """Random-Fourier positional encoding plus a type embedding per prompt element."""

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__()
        if dim % 2:
            raise ValueError("prompt dimension must be even")
        self.dim = dim
        g = torch.Generator().manual_seed(int(seed) + 202)
        self.register_buffer("gaussian", torch.randn(2, dim // 2, generator=g))
        self.type_embedding = nn.Embedding(4, dim)
        with torch.no_grad():
            self.type_embedding.weight.copy_(torch.randn(4, dim, generator=g))

    def positional(self, xy: torch.Tensor) -> torch.Tensor:
        proj = (2.0 * xy - 1.0) @ self.gaussian.to(xy.dtype) * (2.0 * math.pi)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def grid_encoding(self, size: int) -> torch.Tensor:
        """Positional encoding of pixel centres on a size x size grid, shape (d_p, size, size)."""
        dtype = self.type_embedding.weight.dtype
        c = (torch.arange(size, dtype=dtype) + 0.5) / size
        yy, xx = torch.meshgrid(c, c, indexing="ij")
        pe = self.positional(torch.stack([xx, yy], dim=-1).to(self.type_embedding.weight.device))
        return pe.permute(2, 0, 1)

    def forward(self, prompts: list[PromptSet]) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (embeddings (B, N, d_p), valid mask (B, N)) with N = 2 + max k."""
        w = self.type_embedding.weight
        n = 2 + max(len(p.points) for p in prompts)
        coords = torch.zeros(len(prompts), n, 2, dtype=w.dtype, device=w.device)
        types = torch.zeros(len(prompts), n, dtype=torch.long, device=w.device)
        mask = torch.zeros(len(prompts), n, dtype=torch.bool, device=w.device)
        for i, p in enumerate(prompts):
            x0, y0, x1, y1 = p.box
            rows = [(x0, y0, BOX_MIN), (x1, y1, BOX_MAX)]
            rows += [(x, y, FG_POINT if fg else BG_POINT) for x, y, fg in p.points]
            for j, (x, y, t) in enumerate(rows):
                coords[i, j, 0], coords[i, j, 1] = x, y
                types[i, j] = t
                mask[i, j] = True
        emb = self.positional(coords) + self.type_embedding(types)
        return emb * mask.unsqueeze(-1).to(emb.dtype), mask


def encode_prompts(encoder: PromptEncoder, prompts: PromptSet) -> torch.Tensor:
    emb, _ = encoder([prompts])
    return emb[0]


# ---------------------------------------------------------------------------
# image embedding


class ClipImageEncoder(nn.Module):
    """Frozen per-scale embedding of a resized pyramid level into C_m channels."""

    def __init__(self, in_channels: list[int], out_channels: int = 32):
        super().__init__()
        self.proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, out_channels, 1), nn.GELU(), nn.Conv2d(out_channels, out_channels, 1))
            for c in in_channels
        )

    def forward(self, feat: torch.Tensor, scale: int) -> torch.Tensor:
        return self.proj[scale](feat)


# ---------------------------------------------------------------------------
# mask decoder


def _attend(q, k, v, key_mask=None):
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(1), float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class CrossAttentionBlock(nn.Module):
    def __init__(self, dim: int, mlp: bool = True):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        if mlp:
            self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
            self.norm_mlp = nn.LayerNorm(dim)
        else:
            self.mlp = None

    def forward(self, x, ctx, ctx_mask=None):
        x = self.norm(x + self.out(_attend(self.q(x), self.k(ctx), self.v(ctx), ctx_mask)))
        if self.mlp is None:
            return x
        return self.norm_mlp(x + self.mlp(x))


class MaskDecoder(nn.Module):
    """Two cross-attention rounds between prompt tokens and the image grid, then per-pixel logits.

    Round one updates each token from the image only (no token-token mixing), round two lets every
    pixel attend over the token set, so the output does not depend on prompt order.
    """

    def __init__(self, in_channels: list[int], dim: int = 64):
        super().__init__()
        self.dim = dim
        self.adapters = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in in_channels)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.token_to_image = CrossAttentionBlock(dim)
        # the image side skips the MLP; it runs once per pixel and dominates the cost
        self.image_to_token = CrossAttentionBlock(dim, mlp=False)
        self.upconv = nn.Sequential(
            nn.Conv2d(dim, dim // 4, 1),
            nn.GELU(),
            nn.Conv2d(dim // 4, dim // 4, 3, padding=1),
            nn.GELU(),
        )
        self.hyper = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim // 4))
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, fused_image, scale, prompt_emb, prompt_mask, grid_pe):
        b, _, h, w = fused_image.shape
        if grid_pe.shape[-2:] != (h, w):
            raise ValueError(f"decoder expects a {tuple(grid_pe.shape[-2:])} grid, got {(h, w)}")
        x = self.adapters[scale](fused_image) + grid_pe.unsqueeze(0)
        img = x.flatten(2).transpose(1, 2)  # (B, HW, d)
        tokens = torch.cat([self.mask_token.expand(b, -1, -1), prompt_emb], dim=1)
        token_mask = torch.cat([torch.ones(b, 1, dtype=torch.bool, device=prompt_mask.device), prompt_mask], dim=1)
        tokens = self.token_to_image(tokens, img)
        img = self.image_to_token(img, tokens, token_mask)
        grid = self.upconv(img.transpose(1, 2).reshape(b, self.dim, h, w))
        weights = self.hyper(tokens[:, 0])  # (B, d/4)
        logits = torch.einsum("bchw,bc->bhw", grid, weights) / math.sqrt(weights.shape[-1])
        return (logits + self.bias).unsqueeze(1)


def decode_mask(decoder: MaskDecoder, fused_image, prompt_emb, prompt_mask, grid_pe, scale: int = 0):
    return decoder(fused_image, scale, prompt_emb, prompt_mask, grid_pe)
