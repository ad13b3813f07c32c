"""Deep-supervised segmentation loss, weighted cross-entropy, multi-task consistency term and their total."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    gamma: tuple[float, float, float, float] = (1.0, 0.75, 0.5, 0.25)
    alpha: float = 0.2
    beta: float = 0.8
    xi: tuple[float, float] = (1.0, 1.0)
    epsilon_smooth: float = 1e-6
    epsilon_prob: float = 1e-6
    mta_variant: str = "symmetric_kl"  # or "mixture_js"
    use_mta: bool = True

    def __post_init__(self):
        self.gamma = tuple(float(g) for g in self.gamma)
        self.xi = tuple(float(x) for x in self.xi)
        if len(self.gamma) != 4:
            raise ValueError("gamma needs one weight per scale (4)")
        if len(self.xi) != 2:
            raise ValueError("xi needs one weight per class (2)")
        values = list(self.gamma) + list(self.xi) + [self.alpha, self.beta, self.epsilon_smooth, self.epsilon_prob]
        if any(v < 0 or not math.isfinite(v) for v in values):
            raise ValueError("loss weights must be finite and non-negative")
        if self.mta_variant not in ("symmetric_kl", "mixture_js"):
            raise ValueError(f"unknown mta_variant {self.mta_variant!r}")


@dataclass
class LossBreakdown:
    seg_per_scale: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)
    seg_total: torch.Tensor | None = None
    cla: torch.Tensor | None = None
    mta: torch.Tensor | None = None
    total: torch.Tensor | None = None

    def as_record(self) -> dict:
        def f(x):
            return None if x is None else float(x.detach()) if torch.is_tensor(x) else float(x)

        return {
            "seg_per_scale": [[f(d), f(j)] for d, j in self.seg_per_scale],
            "seg_total": f(self.seg_total),
            "cla": f(self.cla),
            "mta": f(self.mta),
            "total": f(self.total),
        }


def class_weights(labels) -> tuple[float, float]:
    """Inverse-frequency weights xi_c = n / (2 n_c) over the training split."""
    labels = [int(x) for x in labels]
    n = len(labels)
    n1 = sum(labels)
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise ValueError("class weights need both classes in the training split")
    return n / (2.0 * n0), n / (2.0 * n1)


def downsample_mask(mask: torch.Tensor, size) -> torch.Tensor:
    """Area interpolation then threshold at 0.5; ``mask`` is (B, 1, H, W) or (B, H, W)."""
    if mask.dim() == 3:
        mask = mask.unsqueeze(1)
    mask = mask.to(torch.get_default_dtype() if not mask.is_floating_point() else mask.dtype)
    if tuple(mask.shape[-2:]) != tuple(size):
        mask = F.interpolate(mask, size=size, mode="area")
    return (mask >= 0.5).to(mask.dtype)


def soft_dice(pred, target, eps):
    dims = tuple(range(1, pred.dim()))
    inter = (pred * target).sum(dims)
    return (2 * inter + eps) / (pred.sum(dims) + target.sum(dims) + eps)


def soft_jaccard(pred, target, eps):
    dims = tuple(range(1, pred.dim()))
    inter = (pred * target).sum(dims)
    return (inter + eps) / (pred.sum(dims) + target.sum(dims) - inter + eps)


def seg_loss(stage_masks, gt_mask, weights: LossWeights):
    """Returns (seg_total, [(dice_term, jaccard_term)] per scale); terms are batch means of 1 - metric."""
    per_scale = []
    total = 0.0
    for i, pred in enumerate(stage_masks):
        if pred.dim() == 3:
            pred = pred.unsqueeze(1)
        target = downsample_mask(gt_mask.to(pred.dtype), pred.shape[-2:])
        if target.shape != pred.shape:
            raise ValueError(f"stage {i}: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
        d = (1 - soft_dice(pred, target, weights.epsilon_smooth)).mean()
        j = (1 - soft_jaccard(pred, target, weights.epsilon_smooth)).mean()
        per_scale.append((d, j))
        total = total + weights.gamma[i] * (d + j)
    return total, per_scale


def cla_loss(probabilities, labels, xi=(1.0, 1.0), eps: float = 1e-6):
    """Weighted cross-entropy, batch mean. ``probabilities`` is (B, 2) ordered (p_0, p_1)."""
    probs = torch.as_tensor(probabilities)
    if probs.dim() == 1:
        probs = probs.unsqueeze(0)
    labels = torch.as_tensor(labels, device=probs.device).reshape(-1).long()
    if not torch.all((labels == 0) | (labels == 1)):
        raise ValueError(f"labels must be 0 or 1, got {labels.tolist()}")
    p = probs.clamp(eps, 1 - eps)
    w = torch.as_tensor(xi, dtype=p.dtype, device=p.device)
    picked = p.gather(1, labels[:, None]).squeeze(1)
    return (-w[labels] * torch.log(picked)).mean()


def _two_class(s, eps):
    s2 = torch.cat([1 - s, s], dim=1).clamp(eps, 1 - eps)
    return s2 / s2.sum(dim=1, keepdim=True)


def mta_loss(P, S, eps: float = 1e-6, variant: str = "symmetric_kl"):
    """Per-pixel divergence between P (B, 2, R, R) and (1 - S, S) with S (B, 1, R, R); pixel and batch mean.

    ``symmetric_kl`` is  KL(P||S) + KL(S||P);  ``mixture_js`` is the usual JS divergence.
    """
    if S.dim() == 3:
        S = S.unsqueeze(1)
    if P.shape[-2:] != S.shape[-2:] or P.shape[0] != S.shape[0]:
        raise ValueError(f"P {tuple(P.shape)} and S {tuple(S.shape)} resolutions differ")
    p = P.clamp(eps, 1 - eps)
    p = p / p.sum(dim=1, keepdim=True)
    s = _two_class(S, eps)
    if variant == "symmetric_kl":
        d = ((p - s) * (torch.log(p) - torch.log(s))).sum(dim=1)
    elif variant == "mixture_js":
        m = 0.5 * (p + s)
        d = 0.5 * (p * (torch.log(p) - torch.log(m))).sum(1) + 0.5 * (s * (torch.log(s) - torch.log(m))).sum(1)
    else:
        raise ValueError(f"unknown mta variant {variant!r}")
    return d.mean()


def total_loss(seg_total, per_scale, cla, mta, weights: LossWeights) -> LossBreakdown:
    """total = mta + alpha * seg + beta * cla; a missing term counts as zero."""
    def z(x):
        return x if x is not None else torch.zeros(())

    for name, val in (("seg", seg_total), ("cla", cla), ("mta", mta)):
        if val is not None and not torch.isfinite(torch.as_tensor(val)).all():
            raise FloatingPointError(f"non-finite {name} loss: {float(val)}")
    total = z(mta) + weights.alpha * z(seg_total) + weights.beta * z(cla)
    return LossBreakdown(seg_per_scale=list(per_scale or []), seg_total=seg_total, cla=cla, mta=mta, total=total)


def weights_record(w: LossWeights) -> dict:
    return asdict(w)
