"""Full network: pyramid -> four interaction modules -> fusion -> segmentation output and classifier."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from . import losses as L
from .classifier_head import ClassifierConfig, DenseClassifier
from .encoders import (
    FINE_TUNE,
    FROZEN,
    N_SCALES,
    TRAIN,
    ClipImageEncoder,
    FeaturePyramid,
    MaskDecoder,
    PromptEncoder,
    PromptSet,
    PyramidStem,
    TextEncoder,
)
from .mtff import MTFF, ConcatFusion, PixelProjection, StageOutputs
from .sam_clip import SamClipScale, ValidMaskSet, rough_mask, synthesize_prompts, valid_mask_logits


@dataclass(frozen=True)
class ModeSpec:
    use_text: bool  # text encoder + cross-modal attention
    use_prompts: bool  # prompt encoder + mask decoder
    fusion: str  # "mtff" or "concat"
    seg: bool
    cla: bool
    reported: tuple[str, ...]  # task columns shown in the ablation table


MODES: dict[str, ModeSpec] = {
    "full": ModeSpec(True, True, "mtff", True, True, ("cla", "seg")),
    "cla_only": ModeSpec(True, True, "mtff", False, True, ("cla",)),
    "seg_only": ModeSpec(True, True, "mtff", True, False, ("seg",)),
    "sam_only": ModeSpec(False, True, "concat", True, True, ("seg",)),
    "clip_only": ModeSpec(True, False, "concat", True, True, ("cla",)),
    "sam_clip_no_mtff": ModeSpec(True, True, "concat", True, True, ("cla", "seg")),
    "clip_plus_mtff": ModeSpec(True, False, "mtff", True, True, ("cla",)),
    "sam_plus_mtff": ModeSpec(False, True, "mtff", True, True, ("seg",)),
}

DEFAULT_TRAINABILITY = {
    "clip_image_encoder": FROZEN,
    "clip_text_encoder": FROZEN,
    "prompt_encoder": FROZEN,
    "mask_decoder": FINE_TUNE,
}


@dataclass
class ModelConfig:
    image_size: int = 128
    base_channels: int = 16
    resolution: int | None = None  # decoder resolution R, default image_size // 2
    text_dim: int = 64
    prompt_dim: int = 64
    attn_dim: int = 64
    mask_channels: int = 32
    fused_channels: int = 32
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    k_fg: int = 3
    k_bg: int = 1
    vm_skip: bool = True
    seed: int = 0

    @property
    def R(self) -> int:
        return self.resolution or self.image_size // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classifier"] = asdict(self.classifier)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        c = d.pop("classifier", None)
        if isinstance(c, dict):
            lpb = c.get("layers_per_block")
            if isinstance(lpb, list):
                c["layers_per_block"] = tuple(lpb)
            d["classifier"] = ClassifierConfig(**c)
        return cls(**d)


@dataclass
class Batch:
    image: torch.Tensor  # (B, 1, H, W) in [0, 1]
    texts: list[str]
    prompts: list[PromptSet]
    gt: torch.Tensor  # (B, 1, H, W) {0, 1}
    labels: torch.Tensor  # (B,)
    case_ids: list[str]

    def __len__(self):
        return len(self.texts)


def case_prompt_seed(seed: int, case_id: str) -> int:
    digits = "".join(ch for ch in case_id if ch.isdigit()) or "0"
    return int(np.random.SeedSequence([int(seed), int(digits), len(case_id)]).generate_state(1)[0])


def make_batch(cases, seed: int = 0, k_fg: int = 3, k_bg: int = 1, dtype=torch.float32) -> Batch:
    images = np.stack([c.image for c in cases]).astype(np.float64) / 255.0
    gts = np.stack([c.gt_mask for c in cases]).astype(np.float64)
    prompts = [synthesize_prompts(c.bbox, c.rough_mask, case_prompt_seed(seed, c.case_id), k_fg, k_bg) for c in cases]
    return Batch(
        image=torch.as_tensor(images, dtype=dtype).unsqueeze(1),
        texts=[c.text.rendered for c in cases],
        prompts=prompts,
        gt=torch.as_tensor(gts, dtype=dtype).unsqueeze(1),
        labels=torch.as_tensor([c.label for c in cases], dtype=torch.long),
        case_ids=[c.case_id for c in cases],
    )


@dataclass
class ModelOutput:
    pyramid: FeaturePyramid
    vms: ValidMaskSet
    stages: StageOutputs
    cla_logits: torch.Tensor | None
    P: torch.Tensor | None


class ICHSCNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), mode: str = "full", trainability: dict | None = None):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
        if config.image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        self.config = config
        self.mode = mode
        self.spec = MODES[mode]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self._build()

        self.trainability = self._default_trainability()
        if trainability:
            unknown = set(trainability) - set(self.trainability)
            if unknown:
                raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
            self.trainability.update(trainability)
        self.apply_trainability()

    def _build(self):
        config, spec = self.config, self.spec
        R = config.R
        self.stem = PyramidStem(config.base_channels, R)
        chans = self.stem.channels

        if spec.use_text:
            self.clip_image_encoder = ClipImageEncoder(chans, config.mask_channels)
            self.text_encoder = TextEncoder(config.text_dim, seed=config.seed)
        if spec.use_prompts:
            self.prompt_encoder = PromptEncoder(config.prompt_dim, seed=config.seed)
            self.mask_decoder = MaskDecoder(chans, config.prompt_dim)
        self.scales = nn.ModuleList(
            SamClipScale(c, R, config.text_dim, config.attn_dim, config.mask_channels) for c in chans
        )
        for mod in self.scales:
            if not spec.use_text:
                del mod.attention
            if spec.use_prompts:
                del mod.vm_head
            else:
                del mod.mask_conv
            if spec.use_text:
                del mod.constant_rough

        if spec.fusion == "mtff":
            self.fusion = MTFF(chans, R, config.fused_channels, vm_skip=config.vm_skip)
            if not spec.seg:
                del self.fusion.mask_head
        else:
            self.fusion = ConcatFusion(chans, config.fused_channels, vm_skip=config.vm_skip)
            if not spec.seg:
                del self.fusion.mask_head
        if spec.cla:
            self.classifier = DenseClassifier(config.fused_channels, config.classifier)
        if spec.cla and spec.seg:
            self.p_projection = PixelProjection(config.fused_channels)

    # -- parameter groups ---------------------------------------------------

    def parameter_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        groups: dict[str, dict[str, nn.Parameter]] = {}
        for name, p in self.named_parameters():
            groups.setdefault(self._group_of(name), {})[name] = p
        return groups

    def _group_of(self, name: str) -> str:
        parts = name.split(".")
        head = parts[0]
        if head == "stem":
            return "pyramid"
        if head == "clip_image_encoder":
            return "clip_image_encoder"
        if head == "text_encoder":
            return "clip_text_encoder"
        if head in ("prompt_encoder", "mask_decoder", "classifier", "p_projection"):
            return head
        if head == "scales":
            return f"attention.scale{parts[1]}"
        if head == "fusion":
            if isinstance(self.fusion, MTFF):
                if parts[1] == "gab":
                    return f"gab.stage{parts[2]}"
                if parts[1] == "mask_head":
                    return f"mask_head.stage{parts[2]}"
                if parts[1] == "deepest_lower":
                    return f"gab.stage{N_SCALES - 1}"
            if parts[1] == "mask_head":
                return f"mask_head.stage{parts[2]}"
            return "fusion"
        raise KeyError(name)

    def _default_trainability(self) -> dict[str, str]:
        names = {self._group_of(n) for n, _ in self.named_parameters()}
        return {g: DEFAULT_TRAINABILITY.get(g, TRAIN) for g in sorted(names)}

    def apply_trainability(self) -> None:
        for group, params in self.parameter_groups().items():
            flag = self.trainability[group]
            for p in params.values():
                p.requires_grad_(flag != FROZEN)

    def frozen_parameters(self) -> dict[str, nn.Parameter]:
        out = {}
        for group, params in self.parameter_groups().items():
            if self.trainability[group] == FROZEN:
                out.update(params)
        return out

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        out = {}
        for group, params in self.parameter_groups().items():
            if self.trainability[group] != FROZEN:
                out.update(params)
        return out

    # -- forward -------------------------------------------------------------

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encode_prompts(self, prompts):
        return self.prompt_encoder(prompts)

    def grid_pe(self):
        return self.prompt_encoder.grid_encoding(self.config.R)

    def scale_forward(self, scale, pyramid, text_emb, text_mask, prompt_emb, prompt_mask, grid_pe=None):
        """(VM logits, rough mask) for one scale."""
        mod = self.scales[scale]
        feat = pyramid.resized[scale]
        if self.spec.use_text:
            emb = self.clip_image_encoder(feat, scale)
            m_clip = rough_mask(mod, emb, feat, text_emb, text_mask)
        else:
            m_clip = mod.constant_rough.expand(feat.shape[0], -1, -1, -1)
        if self.spec.use_prompts:
            if grid_pe is None:
                grid_pe = self.grid_pe()
            logits = valid_mask_logits(mod, self.mask_decoder, scale, m_clip, feat, prompt_emb, prompt_mask, grid_pe)
        else:
            logits = mod.vm_head(m_clip)
        return logits, m_clip

    def forward(self, batch: Batch, fused_hook=None) -> ModelOutput:
        image = batch.image.to(self.dtype)
        pyramid = self.stem(image)
        text_emb = text_mask = prompt_emb = prompt_mask = grid_pe = None
        if self.spec.use_text:
            text_emb, text_mask = self.text_encoder(batch.texts)
        if self.spec.use_prompts:
            prompt_emb, prompt_mask = self.prompt_encoder(batch.prompts)
            grid_pe = self.grid_pe()
        logits, roughs = [], []
        for s in range(N_SCALES):
            lg, m = self.scale_forward(s, pyramid, text_emb, text_mask, prompt_emb, prompt_mask, grid_pe)
            logits.append(lg)
            roughs.append(m)
        vms = ValidMaskSet(masks=[torch.sigmoid(x) for x in logits], logits=logits, rough=roughs)
        if not self.spec.seg:
            stages = self._features_only(pyramid, vms, image.shape[-2:], fused_hook)
        else:
            stages = self.fusion(pyramid.resized, vms.masks, vms.logits, image.shape[-2:], fused_hook)
        cla_logits = self.classifier(stages.F) if self.spec.cla else None
        P = self.p_projection(stages.F) if hasattr(self, "p_projection") else None
        return ModelOutput(pyramid, vms, stages, cla_logits, P)

    def _features_only(self, pyramid, vms, out_size, fused_hook):
        # classification-only: same fusion, no mask heads
        fusion = self.fusion
        if isinstance(fusion, MTFF):
            from .mtff import gab_forward

            fused = [None] * N_SCALES
            lower = None
            for s in reversed(range(N_SCALES)):
                const = fusion.deepest_lower if lower is None else None
                f = gab_forward(fusion.gab[s], pyramid.resized[s], vms.masks[s], lower, const)
                if fused_hook is not None:
                    f = fused_hook(s, f)
                fused[s] = lower = f
            return StageOutputs(fused=fused, stage_logits=[], S=None, S_low=None, F=fused[0])
        import torch.nn.functional as F

        f_out = F.gelu(fusion.final_fuse(torch.cat(list(pyramid.resized) + list(vms.masks), 1)))
        return StageOutputs(fused=[f_out], stage_logits=[], S=None, S_low=None, F=f_out)

    # -- loss ----------------------------------------------------------------

    def task_weights(self, weights: L.LossWeights) -> L.LossWeights:
        """Mode wiring of the loss: single-task modes zero the other task and drop the consistency term."""
        w = L.LossWeights(**{k: getattr(weights, k) for k in L.LossWeights.__dataclass_fields__})
        if not self.spec.seg:
            w.alpha = 0.0
            w.use_mta = False
        if not self.spec.cla:
            w.beta = 0.0
            w.use_mta = False
        return w

    def compute_loss(self, out: ModelOutput, batch: Batch, weights: L.LossWeights) -> L.LossBreakdown:
        w = self.task_weights(weights)
        seg_total = per_scale = cla = mta = None
        if self.spec.seg:
            seg_total, per_scale = L.seg_loss(out.stages.stage_masks, batch.gt.to(self.dtype), w)
        if self.spec.cla:
            probs = torch.softmax(out.cla_logits, dim=-1)
            cla = L.cla_loss(probs, batch.labels, w.xi, w.epsilon_prob)
        if w.use_mta and out.P is not None:
            mta = L.mta_loss(out.P, out.stages.S_low, w.epsilon_prob, w.mta_variant)
        return L.total_loss(seg_total, per_scale, cla, mta, w)
