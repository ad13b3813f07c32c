"""Densely connected prognosis classifier over the fused feature output."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ClassifierConfig:
    dense_blocks: int = 2
    growth_rate: int = 8
    layers_per_block: int | tuple[int, ...] = 3

    def __post_init__(self):
        layers = self.block_layers()
        if self.dense_blocks < 1 or self.growth_rate < 1 or any(n < 1 for n in layers):
            raise ValueError(f"classifier config must be positive throughout: {self}")
        if len(layers) != self.dense_blocks:
            raise ValueError("layers_per_block must have one entry per dense block")

    def block_layers(self) -> tuple[int, ...]:
        if isinstance(self.layers_per_block, int):
            return (self.layers_per_block,) * self.dense_blocks
        return tuple(self.layers_per_block)

    @classmethod
    def densenet121(cls) -> "ClassifierConfig":
        # (6, 12, 24, 16) dense layers, growth 32
        return cls(dense_blocks=4, growth_rate=32, layers_per_block=(6, 12, 24, 16))


class _DenseLayer(nn.Module):
    def __init__(self, in_channels, growth):
        super().__init__()
        self.bottleneck = nn.Conv2d(in_channels, 4 * growth, 1)
        self.conv = nn.Conv2d(4 * growth, growth, 3, padding=1)

    def forward(self, x):
        new = self.conv(F.gelu(self.bottleneck(F.gelu(x))))
        return torch.cat([x, new], dim=1)


class DenseClassifier(nn.Module):
    def __init__(self, in_channels: int = 32, config: ClassifierConfig = ClassifierConfig()):
        super().__init__()
        self.config = config
        layers = []
        c = in_channels
        for b, n in enumerate(config.block_layers()):
            for _ in range(n):
                layers.append(_DenseLayer(c, config.growth_rate))
                c += config.growth_rate
            if b < config.dense_blocks - 1:
                out = c // 2
                layers.append(nn.Sequential(nn.GELU(), nn.Conv2d(c, out, 1), nn.AvgPool2d(2)))
                c = out
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(c, 2)

    def forward(self, feat):
        x = F.gelu(self.features(feat))
        return self.fc(x.mean(dim=(2, 3)))

    def symmetric_init(self):
        """Test hook: identical output rows make both logits equal for any input."""
        with torch.no_grad():
            self.fc.weight[1].copy_(self.fc.weight[0])
            self.fc.bias[1].copy_(self.fc.bias[0])


def classify(head: DenseClassifier, feat) -> torch.Tensor:
    """(B, 2) logits ordered (good, poor)."""
    return head(feat)


def predict_probability(logits) -> torch.Tensor:
    """(p_good, p_poor) per row."""
    return torch.softmax(torch.as_tensor(logits), dim=-1)
