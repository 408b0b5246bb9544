"""Seeded convolutional feature extractor: 3x224x224 color -> Cx56x56 features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

MODES = ("fixed", "adaptive")


@dataclass(frozen=True)
class BackboneConfig:
    mode: str = "fixed"
    channels: int = 8
    seed: int = 0
    strides: tuple[int, int, int] = (2, 2, 1)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")


def init_uniform_fan_in(module: nn.Module, seed: int, scale: float = 1.0) -> None:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every parameter, drawn in declaration order."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 0xB0B]))
    with torch.no_grad():
        for layer in module.modules():
            if not isinstance(layer, (nn.Conv2d, nn.Linear)):
                continue
            fan_in = layer.weight[0].numel()
            bound = scale / np.sqrt(fan_in)
            for p in (layer.weight, layer.bias):
                if p is None:
                    continue
                vals = rng.uniform(-bound, bound, size=tuple(p.shape))
                p.copy_(torch.from_numpy(vals.astype(np.float32)).to(p.dtype))


def conv3x3(c_in: int, c_out: int, stride: int = 1) -> nn.Conv2d:
    # replicate padding keeps constant inputs constant right up to the border
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, padding_mode="replicate")


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.config = config
        c = config.channels
        s1, s2, s3 = config.strides
        self.stage1 = conv3x3(3, c, s1)
        self.stage2 = conv3x3(c, c, s2)
        self.stage3 = conv3x3(c, c, s3)
        init_uniform_fan_in(self, config.seed)
        if config.mode == "fixed":
            self.requires_grad_(False)

    @property
    def fixed(self) -> bool:
        return self.config.mode == "fixed"

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.stage1(x))
        x = torch.relu(self.stage2(x))
        return torch.relu(self.stage3(x))


def build_backbone(config: BackboneConfig) -> Backbone:
    return Backbone(config)


def extract(backbone: Backbone, color) -> np.ndarray:
    """Feature volume for one 3xHxW color image (or a batch of them)."""
    x = torch.as_tensor(np.asarray(color, dtype=np.float32))
    single = x.dim() == 3
    if single:
        x = x[None]
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected 3xHxW color input, got {tuple(x.shape)}")
    with torch.no_grad():
        out = backbone(x.to(next(backbone.parameters()).dtype))
    out = out.numpy()
    return out[0] if single else out
