"""Learned color quantizers.

Tensors follow the torch layout: images ``(B, 3, H, W)`` in ``[0, 1]`` and
probability maps ``(B, C, H, W)``.  Two forward paths exist for every
model: the hard test-time path (argmax index map, mean-color palette,
table look-up) and the soft train-time path (probability-weighted palette
and probability-weighted reconstruction) used for gradient descent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .classic import IndexedImage
from .errors import ConfigError


@dataclass(frozen=True)
class BackboneConfig:
    mode: str = "colorcnn_plus"  # colorcnn | colorcnn_plus
    kind: str = "unet"  # unet | dncnn
    levels: int = 3
    base_channels: int = 64
    colors: int | None = None  # fixed C of a plain ColorCNN
    bottleneck_dim: int | None = 16  # None removes the bottleneck (ColorCNN+)
    feature_dim: int = 256  # D
    top_k: int | None = 4  # None keeps every channel in the softmax

    def __post_init__(self):
        if self.mode not in ("colorcnn", "colorcnn_plus"):
            raise ConfigError(f"unknown quantizer mode {self.mode!r}")
        if self.kind not in ("unet", "dncnn"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.levels < 1 or self.base_channels < 1:
            raise ConfigError("levels and base_channels must be >= 1")
        if self.mode == "colorcnn":
            if not self.colors or self.colors < 1:
                raise ConfigError("a ColorCNN needs a fixed color count >= 1")
        else:
            if self.bottleneck_dim is not None and not 0 < self.bottleneck_dim < self.feature_dim:
                raise ConfigError("bottleneck_dim must lie in (0, feature_dim)")
            if self.top_k is not None and self.top_k < 1:
                raise ConfigError("top_k must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


@dataclass
class SoftQuantOutput:
    image: torch.Tensor  # (B, 3, H, W)
    palette: torch.Tensor  # (B, C, 3)
    prob_map: torch.Tensor  # (B, C, H, W)


@dataclass
class HardQuantOutput:
    index_map: torch.Tensor  # (B, H, W) long
    palette: torch.Tensor  # (B, C, 3); unused entries are 0
    image: torch.Tensor  # (B, 3, H, W)
    prob_map: torch.Tensor

    def to_indexed(self) -> list[IndexedImage]:
        c = self.palette.shape[1]
        idx = self.index_map.cpu().numpy()
        pal = self.palette.detach().double().cpu().numpy()
        return [IndexedImage(idx[i], pal[i], c) for i in range(len(idx))]


# ---------------------------------------------------------------------------
# functional pieces

@lru_cache(maxsize=64)
def _pool_matrix(d: int, c: int) -> torch.Tensor:
    mat = torch.zeros(c, d, dtype=torch.float64)
    for k in range(c):
        lo, hi = (k * d) // c, ((k + 1) * d) // c
        mat[k, lo:hi] = 1.0 / (hi - lo)
    return mat


def pool_channels(h: torch.Tensor, colors: int) -> torch.Tensor:
    """Average ``(B, D, H, W)`` features over ``colors`` contiguous channel slices.

    Slice ``c`` covers channels ``[floor(c*D/C), floor((c+1)*D/C))``.
    """
    d = h.shape[1]
    if not 1 <= colors <= d:
        raise ValueError(f"cannot pool {d} channels into {colors}")
    if colors == d:
        return h
    mat = _pool_matrix(d, colors).to(dtype=h.dtype, device=h.device)
    return torch.einsum("cd,bdhw->bchw", mat, h)


def topk_softmax(logits: torch.Tensor, k: int | None, dim: int = 1) -> torch.Tensor:
    """Softmax over the ``k`` largest entries along ``dim``; other entries are 0.

    Equal logits are ranked by lower index first.
    """
    c = logits.shape[dim]
    if k is None or k >= c:
        return logits.softmax(dim)
    if k < 1:
        raise ValueError("k must be >= 1")
    order = torch.sort(logits.detach(), dim=dim, descending=True, stable=True).indices
    keep = torch.zeros_like(logits, dtype=torch.bool).scatter_(dim, order.narrow(dim, 0, k), True)
    return logits.masked_fill(~keep, float("-inf")).softmax(dim)


def soft_quantize(prob_map: torch.Tensor, image: torch.Tensor) -> SoftQuantOutput:
    """Train-time palette and reconstruction weighted by ``prob_map``."""
    mass = prob_map.sum(dim=(2, 3))  # (B, C)
    weighted = torch.einsum("bkhw,bchw->bkc", prob_map, image)
    palette = torch.where(mass[..., None] > 0,
                          weighted / mass.clamp_min(1e-12)[..., None],
                          torch.zeros_like(weighted))
    soft = torch.einsum("bkc,bkhw->bchw", palette, prob_map)
    return SoftQuantOutput(soft, palette, prob_map)


def hard_quantize(prob_map: torch.Tensor, image: torch.Tensor) -> HardQuantOutput:
    """Test-time argmax assignment with mean-color palette; ties go to lower index."""
    c = prob_map.shape[1]
    index = prob_map.argmax(dim=1)
    onehot = F.one_hot(index, c).permute(0, 3, 1, 2).to(image.dtype)
    count = onehot.sum(dim=(2, 3))
    total = torch.einsum("bkhw,bchw->bkc", onehot, image)
    palette = torch.where(count[..., None] > 0, total / count.clamp_min(1)[..., None],
                          torch.zeros_like(total))
    recon = torch.einsum("bkc,bkhw->bchw", palette, onehot)
    return HardQuantOutput(index, palette, recon, prob_map)


# ---------------------------------------------------------------------------
# networks

def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """U-shaped encoder/decoder returning ``base_channels`` features at input size."""

    def __init__(self, in_channels: int = 3, base_channels: int = 64, levels: int = 3):
        super().__init__()
        self.levels = levels
        widths = [base_channels * 2 ** i for i in range(levels + 1)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths[:-1]:
            self.down.append(_conv_block(cin, w))
            cin = w
        self.bottom = _conv_block(widths[-2], widths[-1])
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for w_hi, w_lo in zip(reversed(widths[1:]), reversed(widths[:-1])):
            self.up.append(nn.ConvTranspose2d(w_hi, w_lo, 2, stride=2))
            self.merge.append(_conv_block(2 * w_lo, w_lo))
        self.out_channels = base_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        step = 2 ** self.levels
        ph, pw = (-h) % step, (-w) % step
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for up, merge, skip in zip(self.up, self.merge, reversed(skips)):
            x = merge(torch.cat([skip, up(x)], dim=1))
        return x[..., :h, :w]


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.kind == "dncnn":
        raise ConfigError("the dncnn backbone is an interface slot only; use kind='unet'")
    return UNet(3, cfg.base_channels, cfg.levels)


class QuantNet(nn.Module):
    """Shared plumbing; subclasses define :meth:`prob_map`."""

    config: BackboneConfig

    def supports(self, colors: int) -> bool:
        raise NotImplementedError

    def _check(self, image: torch.Tensor, colors: int):
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(image.shape)}")
        if not self.supports(colors):
            raise ConfigError(f"{self.config.mode} model does not support {colors} colors")

    def prob_map(self, image: torch.Tensor, colors: int) -> torch.Tensor:
        raise NotImplementedError

    def forward_train(self, image: torch.Tensor, colors: int) -> SoftQuantOutput:
        self._check(image, colors)
        return soft_quantize(self.prob_map(image, colors), image)

    def forward_test(self, image: torch.Tensor, colors: int) -> HardQuantOutput:
        self._check(image, colors)
        return hard_quantize(self.prob_map(image, colors), image)

    def forward(self, image: torch.Tensor, colors: int) -> SoftQuantOutput:
        return self.forward_train(image, colors)


class ColorCNN(QuantNet):
    """Backbone plus a 1x1 convolution emitting a fixed number of color logits."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        if config.mode != "colorcnn":
            raise ConfigError("ColorCNN needs mode='colorcnn'")
        self.config = config
        self.backbone = build_backbone(config)
        self.head = nn.Conv2d(self.backbone.out_channels, config.colors, 1)

    def supports(self, colors: int) -> bool:
        return colors == self.config.colors

    def prob_map(self, image, colors):
        return self.head(self.backbone(image)).softmax(dim=1)


class ColorCNNPlus(QuantNet):
    """Backbone, low-dimensional bottleneck and a D-channel feature head.

    One model serves every color count up to D: the D channels are average
    pooled down to C and a top-K softmax turns them into a probability map.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        if config.mode != "colorcnn_plus":
            raise ConfigError("ColorCNNPlus needs mode='colorcnn_plus'")
        self.config = config
        self.backbone = build_backbone(config)
        width = self.backbone.out_channels
        if config.bottleneck_dim is None:
            self.bottleneck = nn.Identity()
        else:
            self.bottleneck = nn.Sequential(
                nn.Conv2d(width, config.bottleneck_dim, 1, bias=False),
                nn.BatchNorm2d(config.bottleneck_dim), nn.ReLU(inplace=True))
            width = config.bottleneck_dim
        self.head = nn.Conv2d(width, config.feature_dim, 1)

    def supports(self, colors: int) -> bool:
        return 1 <= colors <= self.config.feature_dim

    def features(self, image: torch.Tensor) -> torch.Tensor:
        """The D-channel feature map shared by every color count."""
        return self.head(self.bottleneck(self.backbone(image)))

    def prob_from_features(self, h: torch.Tensor, colors: int) -> torch.Tensor:
        k = self.config.top_k
        return topk_softmax(pool_channels(h, colors), None if k is None else min(k, colors))

    def prob_map(self, image, colors):
        return self.prob_from_features(self.features(image), colors)

    def forward_test_multi(self, image: torch.Tensor, colors: list[int]) -> dict[int, HardQuantOutput]:
        """Quantize to several color counts from one backbone pass."""
        for c in colors:
            self._check(image, c)
        h = self.features(image)
        return {c: hard_quantize(self.prob_from_features(h, c), image) for c in colors}


def build_quantnet(config: BackboneConfig) -> QuantNet:
    return ColorCNN(config) if config.mode == "colorcnn" else ColorCNNPlus(config)


def indexed_from_prob(prob_map: np.ndarray, image: np.ndarray) -> IndexedImage:
    """Hard quantization of one ``(H, W, C)`` map / ``(H, W, 3)`` image pair."""
    m = torch.as_tensor(prob_map, dtype=torch.float64).permute(2, 0, 1)[None]
    x = torch.as_tensor(image, dtype=torch.float64).permute(2, 0, 1)[None]
    return hard_quantize(m, x).to_indexed()[0]
