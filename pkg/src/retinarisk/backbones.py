"""Image encoders: a strided conv pyramid and a patch transformer.

Both work on channel-last batches ``[B, S, S, C]``. Shape inference is
available without allocating weights, so paper-scale contracts can be
checked cheaply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ConfigurationError, Tensor, concat, conv2d, max_pool2d
from .numerics.module import LayerNorm, Linear, Module, MultiHeadAttention, uniform_init


@dataclass(frozen=True)
class CnnConfig:
    input_size: int = 32
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    kernel_size: int = 3
    output_grid: int = 4
    # "maxpool": stride-1 conv then 2x2 max pool; "stride": stride-2 conv
    downsample: str = "maxpool"

    def __post_init__(self):
        if self.downsample not in ("maxpool", "stride"):
            raise ConfigurationError("downsample must be 'maxpool' or 'stride'")
        if not self.channels or min(self.channels) < 1:
            raise ConfigurationError("cnn stage widths must be positive")
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("cnn kernel size must be odd")
        if self.stage_sizes()[-1] != self.output_grid:
            raise ConfigurationError(
                f"{len(self.channels)} stride-2 stages take {self.input_size}px to "
                f"{self.stage_sizes()[-1]}, not the requested {self.output_grid}")

    @property
    def output_channels(self) -> int:
        return self.channels[-1]

    def stage_sizes(self) -> list[int]:
        sizes, s = [], self.input_size
        for _ in self.channels:
            if self.downsample == "stride":
                s = (s + 2 * (self.kernel_size // 2) - self.kernel_size) // 2 + 1
            else:
                s = s // 2
            sizes.append(s)
        return sizes

    def output_shape(self) -> tuple[int, int, int]:
        return (self.output_grid, self.output_grid, self.output_channels)

    def param_count(self) -> int:
        total, cin = 0, self.in_channels
        for cout in self.channels:
            total += self.kernel_size ** 2 * cin * cout + cout
            cin = cout
        return total


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    in_channels: int = 3
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.depth < 0:
            raise ConfigurationError("depth must be non-negative")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.in_channels

    @property
    def mlp_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    def output_shape(self) -> tuple[int, int]:
        return (self.num_tokens, self.embed_dim)

    def block_param_count(self) -> int:
        d, h = self.embed_dim, self.mlp_dim
        return (2 * LayerNorm.count(d) + MultiHeadAttention.count(d)
                + Linear.count(d, h) + Linear.count(h, d))

    def param_count(self) -> int:
        d = self.embed_dim
        embed = Linear.count(self.patch_dim, d) + d + self.num_tokens * d
        return embed + self.depth * self.block_param_count() + LayerNorm.count(d)


PAPER_CNN = CnnConfig(input_size=224, channels=(64, 128, 256, 512, 2560), output_grid=7)
DESK_CNN = CnnConfig()
PAPER_VIT = VitConfig(image_size=224, patch_size=16, embed_dim=768, depth=12, heads=12)
DESK_VIT = VitConfig()


def _check_batch(img: Tensor, size: int, channels: int) -> Tensor:
    if img.ndim == 3:
        img = img.reshape((1,) + img.shape)
    if img.ndim != 4 or img.shape[1:] != (size, size, channels):
        raise ConfigurationError(f"expected images [B,{size},{size},{channels}], got {img.shape}")
    return img


class ConvBackbone(Module):
    """conv(k x k) + ReLU per stage with 2x downsampling, ``S`` down to ``G``."""

    def __init__(self, cfg: CnnConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        cin, k = cfg.in_channels, cfg.kernel_size
        for i, cout in enumerate(cfg.channels):
            self.param(f"conv{i}.weight", uniform_init(rng, (k, k, cin, cout), k * k * cin, math.sqrt(2)))
            self.param(f"conv{i}.bias", np.zeros(cout))
            cin = cout

    def __call__(self, img: Tensor) -> Tensor:
        x = _check_batch(img, self.cfg.input_size, self.cfg.in_channels)
        pad = self.cfg.kernel_size // 2
        pool = self.cfg.downsample == "maxpool"
        for i in range(len(self.cfg.channels)):
            x = conv2d(x, self._params[f"conv{i}.weight"], self._params[f"conv{i}.bias"],
                       stride=1 if pool else 2, pad=pad).relu()
            if pool:
                x = max_pool2d(x, 2)
        return x


def cnn_extract(img: Tensor, cfg: CnnConfig, backbone: ConvBackbone) -> Tensor:
    if backbone.cfg != cfg:
        raise ConfigurationError("backbone was built for a different CnnConfig")
    return backbone(img)


class PatchEmbedding(Module):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.proj = self.child("proj", Linear(cfg.patch_dim, d, rng))
        self.cls_token = self.param("cls_token", rng.normal(0.0, 0.02, size=d))
        self.pos_table = self.param("pos_table", rng.normal(0.0, 0.02, size=(cfg.num_tokens, d)))

    def patches(self, img: Tensor) -> Tensor:
        """``[B, S, S, C] -> [B, N, p*p*C]`` in row-major patch order."""
        c = self.cfg
        x = _check_batch(img, c.image_size, c.in_channels)
        b, g, p = x.shape[0], c.image_size // c.patch_size, c.patch_size
        x = x.reshape(b, g, p, g, p, c.in_channels).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, c.patch_dim)

    def __call__(self, img: Tensor) -> Tensor:
        tokens = self.proj(self.patches(img))
        b = tokens.shape[0]
        cls = self.cls_token.reshape(1, 1, self.cfg.embed_dim) + np.zeros((b, 1, self.cfg.embed_dim), dtype=self.cls_token.data.dtype)
        return concat([cls, tokens], axis=1) + self.pos_table


def patch_embed(img: Tensor, cfg: VitConfig, emb: PatchEmbedding) -> Tensor:
    if emb.cfg != cfg:
        raise ConfigurationError("embedding was built for a different VitConfig")
    return emb(img)


class EncoderBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x)) with GELU."""

    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.ln1 = self.child("ln1", LayerNorm(d))
        self.attn = self.child("attn", MultiHeadAttention(d, cfg.heads, rng))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.fc1 = self.child("fc1", Linear(d, cfg.mlp_dim, rng))
        self.fc2 = self.child("fc2", Linear(cfg.mlp_dim, d, rng))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h)
        return x + self.fc2(self.fc1(self.ln2(x)).gelu())


class TransformerEncoder(Module):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.blocks = [self.child(f"block{i}", EncoderBlock(cfg, rng)) for i in range(cfg.depth)]

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-1] != self.cfg.embed_dim:
            raise ConfigurationError(
                f"token width {tokens.shape[-1]} != embed_dim {self.cfg.embed_dim}")
        for block in self.blocks:
            tokens = block(tokens)
        return tokens


def transformer_encode(tokens: Tensor, cfg: VitConfig, encoder: TransformerEncoder) -> Tensor:
    if encoder.cfg != cfg:
        raise ConfigurationError("encoder was built for a different VitConfig")
    return encoder(tokens)


class VisionTransformer(Module):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.embed = self.child("embed", PatchEmbedding(cfg, rng))
        self.encoder = self.child("encoder", TransformerEncoder(cfg, rng))
        # pre-norm stacks end with a norm so downstream attention sees unit-scale tokens
        self.norm = self.child("norm", LayerNorm(cfg.embed_dim))

    def __call__(self, img: Tensor) -> Tensor:
        return self.norm(self.encoder(self.embed(img)))


def param_count(config) -> int:
    """Exact learnable-scalar count for a config (no allocation)."""
    if hasattr(config, "param_count"):
        return int(config.param_count())
    raise TypeError(f"no parameter tally for {type(config).__name__}")
