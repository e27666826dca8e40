"""Small convolutional feature extractor trained from scratch.

Maps a grayscale image to a W x H x C prototype feature map. Each block is
conv3x3 (stride 1, pad 1) -> layer norm over channels -> relu -> average
pooling with the block's stride. The toy default turns a 32x32 input into
a 4x4x32 map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, DimensionError


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 32
    channels_in: int = 1
    blocks: tuple = ((8, 2), (16, 2), (32, 2))   # (out_channels, pool stride) per block
    feature_channels: int = 32
    feature_side: int = 4
    pool: str = "avg"   # "avg" | "max"

    def validate(self):
        if not self.blocks:
            raise ConfigError("backbone: at least one block is required")
        if self.pool not in ("max", "avg"):
            raise ConfigError(f"backbone: unknown pool '{self.pool}'")
        if self.feature_channels < 8:
            raise ConfigError(f"backbone: feature_channels must be >= 8, got {self.feature_channels}")
        if self.feature_side < 2:
            raise ConfigError(f"backbone: feature_side must be >= 2, got {self.feature_side}")
        side = self.input_size
        for i, (out_ch, stride) in enumerate(self.blocks):
            if out_ch < 1 or stride < 1:
                raise ConfigError(f"backbone: block {i} has invalid (channels, stride) "
                                  f"({out_ch}, {stride})")
            if side % stride != 0:
                raise ConfigError(f"backbone: block {i} stride {stride} does not divide "
                                  f"spatial side {side}")
            side //= stride
        if side != self.feature_side:
            raise ConfigError(f"backbone: blocks map input {self.input_size} to side {side}, "
                              f"expected feature_side {self.feature_side}")
        if self.blocks[-1][0] != self.feature_channels:
            raise ConfigError(f"backbone: last block emits {self.blocks[-1][0]} channels, "
                              f"expected feature_channels {self.feature_channels}")


@dataclass
class PrototypeFeature:
    """One image's W x H x C feature map plus the sample it came from."""
    values: Tensor
    source_id: str = ""


def init_backbone(config: BackboneConfig, seed: int) -> dict[str, Tensor]:
    """Kaiming-style fan-in scaled init, deterministic under ``seed``."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([0x6B61, seed]))
    params: dict[str, Tensor] = {}
    cin = config.channels_in
    for i, (cout, _stride) in enumerate(config.blocks):
        fan_in = cin * 9
        params[f"block{i}.kernel"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3)), requires_grad=True)
        params[f"block{i}.gamma"] = Tensor(np.ones(cout), requires_grad=True)
        params[f"block{i}.beta"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    return params


def _avg_pool(x: Tensor, stride: int) -> Tensor:
    # (B,C,H,W) -> (B,C,H/s,W/s) via reshape + mean over the pooling windows
    b, c, h, w = x.shape
    blocks = ad.reshape(x, (b, c, h // stride, stride, w // stride, stride))
    return ad.mean(blocks, axis=(3, 5))


def extract_features(images, params: dict[str, Tensor], config: BackboneConfig) -> Tensor:
    """Run the backbone; returns the batch of prototype maps (B, W, H, C)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != config.channels_in or \
            x.shape[2] != config.input_size or x.shape[3] != config.input_size:
        raise DimensionError(f"backbone: expected images (B,{config.channels_in},"
                             f"{config.input_size},{config.input_size}), got {x.shape}")
    for i, (cout, stride) in enumerate(config.blocks):
        x = ad.conv2d(x, params[f"block{i}.kernel"], stride=1, padding=1)
        x = ad.permute(x, (0, 2, 3, 1))                     # channels last for the norm
        x = ad.layer_norm(x, params[f"block{i}.gamma"], params[f"block{i}.beta"])
        x = ad.relu(x)
        x = ad.permute(x, (0, 3, 1, 2))
        if stride > 1:
            x = ad.max_pool2(x, stride) if config.pool == "max" else _avg_pool(x, stride)
    return ad.permute(x, (0, 2, 3, 1))                      # (B, W, H, C)


def pooled_feature(feature_maps: Tensor) -> Tensor:
    """Spatial mean of prototype maps (..., W, H, C) -> (..., C)."""
    nd = feature_maps.ndim
    return ad.mean(feature_maps, axis=(nd - 3, nd - 2))


def extract_prototypes(images, params, config: BackboneConfig,
                       source_ids=None) -> list[PrototypeFeature]:
    """Per-sample view of :func:`extract_features` as PrototypeFeature records."""
    feats = extract_features(images, params, config)
    n = feats.shape[0]
    ids = list(source_ids) if source_ids is not None else [""] * n
    if len(ids) != n:
        raise DimensionError(f"extract_prototypes: {len(ids)} ids for {n} images")
    return [PrototypeFeature(values=ad.index_axis(feats, 0, i), source_id=ids[i])
            for i in range(n)]
