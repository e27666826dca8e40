"""Assembled model: backbone + conditional kernel + re-representation params."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .backbone import BackboneConfig, extract_features, init_backbone
from .conditional import ConvKernel4D, init_conv_kernel
from .exceptions import ConfigError
from .rerepresent import STRUCTURES, init_rerep_params


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    kernel_shape: tuple = (3, 3, 3, 3)
    structure: str = "siamese"

    def validate(self):
        self.backbone.validate()
        if len(self.kernel_shape) != 4 or any(d % 2 == 0 or d < 1 for d in self.kernel_shape):
            raise ConfigError(f"model: kernel_shape must be four odd positive ints, "
                              f"got {self.kernel_shape}")
        if self.structure not in STRUCTURES:
            raise ConfigError(f"model: unknown structure '{self.structure}'")

    @property
    def channels(self) -> int:
        return self.backbone.feature_channels

    def to_dict(self) -> dict:
        return {
            "backbone": {
                "input_size": self.backbone.input_size,
                "channels_in": self.backbone.channels_in,
                "blocks": [list(b) for b in self.backbone.blocks],
                "feature_channels": self.backbone.feature_channels,
                "feature_side": self.backbone.feature_side,
                "pool": self.backbone.pool,
            },
            "kernel_shape": list(self.kernel_shape),
            "structure": self.structure,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = d["backbone"]
        return cls(
            backbone=BackboneConfig(
                input_size=bb["input_size"],
                channels_in=bb["channels_in"],
                blocks=tuple(tuple(b) for b in bb["blocks"]),
                feature_channels=bb["feature_channels"],
                feature_side=bb["feature_side"],
                pool=bb.get("pool", "avg"),
            ),
            kernel_shape=tuple(d["kernel_shape"]),
            structure=d["structure"],
        )


class Model:
    """Holds the named trainable tensors and the config they were built for."""

    def __init__(self, config: ModelConfig, backbone: dict[str, Tensor],
                 kernel: ConvKernel4D, rerep: dict[str, Tensor]):
        self.config = config
        self.backbone = backbone
        self.kernel = kernel
        self.rerep = rerep

    @property
    def structure(self) -> str:
        return self.config.structure

    @classmethod
    def init(cls, config: ModelConfig | None = None, seed: int = 0) -> "Model":
        config = config or ModelConfig()
        config.validate()
        reduction = config.backbone.feature_side ** 2 * config.channels
        return cls(
            config=config,
            backbone=init_backbone(config.backbone, seed),
            kernel=init_conv_kernel(config.kernel_shape, seed, reduction_size=reduction),
            rerep=init_rerep_params(config.channels, config.structure, seed),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.items()}
        out["conditional.kernel"] = self.kernel.weights
        out["conditional.bias"] = self.kernel.bias
        out.update({f"rerep.{k}": v for k, v in self.rerep.items()})
        return out

    def features(self, images) -> Tensor:
        """Backbone forward: images -> (B, W, H, C) prototype maps."""
        return extract_features(images, self.backbone, self.config.backbone)

    def load_parameters(self, values: dict[str, np.ndarray]):
        """Overwrite every named parameter; shapes must match exactly."""
        from .exceptions import DimensionError
        params = self.parameters()
        missing = sorted(set(params) - set(values))
        extra = sorted(set(values) - set(params))
        if missing or extra:
            raise DimensionError(f"model: parameter names do not match checkpoint "
                                 f"(missing {missing}, unexpected {extra})")
        for name, p in params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DimensionError(f"model: parameter '{name}' has shape {p.data.shape}, "
                                     f"checkpoint holds {arr.shape}")
            p.data = arr.copy()
