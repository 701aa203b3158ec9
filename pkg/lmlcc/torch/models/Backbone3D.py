from dataclasses import asdict, dataclass
from typing import Tuple

import torch
import torch.nn as nn

from ...errors import ConfigError
from ..diffkit import BN_EPS, BN_MOMENTUM, DROPOUT_RATE

FULL_CHANNELS = (16, 16, 16, 32, 32, 32, 64, 64, 64, 128, 128, 128)
FULL_DENSE = (512, 256, 128, 64, 1)


@dataclass
class BackboneConfig:
    """Layer layout of the 3D CNN.

    Conv, pool and dropout positions are 0-based conv layer indices; a pool
    and / or dropout follows the conv block with that index.

    """
    conv_channels: Tuple[int, ...] = FULL_CHANNELS
    pool_after: Tuple[int, ...] = (2, 5, 8, 11)
    dropout_after: Tuple[int, ...] = (5, 11)
    dense_widths: Tuple[int, ...] = FULL_DENSE
    patch_side: int = 32
    scale: str = 'full'
    dropout_rate: float = DROPOUT_RATE

    @classmethod
    def full(cls, patch_side: int = 32) -> 'BackboneConfig':
        """Twelve convs, four pools, two dropouts, five dense layers."""
        return cls(patch_side=patch_side)

    @classmethod
    def desk(cls, patch_side: int = 16) -> 'BackboneConfig':
        """Four convs, two pools, one dropout, two dense layers (CPU scale)."""
        return cls(conv_channels=(4, 4, 8, 8), pool_after=(1, 3),
                   dropout_after=(3,), dense_widths=(32, 1),
                   patch_side=patch_side, scale='desk')

    @classmethod
    def for_scale(cls, scale: str, patch_side: int) -> 'BackboneConfig':
        if scale == 'full':
            return cls.full(patch_side)
        if scale == 'desk':
            return cls.desk(patch_side)

        raise ConfigError(f'scale must be full or desk, got {scale}')

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.pool_after = tuple(self.pool_after)
        self.dropout_after = tuple(self.dropout_after)
        self.dense_widths = tuple(self.dense_widths)

        n_conv = len(self.conv_channels)

        if n_conv < 1:
            raise ConfigError('at least one conv layer is required')
        if any(not 0 <= i < n_conv
               for i in self.pool_after + self.dropout_after):
            raise ConfigError('pool and dropout positions must index conv '
                              'layers')
        if not self.dense_widths or self.dense_widths[-1] != 1:
            raise ConfigError('dense widths must end in 1')
        if self.patch_side % 2**len(self.pool_after):
            raise ConfigError(
                f'patch side {self.patch_side} is not divisible by '
                f'2^{len(self.pool_after)}'
            )

    @property
    def feature_width(self) -> int:
        """Flattened size of the feature extractor output."""
        side = self.patch_side // 2**len(self.pool_after)
        return self.conv_channels[-1] * side**3

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock(nn.Sequential):
    """conv 3x3x3 => BN => ReLU"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.BatchNorm3d(out_channels, eps=BN_EPS,
                           momentum=1 - BN_MOMENTUM),
            nn.ReLU()
        )


class FeatureExtractor(nn.Module):
    """Convolutional part of the backbone, one input channel."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        layers = []
        in_channels = 1

        for i, out_channels in enumerate(cfg.conv_channels):
            layers.append(ConvBlock(in_channels, out_channels))

            if i in cfg.pool_after:
                layers.append(nn.MaxPool3d(kernel_size=2, stride=2))
            if i in cfg.dropout_after:
                layers.append(nn.Dropout(cfg.dropout_rate))

            in_channels = out_channels

        self.layers = nn.Sequential(*layers)

    @property
    def last_activation(self) -> nn.Module:
        """ReLU of the last conv block (target layer of Grad-CAM)."""
        return [m for m in self.layers if isinstance(m, ConvBlock)][-1][2]

    def forward(self, x):
        return self.layers(x)


class DenseHead(nn.Module):
    """Fully connected stack ending in a single logit."""

    def __init__(self, in_features: int, widths: Tuple[int, ...]):
        super().__init__()
        layers = []

        for i, width in enumerate(widths):
            layers.append(nn.Linear(in_features, width))

            if i < len(widths) - 1:
                layers.append(nn.ReLU())

            in_features = width

        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x).squeeze(1)


def init_weights(module: nn.Module):
    """He-uniform conv and dense weights, zero biases, unit BN scale."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity='relu')
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Backbone3D(nn.Module):
    """Single-path 3D CNN: patch [B, 1, D, H, W] => malignancy probability."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.features = FeatureExtractor(cfg)
        self.head = DenseHead(cfg.feature_width, cfg.dense_widths)
        init_weights(self)

    @property
    def extractors(self):
        return [self.features]

    def config_dict(self) -> dict:
        return {'model': 'backbone', 'backbone': self.cfg.to_dict()}

    def logits(self, x):
        return self.head(self.features(x).flatten(1))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))
