from typing import Optional, Union

import torch

from ...errors import ConfigError
from .Backbone3D import BackboneConfig, Backbone3D
from .LmlccNet import LmlccConfig, LmlccNet

Model = Union[Backbone3D, LmlccNet]


def build_backbone(cfg: BackboneConfig) -> Backbone3D:
    """Backbone 3D CNN in train mode."""
    return Backbone3D(cfg).train()


def build_lmlcc(cfg: LmlccConfig,
                generator: Optional[torch.Generator] = None) -> LmlccNet:
    """Multi-branch network in train mode."""
    return LmlccNet(cfg, generator=generator).train()


def build_model(config: dict) -> Model:
    """Rebuild a model from the dictionary returned by ``config_dict``."""
    kind = config.get('model')

    if kind == 'backbone':
        return build_backbone(BackboneConfig(**config['backbone']))
    if kind == 'lmlcc':
        return build_lmlcc(LmlccConfig(**config['lmlcc']))

    raise ConfigError(f'unknown model type: {kind}')
