from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from ...errors import ConfigError
from ..huwindow import (
    DEFAULT_TAU, CutInit, CutMode, CutVector, DynamicRangeLayer
)
from .Backbone3D import BackboneConfig, DenseHead, FeatureExtractor, init_weights


@dataclass
class LmlccConfig:
    """Multi-branch network configuration.

    Each branch (and the original input when include_original) gets its own
    feature extractor; features are concatenated before one dense head.
    fixed_cuts_hu optionally pins the interior cuts in HU, which implies
    fixed cuts.

    """
    n_branches: int = 3
    include_original: bool = False
    cuts_mode: CutMode = CutMode.LEARNABLE
    init: CutInit = CutInit.CONSTANT
    backbone: BackboneConfig = field(default_factory=BackboneConfig.desk)
    tau: float = DEFAULT_TAU
    fixed_cuts_hu: Optional[Tuple[float, ...]] = None
    shared_weights: bool = False

    def __post_init__(self):
        self.cuts_mode = CutMode(self.cuts_mode)
        self.init = CutInit(self.init)

        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)

        if self.n_branches < 1:
            raise ConfigError(f'n_branches must be >= 1, got '
                              f'{self.n_branches}')
        if self.shared_weights:
            raise ConfigError('branches never share feature extractors')

        if self.fixed_cuts_hu is not None:
            self.fixed_cuts_hu = tuple(self.fixed_cuts_hu)

            if len(self.fixed_cuts_hu) != self.n_branches - 1:
                raise ConfigError(
                    f'{self.n_branches} branches need '
                    f'{self.n_branches - 1} fixed cuts, got '
                    f'{len(self.fixed_cuts_hu)}'
                )

    @property
    def n_paths(self) -> int:
        return self.n_branches + int(self.include_original)

    def cut_vector(self, generator: Optional[torch.Generator] = None
                   ) -> CutVector:
        if self.fixed_cuts_hu is not None:
            return CutVector.from_hu(self.fixed_cuts_hu, self.tau,
                                     CutMode.FIXED)

        return CutVector.initialize(self.n_branches, self.init,
                                    self.cuts_mode, self.tau, generator)

    def to_dict(self) -> dict:
        return {
            'n_branches': self.n_branches,
            'include_original': self.include_original,
            'cuts_mode': self.cuts_mode.value,
            'init': self.init.value,
            'backbone': self.backbone.to_dict(),
            'tau': self.tau,
            'fixed_cuts_hu': (None if self.fixed_cuts_hu is None
                              else list(self.fixed_cuts_hu)),
        }


class LmlccNet(nn.Module):
    """Window split => per-branch feature extractors => concat => dense head.

    Input [B, 1, D, H, W] normalised patches, output probabilities [B].

    """
    def __init__(self, cfg: LmlccConfig,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg = cfg
        self.window = DynamicRangeLayer(cfg.cut_vector(generator),
                                        include_original=cfg.include_original)
        self.extractors = nn.ModuleList(
            [FeatureExtractor(cfg.backbone) for _ in range(cfg.n_paths)]
        )
        self.head = DenseHead(cfg.n_paths * cfg.backbone.feature_width,
                              cfg.backbone.dense_widths)

        init_weights(self.extractors)
        init_weights(self.head)

    def config_dict(self) -> dict:
        return {'model': 'lmlcc', 'lmlcc': self.cfg.to_dict()}

    def learned_cuts(self) -> List[float]:
        return self.window.cuts().tolist()

    def logits(self, x):
        branches = self.window(x)
        features = [
            extractor(branches[:, i:i + 1]).flatten(1)
            for i, extractor in enumerate(self.extractors)
        ]

        return self.head(torch.cat(features, 1))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))
