"""Run configuration shared by every command.

Values come from, in increasing priority: the defaults below, a flat YAML
file and command-line flags. The seed falls back to the LMLCC_SEED
environment variable (a .env file in the working directory is loaded) and
then to 0.

"""
from dataclasses import asdict, dataclass
from typing import Any, Mapping, Optional, Tuple, Union, get_args, get_origin
from typing import get_type_hints
import logging
import os

import yaml
from dotenv import load_dotenv

from os.path import join

from .errors import ConfigError
from .preprocess import TARGET_SPACING
from .torch.huwindow import DEFAULT_TAU
from .torch.models import BackboneConfig, LmlccConfig
from .torch.train_binary_model import TrainConfig
from .utils import require_file

logger = logging.getLogger(__name__)

SEED_ENV = 'LMLCC_SEED'


@dataclass
class RunConfig:
    # Reproducibility.
    seed: Optional[int] = None

    # Preprocessing.
    side: int = 16
    target_spacing: Tuple[float, ...] = TARGET_SPACING
    augment: bool = True
    test_frac: float = 0.2
    val_frac: float = 0.2

    # Training.
    epochs: int = 200
    batch_size: int = 68
    lr: float = 1e-4
    lr_factor: float = 0.5
    lr_patience: int = 10
    min_lr: float = 1e-6
    early_stop_patience: Optional[int] = None

    # Model.
    mode: str = 'lmlcc'
    scale: str = 'desk'
    branches: int = 3
    init: str = 'constant'
    cuts: str = 'learnable'
    include_original: bool = False
    tau: float = DEFAULT_TAU
    fixed_cuts_hu: Optional[Tuple[float, ...]] = None

    # Evaluation and pseudo-labeling.
    threshold: float = 0.5
    confidence: float = 0.9
    max_rounds: int = 10
    min_new: int = 5

    # Phantoms.
    n_benign: int = 200
    n_malignant: int = 200
    n_unlabeled: int = 0

    # Runtime.
    num_workers: int = 1
    device: str = 'cpu'

    # Paths.
    ratings: Optional[str] = None
    manifest: Optional[str] = None
    volumes_dir: Optional[str] = None
    patches_dir: Optional[str] = None
    out_dir: str = '.'
    checkpoint: Optional[str] = None

    def __post_init__(self):
        choices = {
            'mode': ('backbone', 'lmlcc'),
            'scale': ('full', 'desk'),
            'init': ('constant', 'random'),
            'cuts': ('learnable', 'fixed'),
        }

        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f'{key} must be one of {allowed}, got '
                                  f'{getattr(self, key)!r}')

        if self.fixed_cuts_hu is not None and self.cuts != 'fixed':
            raise ConfigError('fixed_cuts_hu requires cuts: fixed')
        if self.mode == 'backbone' and (self.include_original
                                        or self.fixed_cuts_hu is not None):
            raise ConfigError('window options need mode: lmlcc')

    @property
    def resolved_seed(self) -> int:
        return 0 if self.seed is None else self.seed

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig.for_scale(self.scale, self.side)

    def lmlcc_config(self) -> LmlccConfig:
        return LmlccConfig(
            n_branches=self.branches, include_original=self.include_original,
            cuts_mode=self.cuts, init=self.init,
            backbone=self.backbone_config(), tau=self.tau,
            fixed_cuts_hu=self.fixed_cuts_hu
        )

    def model_config(self) -> dict:
        """Dictionary accepted by ``build_model``."""
        if self.mode == 'backbone':
            return {'model': 'backbone',
                    'backbone': self.backbone_config().to_dict()}

        return {'model': 'lmlcc', 'lmlcc': self.lmlcc_config().to_dict()}

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            lr_factor=self.lr_factor, lr_patience=self.lr_patience,
            min_lr=self.min_lr, seed=self.resolved_seed,
            early_stop_patience=self.early_stop_patience, device=self.device,
            num_workers=0
        )

    def to_dict(self) -> dict:
        d = asdict(self)

        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)

        return d


_HINTS = get_type_hints(RunConfig)


def _parse_bool(key: str, value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ('true', 'false'):
        return value.lower() == 'true'

    raise ConfigError(f'{key} must be true or false, got {value!r}')


def coerce_value(key: str, value: Any):
    """Cast a raw value (YAML scalar or flag string) to the type of key."""
    if key not in _HINTS:
        raise ConfigError(f'unknown config key: {key}')

    tp = _HINTS[key]

    if get_origin(tp) is Union:
        if value is None or value == '':
            return None

        tp = next(a for a in get_args(tp) if a is not type(None))

    try:
        if tp is bool:
            return _parse_bool(key, value)
        if get_origin(tp) is tuple:
            if isinstance(value, str):
                value = [v for v in value.replace(',', ' ').split() if v]

            return tuple(float(v) for v in value)
        if tp is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)

        return tp(value)
    except (TypeError, ValueError):
        raise ConfigError(f'invalid value for {key}: {value!r}')


def read_config_file(fp: str) -> dict:
    """Read a flat YAML mapping, rejecting unknown keys."""
    with open(require_file(fp), 'r') as fh:
        data = yaml.safe_load(fh) or {}

    if not isinstance(data, dict):
        raise ConfigError(f'{fp}: config file must be a flat mapping')

    return data


def load_config(fp: Optional[str] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve the run configuration.

    Args:
        fp: Optional YAML config file.
        overrides: Values of the flags the user actually passed.

    Raises:
        ConfigError: Unknown key or invalid value.

    """
    values = {}

    for source in (read_config_file(fp) if fp else {}, overrides or {}):
        for key, value in source.items():
            values[key] = coerce_value(key, value)

    if values.get('seed') is None:
        load_dotenv(dotenv_path=join(os.getcwd(), '.env'))
        env_seed = os.getenv(SEED_ENV)

        if env_seed:
            values['seed'] = coerce_value('seed', env_seed)

    cfg = RunConfig(**values)
    cfg.seed = cfg.resolved_seed

    return cfg


def write_config(cfg: RunConfig, fp: str):
    """Write the resolved configuration as YAML, overwriting."""
    with open(fp, 'w') as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
