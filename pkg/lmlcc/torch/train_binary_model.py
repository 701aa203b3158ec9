from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence
import copy
import logging

import numpy as np
import pandas as pd
import torch
from torch.optim.lr_scheduler import ReduceLROnPlateau
from torch.utils.data import DataLoader
from tqdm import tqdm

from os.path import join

from ..errors import ConfigError, InsufficientDataError, NumericalError
from ..preprocess import Patch
from ..utils import create_dirs, seed_everything
from .EarlyStopping import EarlyStopping
from .checkpoint import save_checkpoint
from .datasets import PatchDataset
from .diffkit import bce_loss
from .metrics import binary_accuracy
from .models import Model

logger = logging.getLogger(__name__)

EPOCH_COLUMNS = ['epoch', 'lr', 'train_loss', 'train_acc', 'val_loss',
                 'val_acc']


@dataclass
class TrainConfig:
    """Training hyper-parameters.

    The learning rate starts at lr and is multiplied by lr_factor after
    lr_patience epochs without validation loss improvement, never going
    below min_lr.

    """
    epochs: int = 200
    batch_size: int = 68
    lr: float = 1e-4
    lr_factor: float = 0.5
    lr_patience: int = 10
    min_lr: float = 1e-6
    seed: int = 0
    early_stop_patience: Optional[int] = None
    device: str = 'cpu'
    num_workers: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f'epochs must be >= 1, got {self.epochs}')
        if self.batch_size < 1:
            raise ConfigError(f'batch_size must be >= 1, got '
                              f'{self.batch_size}')
        if not 0 < self.min_lr <= self.lr:
            raise ConfigError('learning rates must satisfy 0 < min_lr <= lr')
        if not 0 < self.lr_factor < 1:
            raise ConfigError('lr_factor must lie in (0, 1)')

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    """Outcome of a training run.

    Attributes:
        model: Model holding the best validation loss weights, eval mode.
        history: One row per epoch with EPOCH_COLUMNS.
        best_epoch: Epoch of the best validation loss.
        best_val_loss: Best validation loss.
        stopped_early: Early stopping ended the run.

    """
    model: Model
    history: pd.DataFrame
    best_epoch: int
    best_val_loss: float
    stopped_early: bool = False


def build_optimizer(model: Model, tc: TrainConfig) -> torch.optim.Adam:
    """Adam over the trainable parameters (fixed cuts are buffers)."""
    return torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=tc.lr
    )


def build_scheduler(optimizer: torch.optim.Optimizer,
                    tc: TrainConfig) -> ReduceLROnPlateau:
    """Reduce-on-plateau schedule on the validation loss, floored at min_lr."""
    return ReduceLROnPlateau(optimizer, mode='min', factor=tc.lr_factor,
                             patience=tc.lr_patience, min_lr=tc.min_lr)


def first_nonfinite(model: Model, loss: torch.Tensor,
                    grads: bool = False) -> Optional[str]:
    """Name of the first non-finite tensor: loss, then parameters, then
    gradients."""
    if not torch.isfinite(loss).all():
        return 'loss'

    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            return name

    if grads:
        for name, p in model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                return f'{name}.grad'

    return None


def make_loader(patches: Sequence[Patch], batch_size: int, shuffle: bool,
                seed: int = 0, num_workers: int = 0) -> DataLoader:
    """DataLoader whose shuffling order depends only on seed."""
    generator = torch.Generator().manual_seed(seed)

    return DataLoader(PatchDataset(patches), batch_size=batch_size,
                      shuffle=shuffle, generator=generator,
                      num_workers=num_workers)


def run_epoch(model: Model, loader: DataLoader, device,
              optimizer: Optional[torch.optim.Optimizer] = None,
              verbose: bool = True, desc: str = ''):
    """One pass over a loader; trains when an optimizer is given.

    Returns:
        Sample-weighted mean loss and accuracy.

    """
    training = optimizer is not None
    model.train() if training else model.eval()

    metric = binary_accuracy()
    loss_sum = 0.0
    n = 0

    for sample in tqdm(loader, desc=desc, disable=not verbose, leave=False):
        inputs = sample['image'].to(device)
        targets = sample['label'].to(device)

        if training:
            optimizer.zero_grad()

        with torch.set_grad_enabled(training):
            probs = model(inputs)
            loss = bce_loss(probs, targets.to(probs.dtype))

            name = first_nonfinite(model, loss)

            if name is not None:
                raise NumericalError(f'non-finite value in {name} '
                                     f'({desc or "epoch"})')

            if training:
                loss.backward()
                name = first_nonfinite(model, loss, grads=True)

                if name is not None:
                    raise NumericalError(f'non-finite value in {name}')

                optimizer.step()

        metric.update(probs, targets)
        loss_sum += loss.detach().item() * len(targets)
        n += len(targets)

    return loss_sum / n, metric.compute()


def train(model: Model, train_patches: Sequence[Patch],
          val_patches: Sequence[Patch], tc: TrainConfig,
          save_dir: Optional[str] = None, verbose: bool = True
          ) -> TrainResult:
    """Train a binary malignancy classifier with BCE loss and Adam.

    Args:
        model: Freshly built model.
        train_patches: Labeled training patches.
        val_patches: Labeled validation patches.
        tc: Training configuration.
        save_dir: When given, receives best.ckpt (lowest validation loss),
            last.ckpt and epochs.csv, rewritten every epoch.
        verbose: Log epoch reports and show progress bars.

    Returns:
        Training result, with the best validation weights loaded.

    Raises:
        InsufficientDataError: Empty train or validation set.
        NumericalError: A loss, parameter or gradient became NaN / Inf.

    """
    if not train_patches or not val_patches:
        raise InsufficientDataError(
            f'training needs non-empty train and val sets, got '
            f'{len(train_patches)} / {len(val_patches)}'
        )

    if save_dir is not None:
        create_dirs([save_dir])

    seed_everything(tc.seed)
    device = torch.device(tc.device)
    model.to(device)

    loaders = {
        'train': make_loader(train_patches, tc.batch_size, True, tc.seed,
                             tc.num_workers),
        'val': make_loader(val_patches, tc.batch_size, False, tc.seed,
                           tc.num_workers)
    }

    optimizer = build_optimizer(model, tc)
    scheduler = build_scheduler(optimizer, tc)
    early_stopper = None

    if tc.early_stop_patience is not None:
        early_stopper = EarlyStopping(tc.early_stop_patience, 'min',
                                      verbose=verbose)

    rows: List[dict] = []
    best_loss = np.inf
    best_epoch = 0
    best_state = copy.deepcopy(model.state_dict())
    stopped_early = False

    for epoch in range(1, tc.epochs + 1):
        lr = optimizer.param_groups[0]['lr']
        row = {'epoch': epoch, 'lr': lr}

        for phase in ['train', 'val']:
            loss, acc = run_epoch(
                model, loaders[phase], device,
                optimizer if phase == 'train' else None, verbose=verbose,
                desc=f'epoch {epoch} ({phase})'
            )
            row[f'{phase}_loss'] = loss
            row[f'{phase}_acc'] = acc

            if verbose:
                logger.info(f'Epoch {epoch} of {tc.epochs} ({phase}) loss: '
                            f'{loss:.4f}, acc: {acc:.4f}')

        rows.append(row)
        history = pd.DataFrame(rows, columns=EPOCH_COLUMNS)
        val_loss = row['val_loss']

        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

            if save_dir is not None:
                save_checkpoint(join(save_dir, 'best.ckpt'), model, optimizer,
                                meta={'epoch': epoch, 'val_loss': val_loss})

        if save_dir is not None:
            save_checkpoint(join(save_dir, 'last.ckpt'), model, optimizer,
                            meta={'epoch': epoch, 'val_loss': val_loss})
            history.to_csv(join(save_dir, 'epochs.csv'), index=False)

        scheduler.step(val_loss)
        new_lr = optimizer.param_groups[0]['lr']

        if new_lr != lr and verbose:
            logger.info(f'Learning rate reduced to {new_lr:.2e}.')

        if early_stopper is not None and early_stopper(val_loss):
            stopped_early = True
            break

    model.load_state_dict(best_state)
    model.eval()

    return TrainResult(model, pd.DataFrame(rows, columns=EPOCH_COLUMNS),
                       best_epoch, float(best_loss), stopped_early)
