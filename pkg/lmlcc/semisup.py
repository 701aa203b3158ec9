"""Confidence-thresholded pseudo-labeling of the ambiguous nodule pool.

Every round retrains a fresh model on the radiologist-labeled train set plus
all pseudo-labels accepted so far, predicts the remaining pool and accepts
nodules whose probability clears the confidence threshold. Accepted
pseudo-labels are never revised. Validation and test patches are only read.

"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence
import logging

import numpy as np
import pandas as pd

from os.path import join

from .errors import ConfigError, DataError, InsufficientDataError
from .preprocess import Patch, rotate_augment
from .torch.models import Model
from .torch.train_binary_model import TrainConfig, TrainResult, train
from .torch.utils import predict
from .utils import create_dirs

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['round', 'n_new', 'n_remaining', 'mean_confidence']


@dataclass(frozen=True)
class PseudoLabel:
    nodule_id: str
    label: int
    confidence: float
    round_index: int = 0


@dataclass
class PseudoLabelRound:
    """Outcome of one pseudo-labeling round.

    n_newly_labeled + n_remaining_unlabeled equals the pool size before the
    round.

    """
    round_index: int
    n_newly_labeled: int
    n_remaining_unlabeled: int
    threshold: float = 0.9
    accepted: List[PseudoLabel] = field(default_factory=list)

    @property
    def mean_confidence(self) -> float:
        if not self.accepted:
            return float('nan')

        return float(np.mean([p.confidence for p in self.accepted]))


@dataclass
class SemisupResult:
    """Final model, per-round history and every accepted pseudo-label."""
    train_result: TrainResult
    rounds: List[PseudoLabelRound]
    pseudo_labels: Dict[str, PseudoLabel]
    train_sizes: List[int]

    @property
    def model(self) -> Model:
        return self.train_result.model


def check_threshold(threshold: float):
    if not 0.5 < threshold <= 1:
        raise ConfigError(f'confidence threshold must lie in (0.5, 1], got '
                          f'{threshold}')


def assign_pseudo_labels(probs: Mapping[str, float], threshold: float = 0.9,
                         round_index: int = 0) -> List[PseudoLabel]:
    """Accept nodules with p >= threshold as malignant and p <= 1 - threshold
    as benign; everything in between stays unlabeled."""
    check_threshold(threshold)
    accepted = []

    for nodule_id, p in probs.items():
        if p >= threshold:
            label = 1
        elif p <= 1 - threshold:
            label = 0
        else:
            continue

        accepted.append(PseudoLabel(nodule_id, label, float(max(p, 1 - p)),
                                    round_index))

    return accepted


def _group(patches: Sequence[Patch]) -> Dict[str, List[Patch]]:
    groups = {}

    for p in patches:
        groups.setdefault(p.nodule_id, []).append(p)

    return groups


def nodule_probabilities(model: Model, pool: Mapping[str, List[Patch]],
                         batch_size: int = 68, device: str = 'cpu'
                         ) -> Dict[str, float]:
    """Mean predicted probability over the patches of every nodule."""
    ids = list(pool)
    patches = [p for i in ids for p in pool[i]]
    probs = predict(model, patches, batch_size=batch_size, device=device)

    out, pos = {}, 0

    for i in ids:
        n = len(pool[i])
        out[i] = float(probs[pos:pos + n].mean())
        pos += n

    return out


def semisup_loop(train_patches: Sequence[Patch], val_patches: Sequence[Patch],
                 unlabeled_patches: Sequence[Patch],
                 model_factory: Callable[[], Model], tc: TrainConfig,
                 threshold: float = 0.9, max_rounds: int = 10,
                 min_new: int = 5, augment: bool = False,
                 save_dir: Optional[str] = None, verbose: bool = True
                 ) -> SemisupResult:
    """Grow the training set with confident pseudo-labels.

    Stops when a round accepts fewer than min_new nodules, the pool is empty
    or max_rounds rounds ran. If pseudo-labels were added after the last
    training run, one more model is trained on the final set and returned.

    Args:
        train_patches: Radiologist-labeled training patches.
        val_patches: Validation patches, fixed for all rounds.
        unlabeled_patches: Patches of the ambiguous pool.
        model_factory: Builds a freshly initialised model.
        tc: Training configuration used for every round.
        threshold: Confidence needed to accept a pseudo-label.
        max_rounds: Upper bound on the number of rounds.
        min_new: Minimum number of new pseudo-labels to keep going.
        augment: Add the 7 rotations of every pseudo-labeled patch.
        save_dir: When given, round_<k>/ receives each round's checkpoints
            and final/ the model retrained on the last pseudo-labels.
        verbose: Log progress.

    Raises:
        InsufficientDataError: Empty initial training set.
        DataError: A pool nodule also appears in the labeled train set.

    """
    check_threshold(threshold)

    if max_rounds < 1 or min_new < 1:
        raise ConfigError('max_rounds and min_new must be >= 1')
    if not train_patches:
        raise InsufficientDataError('semi-supervised training needs a '
                                    'non-empty labeled train set')

    labeled_ids = {p.nodule_id for p in train_patches}
    pool = _group(unlabeled_patches)
    clash = labeled_ids & set(pool)

    if clash:
        raise DataError(f'pool nodules already carry radiologist labels: '
                        f'{sorted(clash)[:5]}')

    train_set = list(train_patches)
    accepted: Dict[str, PseudoLabel] = {}
    rounds: List[PseudoLabelRound] = []
    sizes: List[int] = []
    result = None
    # Set when pseudo-labeled patches were added after the last fit.
    stale = False

    def fit(name):
        nonlocal stale
        out_dir = None if save_dir is None else join(save_dir, name)
        sizes.append(len(train_set))
        stale = False

        return train(model_factory(), train_set, val_patches, tc,
                     save_dir=out_dir, verbose=verbose)

    for k in range(1, max_rounds + 1):
        result = fit(f'round_{k}')
        remaining = {i: pool[i] for i in pool if i not in accepted}

        if not remaining:
            break

        probs = nodule_probabilities(result.model, remaining, tc.batch_size,
                                     tc.device)
        new = assign_pseudo_labels(probs, threshold, round_index=k)

        rounds.append(PseudoLabelRound(k, len(new), len(remaining) - len(new),
                                       threshold, new))

        for pl in new:
            accepted[pl.nodule_id] = pl

            for p in pool[pl.nodule_id]:
                p = p.relabel(pl.label)
                train_set.extend(rotate_augment(p) if augment else [p])
                stale = True

        logger.info(f'Round {k}: {len(new)} pseudo-labels accepted, '
                    f'{len(remaining) - len(new)} nodules left, train set '
                    f'{len(train_set)} patches.')

        if len(new) < min_new:
            break

    if stale:
        result = fit('final')

    if save_dir is not None:
        create_dirs([save_dir])
        write_round_history(rounds, join(save_dir, 'rounds.csv'))

    return SemisupResult(result, rounds, accepted, sizes)


def round_history(rounds: Sequence[PseudoLabelRound]) -> pd.DataFrame:
    return pd.DataFrame([{
        'round': r.round_index, 'n_new': r.n_newly_labeled,
        'n_remaining': r.n_remaining_unlabeled,
        'mean_confidence': r.mean_confidence
    } for r in rounds], columns=HISTORY_COLUMNS)


def write_round_history(rounds: Sequence[PseudoLabelRound], csv_path: str):
    round_history(rounds).to_csv(csv_path, index=False)


def pseudo_label_manifest(manifest: pd.DataFrame,
                          pseudo_labels: Mapping[str, PseudoLabel]
                          ) -> pd.DataFrame:
    """Split manifest with accepted pseudo-labels moved into train.

    Adds provenance (radiologist, pseudo or empty for still unlabeled
    nodules), confidence and round columns. Radiologist rows are unchanged.

    """
    df = manifest.copy()
    df['label'] = df['label'].astype('Int64')
    df['provenance'] = np.where(df['label'].notna(), 'radiologist', '')
    df['confidence'] = np.nan
    df['round'] = pd.array([pd.NA] * len(df), dtype='Int64')

    for i, row in df.iterrows():
        pl = pseudo_labels.get(row['nodule_id'])

        if pl is None or row['provenance'] == 'radiologist':
            continue

        df.at[i, 'split'] = 'train'
        df.at[i, 'label'] = pl.label
        df.at[i, 'provenance'] = 'pseudo'
        df.at[i, 'confidence'] = pl.confidence
        df.at[i, 'round'] = pl.round_index

    return df
