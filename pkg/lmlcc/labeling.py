"""Consensus labels from radiologist malignancy ratings and nodule-wise splits."""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, Mapping, Optional, Sequence
import logging

import pandas as pd
from sklearn.model_selection import train_test_split

from .errors import InsufficientDataError, ParseError, ValidationError
from .ingest import NoduleRecord
from .utils import require_file

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test', 'unlabeled')
MANIFEST_COLUMNS = ('nodule_id', 'split', 'label')

# Smallest labeled set split_by_nodule can stratify into train/val/test.
MIN_SPLIT_SIZE = 5


class MalignancyLabel(Enum):
    BENIGN = 0
    MALIGNANT = 1
    AMBIGUOUS = -1

    @property
    def target(self) -> Optional[int]:
        """Binary training target, None for ambiguous nodules."""
        return None if self is MalignancyLabel.AMBIGUOUS else self.value


@dataclass(frozen=True)
class RatingSummary:
    n_gt3: int
    n_eq3: int
    n_lt3: int
    n_total: int


# (ratings > 3, ratings == 3, ratings < 3) combinations that make a nodule
# malignant, keyed by number of annotating radiologists. Benign rows are the
# mirror image with the > 3 and < 3 counts swapped.
MALIGNANT_ROWS = {
    4: {(4, 0, 0), (3, 1, 0), (3, 0, 1), (2, 1, 1)},
    3: {(3, 0, 0), (2, 1, 0), (2, 0, 1)},
    2: {(2, 0, 0)},
}
BENIGN_ROWS = {
    n: {(lt, eq, gt) for gt, eq, lt in rows}
    for n, rows in MALIGNANT_ROWS.items()
}


def summarize(ratings: Sequence[int]) -> RatingSummary:
    """Count ratings above, equal to and below three."""
    for r in ratings:
        if not 1 <= r <= 5:
            raise ValidationError(f'rating {r} outside 1..5')

    return RatingSummary(
        n_gt3=sum(r > 3 for r in ratings),
        n_eq3=sum(r == 3 for r in ratings),
        n_lt3=sum(r < 3 for r in ratings),
        n_total=len(ratings)
    )


def consensus_label(ratings: Sequence[int]) -> MalignancyLabel:
    """Label a nodule from its ratings without averaging them.

    Nodules rated by fewer than two or more than four radiologists, and
    rating combinations not covered by the criteria table, are ambiguous.

    """
    s = summarize(ratings)
    row = (s.n_gt3, s.n_eq3, s.n_lt3)

    if row in MALIGNANT_ROWS.get(s.n_total, ()):
        return MalignancyLabel.MALIGNANT
    if row in BENIGN_ROWS.get(s.n_total, ()):
        return MalignancyLabel.BENIGN

    return MalignancyLabel.AMBIGUOUS


def label_records(records: Iterable[NoduleRecord]
                  ) -> Dict[str, MalignancyLabel]:
    """Consensus label for every record, keyed by nodule_id."""
    return {r.nodule_id: consensus_label(r.ratings) for r in records}


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint nodule_id sets. Ambiguous nodules form the unlabeled pool."""
    train_ids: FrozenSet[str]
    val_ids: FrozenSet[str]
    test_ids: FrozenSet[str]
    unlabeled_ids: FrozenSet[str] = field(default_factory=frozenset)

    def split_of(self, nodule_id: str) -> str:
        for name in SPLITS:
            if nodule_id in getattr(self, f'{name}_ids'):
                return name

        raise KeyError(nodule_id)


def split_by_nodule(labels: Mapping[str, MalignancyLabel], seed: int,
                    test_frac: float = 0.2, val_frac: float = 0.2
                    ) -> DatasetSplit:
    """Stratified test / train / val split keyed on nodule_id.

    ``test_frac`` of the labeled nodules go to test, ``val_frac`` of the rest
    to validation. Ambiguous nodules are placed in the unlabeled pool.

    Args:
        labels: Consensus label per nodule_id.
        seed: Random state of the split, same seed gives the same split.
        test_frac: Fraction of labeled nodules held out for test.
        val_frac: Fraction of the remaining nodules held out for validation.

    Raises:
        InsufficientDataError: Fewer than 5 labeled nodules.

    """
    labeled = sorted(k for k, v in labels.items()
                     if v is not MalignancyLabel.AMBIGUOUS)
    unlabeled = frozenset(k for k, v in labels.items()
                          if v is MalignancyLabel.AMBIGUOUS)

    if len(labeled) < MIN_SPLIT_SIZE:
        raise InsufficientDataError(
            f'at least {MIN_SPLIT_SIZE} labeled nodules are needed, got '
            f'{len(labeled)}'
        )

    targets = [labels[k].value for k in labeled]

    trainval, test, trainval_y, _ = _stratified_split(labeled, targets,
                                                      test_frac, seed)
    train, val, _, _ = _stratified_split(trainval, trainval_y, val_frac, seed)

    return DatasetSplit(frozenset(train), frozenset(val), frozenset(test),
                        unlabeled)


def _stratified_split(ids, y, frac, seed):
    try:
        return train_test_split(ids, y, test_size=frac, random_state=seed,
                                stratify=y)
    except ValueError:
        # Too few members of a class to stratify.
        logger.warning('Could not stratify split, falling back to random.')
        return train_test_split(ids, y, test_size=frac, random_state=seed)


def split_manifest(split: DatasetSplit,
                   labels: Mapping[str, MalignancyLabel]) -> pd.DataFrame:
    """Manifest table with nodule_id, split and label columns.

    Rows keep the order of ``labels``. Unlabeled nodules have an empty label.

    """
    rows = []

    for nodule_id, label in labels.items():
        target = label.target
        rows.append({
            'nodule_id': nodule_id,
            'split': split.split_of(nodule_id),
            'label': '' if target is None else target
        })

    return pd.DataFrame(rows, columns=list(MANIFEST_COLUMNS))


def write_manifest(df: pd.DataFrame, csv_path: str):
    """Write a manifest, overwriting any existing file."""
    df.to_csv(csv_path, index=False)


def read_manifest(csv_path: str) -> pd.DataFrame:
    """Read a split manifest, labels as nullable integers.

    Raises:
        ParseError: A required column is missing.
        ValidationError: Unknown split name.

    """
    df = pd.read_csv(require_file(csv_path),
                     dtype={'nodule_id': str, 'split': str})

    for col in MANIFEST_COLUMNS:
        if col not in df:
            raise ParseError(col, f'{csv_path}: missing column {col}')

    df['label'] = df['label'].astype('Int64')

    bad = set(df['split']) - set(SPLITS)

    if bad:
        raise ValidationError(f'unknown split names: {sorted(bad)}')

    return df


def manifest_split(df: pd.DataFrame) -> DatasetSplit:
    """Rebuild a DatasetSplit from a manifest table."""
    ids = {name: frozenset(df.loc[df['split'] == name, 'nodule_id'])
           for name in SPLITS}

    return DatasetSplit(ids['train'], ids['val'], ids['test'],
                        ids['unlabeled'])
