# Functions used to evaluate trained models on a set of patches.
from typing import List, Optional, Sequence, Union
import logging

import numpy as np
import pandas as pd
from tqdm import tqdm

from os.path import join

from ..metrics import EvalReport, evaluate_probs, write_report, write_roc
from ..preprocess import Patch
from ..utils import create_dirs
from .models import LmlccNet, Model
from .utils import grad_cam, heatmap_mass_fraction, predict, resolve_model

logger = logging.getLogger(__name__)


def evaluate(model: Union[Model, str], patches: Sequence[Patch],
             threshold: float = 0.5, batch_size: int = 68,
             device: str = 'cpu', save_dir: Optional[str] = None
             ) -> EvalReport:
    """Evaluate a classifier on labeled patches.

    Args:
        model: Model or checkpoint filepath.
        patches: Labeled patches.
        threshold: Probability threshold of the malignant class.
        batch_size: For predicting in batches.
        device: Torch device.
        save_dir: When given, receives metrics.csv, roc.csv and
            predictions.csv.

    Returns:
        Report with the learned cuts of multi-branch models.

    """
    model = resolve_model(model)
    probs = predict(model, patches, batch_size=batch_size, device=device)
    labels = [p.label for p in patches]
    cuts = model.learned_cuts() if isinstance(model, LmlccNet) else None

    report = evaluate_probs(labels, probs, threshold, cuts)

    if save_dir is not None:
        create_dirs([save_dir])
        write_report(report, join(save_dir, 'metrics.csv'))
        write_roc(report, join(save_dir, 'roc.csv'))
        pd.DataFrame({
            'nodule_id': [p.nodule_id for p in patches],
            'augmentation_tag': [p.augmentation_tag for p in patches],
            'label': labels, 'probability': probs
        }).to_csv(join(save_dir, 'predictions.csv'), index=False)

    return report


def central_box(side: int, half_width: int):
    """Bounds of a cube of edge 2 * half_width centred in a patch."""
    c = side // 2
    lo = max(c - half_width, 0)
    hi = min(c + half_width, side)

    return (lo,) * 3, (hi,) * 3


def save_grad_cams(model: Union[Model, str], patches: Sequence[Patch],
                   save_dir: str, box_half_width: int = 4,
                   verbose: bool = True) -> pd.DataFrame:
    """Write one heatmap .npy per patch and a gradcam.csv summary.

    The summary lists nodule_id, label, probability and the share of heatmap
    mass inside the central box where the nodule sits.

    """
    model = resolve_model(model)
    create_dirs([save_dir])

    probs = predict(model, patches)
    rows: List[dict] = []

    for p, prob in tqdm(zip(patches, probs), total=len(patches),
                        desc='Grad-CAM', disable=not verbose):
        heatmap = grad_cam(model, p)
        np.save(join(save_dir, f'{p.nodule_id}_{p.augmentation_tag}.npy'),
                heatmap)

        lo, hi = central_box(p.side, box_half_width)
        rows.append({
            'nodule_id': p.nodule_id, 'label': p.label,
            'probability': float(prob),
            'box_mass': heatmap_mass_fraction(heatmap, lo, hi)
        })

    df = pd.DataFrame(rows, columns=['nodule_id', 'label', 'probability',
                                     'box_mass'])
    df.to_csv(join(save_dir, 'gradcam.csv'), index=False)
    logger.info(f'Saved {len(df)} heatmaps to {save_dir}.')

    return df
