from typing import Optional, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from ...errors import ShapeError, ValidationError
from ...preprocess import Patch


class PatchDataset(Dataset):
    """A PyTorch dataset over nodule patches for binary classification.

    """
    def __init__(self, patches: Sequence[Patch], require_labels: bool = True,
                 side: Optional[int] = None) -> None:
        """
        Args:
            patches: Cubic patches, values in [0, 1].
            require_labels: Raise if any patch has no label.
            side: Expected patch side, checked when given.

        Raises:
            ValidationError: A patch has no label and labels are required.
            ShapeError: Patch sides differ from each other or from side.

        """
        patches = list(patches)

        if require_labels:
            unlabeled = [p.nodule_id for p in patches if p.label is None]

            if unlabeled:
                raise ValidationError(f'patches without label: '
                                      f'{unlabeled[:5]}')

        sides = {p.side for p in patches}

        if side is not None:
            sides.add(side)
        if len(sides) > 1:
            raise ShapeError(f'patch sides differ: {sorted(sides)}')

        self.patches = patches

    def __len__(self) -> int:
        return len(self.patches)

    def __getitem__(self, index: int) -> dict:
        """Get image, label and patch info.

        Args:
            index: Patch index.

        Returns:
            Image as a [1, D, H, W] float32 tensor, label as a float tensor
            (-1 when unknown) and a dictionary with nodule_id and
            augmentation_tag.

        """
        p = self.patches[index]
        image = torch.from_numpy(np.ascontiguousarray(p.voxels,
                                                      dtype=np.float32))

        return {
            'image': image.unsqueeze(0),
            'label': torch.tensor(-1.0 if p.label is None else float(p.label)),
            'info': {'nodule_id': p.nodule_id,
                     'augmentation_tag': p.augmentation_tag}
        }
