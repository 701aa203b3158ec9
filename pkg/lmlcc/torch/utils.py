from typing import Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError
from ..preprocess import Patch
from .checkpoint import load_model
from .models import LmlccNet, Model


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    """Number of scalar parameters, the trainable ones only by default.

    Fixed window cuts are buffers and never counted.

    """
    return sum(p.numel() for p in model.parameters()
               if p.requires_grad or not trainable_only)


def patch_side(model: Model) -> int:
    """Patch side the model was built for."""
    if isinstance(model, LmlccNet):
        return model.cfg.backbone.patch_side

    return model.cfg.patch_side


def resolve_model(model: Union[Model, str]) -> Model:
    return load_model(model) if isinstance(model, str) else model


def _stack(model: Model, patches: Sequence[Patch]) -> torch.Tensor:
    side = patch_side(model)
    bad = [p.nodule_id for p in patches if p.side != side]

    if bad:
        raise ShapeError(f'model expects {side}^3 patches, got other sides '
                         f'for {bad[:5]}')

    return torch.from_numpy(
        np.stack([p.voxels for p in patches]).astype(np.float32)
    ).unsqueeze(1)


def predict(model: Union[Model, str], patches: Sequence[Patch],
            batch_size: int = 68, device: str = 'cpu') -> np.ndarray:
    """Malignancy probabilities in eval mode.

    Args:
        model: Model or checkpoint filepath.
        patches: Patches of the side the model was built for.
        batch_size: For predicting in batches.
        device: Torch device.

    Returns:
        Probabilities, one per patch, float64.

    """
    model = resolve_model(model)
    model.eval()
    model.to(device)

    if not len(patches):
        return np.zeros(0)

    probs = []

    with torch.no_grad():
        for i in range(0, len(patches), batch_size):
            x = _stack(model, patches[i:i + batch_size]).to(device)
            x = x.to(next(model.parameters()).dtype)
            probs.append(model(x).cpu().numpy().astype(np.float64))

    return np.concatenate(probs)


def grad_cam(model: Union[Model, str], patch: Patch) -> np.ndarray:
    """Grad-CAM heatmap of the malignancy logit over the patch voxels.

    Gradients of the logit with respect to the last conv activations of every
    feature extractor are averaged per channel and used as channel weights.
    The weighted maps are summed over extractors, passed through ReLU,
    upsampled trilinearly to the patch size and divided by their maximum.

    Returns:
        Heatmap of shape (side, side, side) in [0, 1].

    """
    model = resolve_model(model)
    model.eval()

    activations = []
    handles = [
        extractor.last_activation.register_forward_hook(
            lambda module, inputs, output: activations.append(output)
        )
        for extractor in model.extractors
    ]

    param = next(model.parameters())
    x = _stack(model, [patch]).to(device=param.device, dtype=param.dtype)

    try:
        with torch.enable_grad():
            logit = model.logits(x)[0]
            grads = torch.autograd.grad(logit, activations)
    finally:
        for h in handles:
            h.remove()

    cam = sum((g.mean(dim=(2, 3, 4), keepdim=True) * a).sum(1, keepdim=True)
              for a, g in zip(activations, grads))
    cam = F.relu(cam.detach())
    cam = F.interpolate(cam, size=(patch.side,) * 3, mode='trilinear',
                        align_corners=False)[0, 0]

    peak = cam.max()

    if peak > 0:
        cam = cam / peak

    return cam.cpu().numpy().astype(np.float32)


def heatmap_mass_fraction(heatmap: np.ndarray, lo: Sequence[int],
                          hi: Sequence[int]) -> float:
    """Share of heatmap mass inside the box [lo, hi) (z, y, x order)."""
    total = float(heatmap.sum())

    if total <= 0:
        return 0.0

    box = heatmap[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]

    return float(box.sum()) / total
