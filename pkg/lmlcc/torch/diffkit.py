"""Validated differentiable primitives on top of PyTorch autograd.

Tensors with ``requires_grad`` are the graph nodes: ``.grad`` is their
gradient slot and ``.grad_fn`` the recorded backward rule. The functions here
pin down the exact layer contracts the networks rely on (kernel size, padding,
pooling window, batch-norm momentum, loss clamping, Adam defaults) and
provide the finite-difference checker every backward rule is tested with.

"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from ..errors import ShapeError

# Running statistics keep this fraction of their previous value per update.
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

BCE_CLAMP = 1e-7

DROPOUT_RATE = 0.3


def conv3d_forward(x: Tensor, k: Tensor, bias: Optional[Tensor] = None
                   ) -> Tensor:
    """3x3x3 cross-correlation with stride 1 and zero padding 1.

    Args:
        x: Input of shape [C_in, D, H, W] or batched [N, C_in, D, H, W].
        k: Kernel of shape [C_out, C_in, 3, 3, 3].
        bias: Optional bias of shape [C_out].

    Returns:
        Output with the spatial size of the input.

    """
    if k.dim() != 5 or tuple(k.shape[2:]) != (3, 3, 3):
        raise ShapeError(f'kernel must be [C_out, C_in, 3, 3, 3], got '
                         f'{tuple(k.shape)}')

    batched = x.dim() == 5

    if not batched:
        x = x.unsqueeze(0)

    if x.dim() != 5 or x.shape[1] != k.shape[1]:
        raise ShapeError(f'input channels {tuple(x.shape)} do not match '
                         f'kernel {tuple(k.shape)}')
    if bias is not None and tuple(bias.shape) != (k.shape[0],):
        raise ShapeError(f'bias must have shape ({k.shape[0]},)')

    out = F.conv3d(x, k, bias, stride=1, padding=1)

    return out if batched else out.squeeze(0)


def maxpool3d(x: Tensor) -> Tuple[Tensor, Tensor]:
    """2x2x2 max pooling with stride 2.

    Returns:
        Pooled tensor and the flat argmax index of every output voxel inside
        its input plane (first index wins ties). Autograd routes gradients to
        those voxels only.

    """
    if x.dim() not in (4, 5):
        raise ShapeError(f'expected [C, D, H, W] or [N, C, D, H, W], got '
                         f'{tuple(x.shape)}')
    if any(s % 2 for s in x.shape[-3:]):
        raise ShapeError(f'spatial extents must be even, got '
                         f'{tuple(x.shape[-3:])}')

    return F.max_pool3d(x, kernel_size=2, stride=2, return_indices=True)


def batchnorm_forward(x: Tensor, gamma: Tensor, beta: Tensor,
                      running_mean: Tensor, running_var: Tensor,
                      training: bool = True) -> Tensor:
    """Batch normalisation over every axis except the channel axis 1.

    In training mode the batch statistics normalise the input and update the
    running statistics in place with momentum 0.9. In eval mode the running
    statistics are used.

    """
    if x.dim() < 2:
        raise ShapeError('batch norm input needs [N, C, ...] shape')
    if training and x.numel() // x.shape[1] <= 1:
        raise ShapeError('training batch norm needs more than one value per '
                         'channel')

    return F.batch_norm(x, running_mean, running_var, gamma, beta,
                        training=training, momentum=1 - BN_MOMENTUM,
                        eps=BN_EPS)


def dropout(x: Tensor, rate: float = DROPOUT_RATE,
            training: bool = True) -> Tensor:
    """Inverted dropout, identity in eval mode."""
    return F.dropout(x, p=rate, training=training)


def bce_loss(y_hat: Tensor, y: Tensor) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 targets.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log.

    """
    if y_hat.shape != y.shape:
        raise ShapeError(f'prediction shape {tuple(y_hat.shape)} does not '
                         f'match target shape {tuple(y.shape)}')

    p = y_hat.clamp(BCE_CLAMP, 1 - BCE_CLAMP)

    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


@dataclass
class AdamState:
    """Adam moments and step count for a list of parameters.

    The update itself is ``torch.optim.Adam``; m, v and t read its state.

    """
    params: List[Tensor]
    optimizer: torch.optim.Adam

    @classmethod
    def create(cls, params: Sequence[Tensor], lr: float = 1e-4,
               beta1: float = 0.9, beta2: float = 0.999,
               epsilon: float = 1e-8) -> 'AdamState':
        params = list(params)
        optimizer = torch.optim.Adam(params, lr=lr, betas=(beta1, beta2),
                                     eps=epsilon)

        return cls(params, optimizer)

    def _moment(self, key: str) -> List[Tensor]:
        return [self.optimizer.state[p][key] if p in self.optimizer.state
                else torch.zeros_like(p) for p in self.params]

    @property
    def m(self) -> List[Tensor]:
        return self._moment('exp_avg')

    @property
    def v(self) -> List[Tensor]:
        return self._moment('exp_avg_sq')

    @property
    def t(self) -> int:
        if not self.params or self.params[0] not in self.optimizer.state:
            return 0

        return int(self.optimizer.state[self.params[0]]['step'])

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]['lr']


def adam_step(state: AdamState, grads: Sequence[Tensor]) -> List[Tensor]:
    """Apply one bias-corrected Adam update in place and return the params."""
    if len(grads) != len(state.params):
        raise ShapeError(f'{len(grads)} gradients for {len(state.params)} '
                         'parameters')

    for p, g in zip(state.params, grads):
        if g.shape != p.shape:
            raise ShapeError(f'gradient shape {tuple(g.shape)} does not match '
                             f'parameter shape {tuple(p.shape)}')

        p.grad = g.detach().clone()

    state.optimizer.step()

    return state.params


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               h: float = 1e-4, n_coords: Optional[int] = None,
               seed: int = 0) -> float:
    """Compare backprop gradients with central finite differences.

    Args:
        f: Called as ``f(*inputs)``, returns a scalar tensor. Inputs are leaf
            tensors (model parameters included) perturbed in place.
        inputs: Tensors to differentiate with respect to.
        h: Finite-difference step.
        n_coords: Check only this many random coordinates per input.
        seed: Seed of the coordinate sampling.

    Returns:
        Maximum relative error, with denominator max(|a|, |b|, 1e-8).

    """
    inputs = list(inputs)
    analytic = torch.autograd.grad(f(*inputs), inputs, allow_unused=True)
    generator = torch.Generator().manual_seed(seed)
    max_err = 0.0

    with torch.no_grad():
        for x, a in zip(inputs, analytic):
            a = torch.zeros_like(x) if a is None else a
            flat = x.view(-1)
            a = a.reshape(-1)

            if n_coords is None or n_coords >= flat.numel():
                coords = range(flat.numel())
            else:
                coords = torch.randperm(flat.numel(),
                                        generator=generator)[:n_coords].tolist()

            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = f(*inputs).item()
                flat[i] = orig - h
                f_minus = f(*inputs).item()
                flat[i] = orig

                numeric = (f_plus - f_minus) / (2 * h)
                exact = a[i].item()
                err = abs(numeric - exact) / max(abs(numeric), abs(exact),
                                                 1e-8)
                max_err = max(max_err, err)

    return max_err
