"""Learnable dynamic range layer.

A normalised patch is split into N intensity branches by soft windows whose
N - 1 interior cut points are learned with the rest of the network. Cuts are
derived from an unconstrained parameter vector theta:

    d_i = softplus(theta_i) + 1e-4,  c_k = (d_1 + ... + d_k) / (d_1 + ... + d_N)

so they stay strictly ordered inside (0, 1) whatever the optimiser does. The
window of branch i is w_i(x) = L_i(x) - U_i(x) with L_i(x) = sigmoid((x -
c_{i-1}) / tau) and U_i(x) = sigmoid((x - c_i) / tau), except that the first
branch has L = 1 and the last branch has U = 0. The windows telescope to an
exact partition of unity and every branch carries x * w_i(x).

"""
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple
import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from ..errors import ConfigError
from ..preprocess import hu_to_unit

DEFAULT_TAU = 0.05
MIN_INCREMENT = 1e-4


class CutMode(Enum):
    LEARNABLE = 'learnable'
    FIXED = 'fixed'


class CutInit(Enum):
    CONSTANT = 'constant'
    RANDOM = 'random'


@dataclass
class CutVector:
    """Window cut parameters.

    Attributes:
        n_branches: Number of intensity branches N.
        theta: Raw parameters, length N.
        tau: Window softness in normalised intensity units.
        mode: Learnable or fixed cuts.
        init: How theta was initialised.

    """
    n_branches: int
    theta: Tensor
    tau: float = DEFAULT_TAU
    mode: CutMode = CutMode.LEARNABLE
    init: CutInit = CutInit.CONSTANT

    def __post_init__(self):
        if self.n_branches < 1:
            raise ConfigError(f'n_branches must be >= 1, got '
                              f'{self.n_branches}')
        if self.theta.shape != (self.n_branches,):
            raise ConfigError(f'theta must have shape ({self.n_branches},)')
        if self.tau <= 0:
            raise ConfigError(f'tau must be > 0, got {self.tau}')

    @classmethod
    def initialize(cls, n_branches: int, init: CutInit = CutInit.CONSTANT,
                   mode: CutMode = CutMode.LEARNABLE, tau: float = DEFAULT_TAU,
                   generator: Optional[torch.Generator] = None
                   ) -> 'CutVector':
        """Constant init gives equal intervals, random init draws theta from
        Uniform(-1, 1)."""
        if init is CutInit.RANDOM:
            theta = torch.rand(n_branches, generator=generator,
                               dtype=torch.float64) * 2 - 1
        else:
            theta = torch.zeros(n_branches, dtype=torch.float64)

        return cls(n_branches, theta.float(), tau, mode, init)

    @classmethod
    def from_cuts(cls, cuts: Sequence[float], tau: float = DEFAULT_TAU,
                  mode: CutMode = CutMode.FIXED) -> 'CutVector':
        """Encode explicit interior cuts in (0, 1) as theta."""
        bounds = [0.0, *cuts, 1.0]
        widths = [b - a for a, b in zip(bounds[:-1], bounds[1:])]

        if any(w <= 2 * MIN_INCREMENT for w in widths):
            raise ConfigError(f'cuts must be strictly increasing inside '
                              f'(0, 1), got {list(cuts)}')

        # Widths sum to one, so inverting softplus on each recovers the cuts.
        theta = torch.tensor([math.log(math.expm1(w - MIN_INCREMENT))
                              for w in widths], dtype=torch.float32)

        return cls(len(widths), theta, tau, mode, CutInit.CONSTANT)

    @classmethod
    def from_hu(cls, cuts_hu: Sequence[float], tau: float = DEFAULT_TAU,
                mode: CutMode = CutMode.FIXED) -> 'CutVector':
        """Explicit interior cuts given in Hounsfield Units."""
        if any(not -1000 < c < 500 for c in cuts_hu):
            raise ConfigError(f'HU cuts must lie inside (-1000, 500), got '
                              f'{list(cuts_hu)}')

        return cls.from_cuts([float(hu_to_unit(c)) for c in cuts_hu], tau,
                             mode)

    def cuts(self) -> Tensor:
        return cuts_from_theta(self.theta)


def cuts_from_theta(theta: Tensor) -> Tensor:
    """Interior cuts c_1 .. c_{N-1}, strictly increasing in (0, 1)."""
    d = F.softplus(theta) + MIN_INCREMENT

    return (torch.cumsum(d, 0) / d.sum())[:-1]


def cuts_backward(theta: Tensor, grad_cuts: Tensor) -> Tensor:
    """Chain a gradient on the cuts back to theta.

    With S_k the partial sums of the increments and T their total,
    dc_k / dd_j = [j <= k] / T - S_k / T**2 and dd_j / dtheta_j =
    sigmoid(theta_j).

    """
    d = F.softplus(theta) + MIN_INCREMENT
    s = torch.cumsum(d, 0)[:-1]
    total = d.sum()
    n = theta.shape[0]

    # jac[k, j] = dc_k / dd_j
    j = torch.arange(n, device=theta.device)
    k = torch.arange(n - 1, device=theta.device)
    jac = (j[None, :] <= k[:, None]).to(theta.dtype) / total - \
        (s / total**2)[:, None]

    return torch.sigmoid(theta) * (grad_cuts @ jac)


def window_mask(x: Tensor, c_lo: float, c_hi: float, tau: float,
                edge_lo: bool = False, edge_hi: bool = False) -> Tensor:
    """Soft window between two cuts, in [0, 1]."""
    lower = torch.ones_like(x) if edge_lo else torch.sigmoid((x - c_lo) / tau)
    upper = torch.zeros_like(x) if edge_hi else torch.sigmoid((x - c_hi) / tau)

    return lower - upper


def _masks(x: Tensor, cuts: Tensor, tau: float) -> Tuple[Tensor, Tensor]:
    """Window masks stacked on a new leading axis, plus the sigmoid of every
    cut (shape [N - 1, *x.shape])."""
    n = cuts.shape[0] + 1
    sig = torch.sigmoid((x.unsqueeze(0) - cuts.view(-1, *[1] * x.dim()))
                        / tau)
    ones = torch.ones_like(x).unsqueeze(0)
    zeros = torch.zeros_like(x).unsqueeze(0)

    lower = torch.cat([ones, sig], 0) if n > 1 else ones
    upper = torch.cat([sig, zeros], 0) if n > 1 else zeros

    return lower - upper, sig


def branch_backward(x: Tensor, theta: Tensor, tau: float,
                    grad_branches: Tensor) -> Tuple[Tensor, Tensor]:
    """Gradients of the branch outputs with respect to the input and theta.

    Args:
        x: Input intensities.
        theta: Cut parameters.
        tau: Window softness.
        grad_branches: Upstream gradient, shape [N, *x.shape].

    Returns:
        Gradient with respect to x (shape of x) and to theta (shape [N]).

    """
    cuts = cuts_from_theta(theta)
    masks, sig = _masks(x, cuts, tau)

    # sigmoid'((x - c_k) / tau) / tau for every interior cut.
    dsig = sig * (1 - sig) / tau

    # dw_i/dx = dL_i/dx - dU_i/dx.
    zeros = torch.zeros_like(x).unsqueeze(0)
    dlower = torch.cat([zeros, dsig], 0)
    dupper = torch.cat([dsig, zeros], 0)
    dmask = dlower - dupper

    grad_x = (grad_branches * (masks + x.unsqueeze(0) * dmask)).sum(0)

    # Cut c_k enters branch k through -U_k (+ x * dsig) and branch k + 1
    # through L_{k+1} (- x * dsig).
    diff = grad_branches[:-1] - grad_branches[1:]
    grad_cuts = (diff * x.unsqueeze(0) * dsig).flatten(1).sum(1)

    return grad_x, cuts_backward(theta, grad_cuts)


class BranchWindow(torch.autograd.Function):
    """Branch split with a hand-written backward rule."""

    @staticmethod
    def forward(ctx, x: Tensor, theta: Tensor, tau: float) -> Tensor:
        masks, _ = _masks(x, cuts_from_theta(theta), tau)
        ctx.save_for_backward(x, theta)
        ctx.tau = tau

        return x.unsqueeze(0) * masks

    @staticmethod
    def backward(ctx, grad_branches):
        x, theta = ctx.saved_tensors
        grad_x, grad_theta = branch_backward(x, theta, ctx.tau,
                                             grad_branches)

        return grad_x, grad_theta, None


@dataclass
class BranchSet:
    """Outputs of the window split.

    Attributes:
        masks: Window masks, shape [N, *x.shape].
        branches: Masked inputs (and the untouched input last when
            include_original), shape [N (+1), *x.shape].
        include_original: Whether the last branch is the original input.

    """
    masks: Tensor
    branches: Tensor
    include_original: bool = False

    def __len__(self) -> int:
        return self.branches.shape[0]


def branch_forward(v: Tensor, cv: CutVector, include_original: bool = False
                   ) -> BranchSet:
    """Split an input into masked intensity branches."""
    theta = cv.theta.to(v.dtype)
    masks, _ = _masks(v, cuts_from_theta(theta), cv.tau)
    branches = BranchWindow.apply(v, theta, cv.tau)

    if include_original:
        branches = torch.cat([branches, v.unsqueeze(0)], 0)

    return BranchSet(masks, branches, include_original)


class DynamicRangeLayer(nn.Module):
    """Module form of the window split for [B, 1, D, H, W] inputs.

    Returns [B, N (+1), D, H, W]. Fixed mode keeps theta as a buffer so the
    optimiser never sees it.

    """
    def __init__(self, cut_vector: CutVector, include_original: bool = False):
        super().__init__()
        self.tau = cut_vector.tau
        self.mode = cut_vector.mode
        self.init = cut_vector.init
        self.include_original = include_original

        theta = cut_vector.theta.detach().clone().float()

        if self.mode is CutMode.LEARNABLE:
            self.theta = nn.Parameter(theta)
        else:
            self.register_buffer('theta', theta)

    @property
    def n_branches(self) -> int:
        return self.theta.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.n_branches + int(self.include_original)

    def cut_vector(self) -> CutVector:
        return CutVector(self.n_branches, self.theta.detach().cpu().clone(),
                         self.tau, self.mode, self.init)

    def cuts(self) -> Tensor:
        """Current interior cuts in normalised intensity units."""
        return cuts_from_theta(self.theta.detach())

    def forward(self, x: Tensor) -> Tensor:
        x = x[:, 0]
        branches = BranchWindow.apply(x, self.theta.to(x.dtype), self.tau)

        if self.include_original:
            branches = torch.cat([branches, x.unsqueeze(0)], 0)

        return branches.transpose(0, 1)
