"""Stochastic normalization.

A drop-in replacement for ``BatchNorm2d`` with two normalization branches
per channel: one uses the current mini-batch statistics, the other the
moving statistics inherited from the pre-trained network. During training
each channel picks the batch branch with probability ``p`` (one Bernoulli
draw per channel per step); at inference only the moving statistics are
used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
from torch import nn

from .errors import BatchTooSmall, ShapeMismatch

DEFAULT_P = 0.5
DEFAULT_ALPHA = 0.1
DEFAULT_EPS = 1e-5


@dataclass
class StochNormState:
    weight: torch.Tensor        # gamma
    bias: torch.Tensor          # beta
    running_mean: torch.Tensor
    running_var: torch.Tensor
    alpha: float = DEFAULT_ALPHA
    p: float = DEFAULT_P
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")


def _channel_view(t: torch.Tensor, ndim: int) -> torch.Tensor:
    return t.view(1, -1, *([1] * (ndim - 2)))


def batch_statistics(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and biased variance over every axis except 1."""
    dims = [0] + list(range(2, x.dim()))
    mu = x.mean(dim=dims)
    var = ((x - _channel_view(mu, x.dim())) ** 2).mean(dim=dims)
    return mu, var


def draw_branch_mask(num_channels: int, p: float, generator: torch.Generator | None = None,
                     dtype=torch.float32) -> torch.Tensor:
    probs = torch.full((num_channels,), float(p), dtype=torch.float64)
    return torch.bernoulli(probs, generator=generator).to(dtype)


def update_moving(state: StochNormState, batch_mu: torch.Tensor, batch_var: torch.Tensor) -> StochNormState:
    a = state.alpha
    mean = state.running_mean + a * (batch_mu.detach() - state.running_mean)
    var = state.running_var + a * (batch_var.detach() - state.running_var)
    return StochNormState(state.weight, state.bias, mean, var, state.alpha, state.p, state.eps)


def forward_train(x: torch.Tensor, state: StochNormState, generator: torch.Generator | None = None,
                  mask: torch.Tensor | None = None) -> tuple[torch.Tensor, StochNormState, torch.Tensor]:
    """Training-mode forward. Returns ``(y, updated_state, branch_mask)``.

    ``mask[c] == 1`` selects the batch-statistics branch for channel ``c``.
    The moving-statistics branch uses the pre-update moving values.
    """
    c = x.shape[1]
    if state.running_mean.shape[0] != c:
        raise ShapeMismatch(f"input has {c} channels, state has {state.running_mean.shape[0]}")
    m = x.numel() // c
    if m < 2:
        raise BatchTooSmall(f"need at least 2 values per channel, got {m}")
    if mask is None:
        mask = draw_branch_mask(c, state.p, generator, x.dtype)
    mu, var = batch_statistics(x)
    view = lambda t: _channel_view(t, x.dim())  # noqa: E731
    z_moving = (x - view(state.running_mean.detach())) / torch.sqrt(view(state.running_var.detach()) + state.eps)
    z_batch = (x - view(mu)) / torch.sqrt(view(var) + state.eps)
    s = view(mask.to(x.dtype))
    z = (1 - s) * z_moving + s * z_batch
    y = view(state.weight) * z + view(state.bias)
    return y, update_moving(state, mu, var), mask


def forward_eval(x: torch.Tensor, state: StochNormState) -> torch.Tensor:
    view = lambda t: _channel_view(t, x.dim())  # noqa: E731
    z = (x - view(state.running_mean)) / torch.sqrt(view(state.running_var) + state.eps)
    return view(state.weight) * z + view(state.bias)


def from_pretrained(bn_params: nn.BatchNorm2d | Mapping[str, torch.Tensor], p: float = DEFAULT_P,
                    alpha: float = DEFAULT_ALPHA, eps: float = DEFAULT_EPS,
                    num_features: int | None = None) -> StochNormState:
    if isinstance(bn_params, nn.modules.batchnorm._BatchNorm):
        src = {"weight": bn_params.weight, "bias": bn_params.bias,
               "running_mean": bn_params.running_mean, "running_var": bn_params.running_var}
    else:
        src = dict(bn_params)
    tensors = {k: torch.as_tensor(src[k]).detach().clone() for k in
               ("weight", "bias", "running_mean", "running_var")}
    if num_features is not None:
        for k, t in tensors.items():
            if t.shape != (num_features,):
                raise ShapeMismatch(f"{k} has shape {tuple(t.shape)}, expected ({num_features},)")
    return StochNormState(**tensors, alpha=alpha, p=p, eps=eps)


def _mix_seed(*parts: int) -> int:
    h = 1469598103934665603
    for v in parts:
        h = ((h ^ (int(v) & 0xFFFFFFFFFFFFFFFF)) * 1099511628211) & 0x7FFFFFFFFFFFFFFF
    return h


class StochNorm2d(nn.Module):
    """Module wrapper holding the state as parameters and buffers.

    ``weight``/``bias`` are the only learnables, so swapping a BatchNorm
    layer for this one keeps the parameter count. Branch masks come from a
    generator seeded by ``(seed, layer_id, step)``.
    """

    def __init__(self, num_features: int, p: float = DEFAULT_P, alpha: float = DEFAULT_ALPHA,
                 eps: float = DEFAULT_EPS, layer_id: int = 0, seed: int = 0):
        super().__init__()
        self.num_features = num_features
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))
        self.register_buffer("p", torch.tensor(float(p)))
        self.register_buffer("alpha", torch.tensor(float(alpha)))
        self.register_buffer("eps", torch.tensor(float(eps)))
        self.register_buffer("step", torch.tensor(0, dtype=torch.long))
        self.layer_id = layer_id
        self.seed = seed
        self.last_mask: torch.Tensor | None = None
        self.state()  # validates alpha and p

    @classmethod
    def from_state(cls, state: StochNormState, layer_id: int = 0, seed: int = 0) -> "StochNorm2d":
        mod = cls(state.weight.shape[0], state.p, state.alpha, state.eps, layer_id, seed)
        with torch.no_grad():
            mod.weight.copy_(state.weight)
            mod.bias.copy_(state.bias)
            mod.running_mean.copy_(state.running_mean)
            mod.running_var.copy_(state.running_var)
        return mod

    def state(self) -> StochNormState:
        return StochNormState(self.weight, self.bias, self.running_mean, self.running_var,
                              float(self.alpha), float(self.p), float(self.eps))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training:
            return forward_eval(x, self.state())
        gen = torch.Generator().manual_seed(_mix_seed(self.seed, self.layer_id, int(self.step)))
        y, new_state, mask = forward_train(x, self.state(), gen)
        with torch.no_grad():
            self.running_mean.copy_(new_state.running_mean)
            self.running_var.copy_(new_state.running_var)
            self.step += 1
        self.last_mask = mask
        return y

    def extra_repr(self) -> str:
        return (f"{self.num_features}, p={float(self.p)}, alpha={float(self.alpha)}, "
                f"eps={float(self.eps)}")
