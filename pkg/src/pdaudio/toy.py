"""Closed-form denoisers and a linear student used to exercise the samplers and
the distiller where the optimum is known analytically."""

from __future__ import annotations

import torch
from torch import nn

from .param import ParamKind, bcast
from .schedule import alpha_sigma


class GaussianDenoiser(nn.Module):
    """Exact posterior mean ``E[x | z_t]`` for data ``x ~ N(mu, s^2 I)``.

    ``x_hat = mu + alpha s^2 / (alpha^2 s^2 + sigma^2) * (z - alpha mu)``
    """

    param_kind = ParamKind.X

    def __init__(self, mu: float, std: float, shape=(1,), dtype=torch.float64):
        super().__init__()
        self.mu = float(mu)
        self.std = float(std)
        self.sample_shape = tuple(shape)
        self.dtype = dtype

    def forward(self, z, t):
        a, s = alpha_sigma(t.to(torch.float64))
        a, s = bcast(a, z), bcast(s, z)
        var = self.std**2
        gain = a * var / (a**2 * var + s**2)
        return self.mu + gain * (z - a * self.mu)


class TwoPointDenoiser(nn.Module):
    """Exact posterior mean for data uniform on ``{-c, +c}``: ``c tanh(alpha c z / sigma^2)``.

    Non-linear in ``z``, so a linear student cannot imitate it perfectly.
    """

    param_kind = ParamKind.X

    def __init__(self, c: float = 1.0, shape=(1,), dtype=torch.float64):
        super().__init__()
        self.c = float(c)
        self.sample_shape = tuple(shape)
        self.dtype = dtype

    def forward(self, z, t):
        a, s = alpha_sigma(t.to(torch.float64))
        a, s = bcast(a, z), bcast(s, z)
        return self.c * torch.tanh(a * self.c * z / s**2)


class PointMassDenoiser(nn.Module):
    """Perfect denoiser for a point-mass data distribution: always predicts ``x``."""

    param_kind = ParamKind.X

    def __init__(self, x: torch.Tensor):
        super().__init__()
        self.register_buffer("x", x.clone())
        self.sample_shape = tuple(x.shape)

    def forward(self, z, t):
        return self.x.expand_as(z).clone()


class LinearStudent(nn.Module):
    """Affine per-grid-step predictor ``x_hat = w_i z + b_i`` on the grid ``t = i / N``."""

    param_kind = ParamKind.X

    def __init__(self, N: int, shape=(1,), dtype=torch.float64):
        super().__init__()
        self.N = N
        self.sample_shape = tuple(shape)
        self.weight = nn.Parameter(torch.zeros(N + 1, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(N + 1, dtype=dtype))

    def grid_index(self, t):
        return torch.round(t.to(torch.float64) * self.N).long().clamp(0, self.N)

    def forward(self, z, t):
        idx = self.grid_index(t)
        return bcast(self.weight[idx], z) * z + bcast(self.bias[idx], z)
