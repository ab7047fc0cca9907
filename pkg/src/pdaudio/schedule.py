"""Variance-preserving cosine noise schedule.

Time is fractional, ``t in [0, 1]``; ``alpha(t) = cos(pi t / 2)`` and
``sigma(t) = sin(pi t / 2)``.  Both are evaluated through ``sin`` so that the
endpoints are exact: ``alpha(1) == 0``, ``sigma(0) == 0`` and
``alpha(0.5) == sigma(0.5)`` bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidArgument, OutOfDomain

FAMILY = "cosine"


def alpha_sigma(t):
    """Return ``(alpha_t, sigma_t)`` for a float, numpy array or torch tensor ``t``."""
    if isinstance(t, torch.Tensor):
        return torch.sin(0.5 * math.pi * (1.0 - t)), torch.sin(0.5 * math.pi * t)
    if isinstance(t, np.ndarray):
        return np.sin(0.5 * np.pi * (1.0 - t)), np.sin(0.5 * np.pi * t)
    t = float(t)
    return math.sin(0.5 * math.pi * (1.0 - t)), math.sin(0.5 * math.pi * t)


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized schedule on the grid ``t_i = i / T`` for ``i = 0..T``."""

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    family: str = FAMILY

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.T + 1) / self.T

    @property
    def betas(self) -> np.ndarray:
        """Per-step variances ``beta_i = 1 - alpha_i^2 / alpha_{i-1}^2`` for ``i = 1..T``.

        Index 0 of the returned array corresponds to ``i = 1``.
        """
        a2 = self.alpha**2
        return 1.0 - a2[1:] / a2[:-1]

    def alpha_at(self, i: int) -> float:
        return float(self.alpha[i])

    def sigma_at(self, i: int) -> float:
        return float(self.sigma[i])


def make_cosine_schedule(T: int) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise InvalidArgument(f"T must be a positive integer, got {T!r}")
    T = int(T)
    t = np.arange(T + 1) / T
    alpha, sigma = alpha_sigma(t)
    alpha.setflags(write=False)
    sigma.setflags(write=False)
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma)


def log_snr(s: NoiseSchedule, i: int) -> float:
    """``log(alpha_i^2 / sigma_i^2)`` on the interior of the grid."""
    if not 0 < i < s.T:
        raise OutOfDomain(f"log-SNR is infinite at step {i} (valid range 1..{s.T - 1})")
    a, sg = s.alpha[i], s.sigma[i]
    return float(2.0 * (math.log(a) - math.log(sg)))


def log_snr_t(t):
    """Continuous-time log-SNR; returns ``+inf``/``-inf`` at the endpoints."""
    a, s = alpha_sigma(t)
    if isinstance(a, torch.Tensor):
        return 2.0 * (torch.log(a) - torch.log(s))
    with np.errstate(divide="ignore"):
        return 2.0 * (np.log(a) - np.log(s))
