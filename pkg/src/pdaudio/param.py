"""Denoiser output parameterizations and reconstruction-loss weightings."""

from __future__ import annotations

import enum
import math

import torch

from .errors import InvalidArgument, SingularParameterization


class ParamKind(str, enum.Enum):
    X = "x"
    EPS = "eps"
    XEPS = "xeps"
    V = "v"

    @property
    def out_multiplier(self) -> int:
        """How many copies of the input channels the network must emit."""
        return 2 if self is ParamKind.XEPS else 1


class WeightScheme(str, enum.Enum):
    SNR = "snr"
    TRUNCATED_SNR = "snr_trunc"
    SNR_PLUS_ONE = "snr_plus_one"


def bcast(coef, like: torch.Tensor):
    """Reshape a per-batch coefficient of shape ``(B,)`` so it broadcasts against ``like``."""
    if isinstance(coef, torch.Tensor) and coef.ndim == 1 and like.ndim > 1:
        return coef.reshape(-1, *([1] * (like.ndim - 1))).to(like.dtype)
    return coef


def _check_same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise InvalidArgument(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def v_from(x, eps, alpha, sigma):
    """The velocity target ``alpha * eps - sigma * x``."""
    _check_same_shape(x, eps, "v_from")
    return bcast(alpha, x) * eps - bcast(sigma, x) * x


def eps_from(x, z, alpha, sigma):
    """Noise implied by a clean estimate ``x`` of ``z = alpha x + sigma eps``."""
    return (z - bcast(alpha, z) * x) / bcast(sigma, z)


def split_xeps(out: torch.Tensor):
    """Split a doubled-channel network output into ``(x_tilde, eps_tilde)``."""
    if out.shape[1] % 2:
        raise InvalidArgument(f"xeps output needs an even channel count, got {out.shape[1]}")
    half = out.shape[1] // 2
    return out[:, :half], out[:, half:]


def _any_zero(alpha) -> bool:
    if isinstance(alpha, torch.Tensor):
        return bool((alpha == 0).any())
    return alpha == 0


def to_x_prediction(out, kind: ParamKind, z, alpha, sigma):
    """Convert a raw network output into the implied clean-data estimate.

    Args:
        out: network output; for ``XEPS`` either a ``(x_tilde, eps_tilde)`` pair
            or a tensor with doubled channels.
        kind: the parameterization ``out`` is expressed in.
        z: the noisy input the network saw.
        alpha, sigma: schedule coefficients, scalars or per-batch tensors.

    Raises:
        SingularParameterization: eps-prediction evaluated at ``alpha == 0``.
    """
    kind = ParamKind(kind)
    a, s = bcast(alpha, z), bcast(sigma, z)
    if kind is ParamKind.XEPS:
        x_t, e_t = out if isinstance(out, (tuple, list)) else split_xeps(out)
        _check_same_shape(x_t, z, "to_x_prediction")
        return s**2 * x_t + a * (z - s * e_t)
    _check_same_shape(out, z, "to_x_prediction")
    if kind is ParamKind.X:
        return out
    if kind is ParamKind.EPS:
        if _any_zero(alpha):
            raise SingularParameterization(
                "eps-prediction has no implied x at alpha == 0 (zero signal-to-noise)"
            )
        return (z - s * out) / a
    return a * z - s * out


def loss_weight(lambda_t, scheme: WeightScheme):
    """Reconstruction weight ``w(lambda)`` for an x-space squared error.

    ``lambda_t`` may be a float (``-inf`` allowed) or a tensor.
    """
    scheme = WeightScheme(scheme)
    if isinstance(lambda_t, torch.Tensor):
        snr = torch.exp(lambda_t)
        if scheme is WeightScheme.SNR:
            return snr
        if scheme is WeightScheme.TRUNCATED_SNR:
            return torch.clamp(snr, min=1.0)
        return snr + 1.0
    snr = math.exp(lambda_t)
    if scheme is WeightScheme.SNR:
        return snr
    if scheme is WeightScheme.TRUNCATED_SNR:
        return max(snr, 1.0)
    return snr + 1.0
