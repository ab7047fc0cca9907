"""Forward noising, DDIM and ancestral stepping, and the sampling loops.

A "model" here is any callable ``model(z, t) -> raw output`` exposing a
``param_kind`` attribute and a ``sample_shape`` tuple (per-item shape).  The
U-Net in :mod:`pdaudio.denoiser` and the closed-form toys in
:mod:`pdaudio.toy` all satisfy it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Union

import torch

from .errors import InvalidArgument, NumericFailure
from .param import ParamKind, bcast, to_x_prediction
from .schedule import NoiseSchedule, alpha_sigma

log = logging.getLogger(__name__)

Time = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LatentState:
    """A noisy latent ``z`` at fractional time ``t`` (scalar or one per batch item)."""

    z: torch.Tensor
    t: Time

    def __post_init__(self):
        t = self.t
        bad = bool(((t < 0) | (t > 1)).any()) if isinstance(t, torch.Tensor) else not 0 <= t <= 1
        if bad:
            raise InvalidArgument(f"time must lie in [0, 1], got {t}")


def _coefs(t: Time, like: torch.Tensor):
    """alpha/sigma for ``t`` in a form that broadcasts against ``like``."""
    if isinstance(t, torch.Tensor):
        a, s = alpha_sigma(t.to(torch.float64))
        return bcast(a, like), bcast(s, like)
    return alpha_sigma(t)


def _time_vector(t: Time, batch: int, dtype) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        return t.to(dtype).reshape(-1).expand(batch) if t.numel() == 1 else t.to(dtype)
    return torch.full((batch,), float(t), dtype=dtype)


def q_sample(x0: torch.Tensor, t: Time, eps: torch.Tensor) -> LatentState:
    """Closed-form forward noising ``z_t = alpha_t x0 + sigma_t eps``."""
    if x0.shape != eps.shape:
        raise InvalidArgument(f"q_sample: shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")
    a, s = _coefs(t, x0)
    return LatentState(a * x0 + s * eps, t)


def predict_x(model, z: torch.Tensor, t: Time) -> torch.Tensor:
    """Run ``model`` and convert its output to a clean-data estimate."""
    out = model(z, _time_vector(t, z.shape[0], z.dtype))
    if isinstance(t, torch.Tensor):
        a, s = alpha_sigma(t.to(torch.float64))
        a, s = a.to(z.dtype), s.to(z.dtype)
    else:
        a, s = alpha_sigma(t)
    return to_x_prediction(out, model.param_kind, z, a, s)


def ddim_step(state: LatentState, x_hat: torch.Tensor, t_next: Time) -> LatentState:
    """Deterministic DDIM move from ``state.t`` to the earlier time ``t_next``.

    ``z' = alpha' x_hat + (sigma' / sigma) (z - alpha x_hat)``
    """
    t = state.t
    if isinstance(t, torch.Tensor) or isinstance(t_next, torch.Tensor):
        tt = torch.as_tensor(t, dtype=torch.float64)
        tn = torch.as_tensor(t_next, dtype=torch.float64)
        if bool((tn >= tt).any()):
            raise InvalidArgument("ddim_step: t_next must be strictly earlier than t")
        if bool((tt == 0).any()):
            raise InvalidArgument("ddim_step: sigma_t is zero at t = 0")
    else:
        if t_next >= t:
            raise InvalidArgument(f"ddim_step: t_next={t_next} must be < t={t}")
        if t == 0:
            raise InvalidArgument("ddim_step: sigma_t is zero at t = 0")
    z = state.z
    a, s = _coefs(t, z)
    a2, s2 = _coefs(t_next, z)
    ratio = s2 / s
    z_next = a2 * x_hat + ratio * (z - a * x_hat)
    return LatentState(z_next.to(z.dtype), t_next)


def _sample_shape(model, batch: int):
    shape = getattr(model, "sample_shape", None)
    if shape is None:
        raise InvalidArgument("model does not declare a sample_shape")
    return (batch, *shape)


def _model_dtype(model):
    if isinstance(model, torch.nn.Module):
        for p in model.parameters():
            return p.dtype
    return getattr(model, "dtype", torch.float32)


class _eval_mode:
    """Put a module in inference mode for the duration of a block."""

    def __init__(self, model):
        self.model = model
        self.was_training = None

    def __enter__(self):
        if isinstance(self.model, torch.nn.Module):
            self.was_training = self.model.training
            self.model.eval()
        return self.model

    def __exit__(self, *exc):
        if self.was_training:
            self.model.train()


def initial_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=g, dtype=dtype)


@torch.no_grad()
def sample(model, N: int, batch: int, seed: int, z1: torch.Tensor | None = None) -> torch.Tensor:
    """Generate ``batch`` samples with ``N`` deterministic DDIM steps.

    The loop visits ``t = N/N, ..., 1/N`` and returns the clean estimate from
    the final model call rather than stepping onto ``t = 0``.

    Args:
        z1: optional starting noise; drawn from ``seed`` when omitted.
    """
    if N < 1:
        raise InvalidArgument(f"N must be >= 1, got {N}")
    if z1 is None:
        z1 = initial_noise(_sample_shape(model, batch), seed, _model_dtype(model))
    state = LatentState(z1, 1.0)
    with _eval_mode(model):
        for i in range(N, 0, -1):
            t = i / N
            x_hat = predict_x(model, state.z, t)
            if not torch.isfinite(x_hat).all():
                raise NumericFailure(f"non-finite prediction at sampler step {i}/{N}", step=i, t=t)
            if i == 1:
                return x_hat
            state = ddim_step(state, x_hat, (i - 1) / N)
    raise AssertionError("unreachable")


def posterior_coefs(s: NoiseSchedule, i: int, variance: str = "posterior"):
    """Coefficients of ``q(z_{i-1} | z_i, x)`` on the discrete grid.

    Returns ``(coef_x, coef_z, std)`` so that the mean is
    ``coef_x * x + coef_z * z_i``.  ``variance`` selects the fixed reverse
    variance: ``"posterior"`` (beta tilde, the lower bound) or ``"beta"``.
    """
    if not 1 <= i <= s.T:
        raise InvalidArgument(f"step index must lie in 1..{s.T}, got {i}")
    a_prev, a_cur = float(s.alpha[i - 1]), float(s.alpha[i])
    s_prev2 = float(s.sigma[i - 1]) ** 2
    s_cur2 = float(s.sigma[i]) ** 2
    a_step = a_cur / a_prev
    beta = 1.0 - a_step**2
    coef_x = a_prev * beta / s_cur2
    coef_z = a_step * s_prev2 / s_cur2
    if variance == "posterior":
        var = s_prev2 * beta / s_cur2
    elif variance == "beta":
        var = beta
    else:
        raise InvalidArgument(f"unknown variance mode {variance!r}")
    return coef_x, coef_z, var**0.5


def ancestral_step(
    state: LatentState,
    x_hat: torch.Tensor,
    i: int,
    s: NoiseSchedule,
    noise: torch.Tensor,
    variance: str = "posterior",
) -> LatentState:
    """One stochastic DDPM reverse step from grid index ``i`` to ``i - 1``.

    The final step (``i == 1``) adds no noise.
    """
    coef_x, coef_z, std = posterior_coefs(s, i, variance)
    mean = coef_x * x_hat + coef_z * state.z
    if i > 1:
        mean = mean + std * noise
    return LatentState(mean, (i - 1) / s.T)


@torch.no_grad()
def sample_ancestral(
    model, s: NoiseSchedule, batch: int, seed: int, variance: str = "posterior"
) -> torch.Tensor:
    """Full ``T``-step ancestral sampling with a fixed reverse variance."""
    dtype = _model_dtype(model)
    shape = _sample_shape(model, batch)
    g = torch.Generator().manual_seed(int(seed))
    state = LatentState(torch.randn(shape, generator=g, dtype=dtype), 1.0)
    with _eval_mode(model):
        for i in range(s.T, 0, -1):
            x_hat = predict_x(model, state.z, i / s.T)
            if not torch.isfinite(x_hat).all():
                raise NumericFailure(f"non-finite prediction at ancestral step {i}", step=i)
            noise = torch.randn(shape, generator=g, dtype=dtype)
            state = ancestral_step(state, x_hat, i, s, noise, variance)
    return state.z
