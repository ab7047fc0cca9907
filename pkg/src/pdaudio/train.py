"""Weighted x-space regression loss, its gradients, and the Adam training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass

import torch

from .errors import InvalidArgument, NumericFailure
from .param import ParamKind, WeightScheme, bcast, loss_weight, to_x_prediction
from .schedule import alpha_sigma, log_snr_t

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 2e-5
    total_steps: int = 1000
    batch_size: int = 8
    weighting: WeightScheme = WeightScheme.SNR_PLUS_ONE
    seed: int = 0
    snapshot_every: int = 100
    log_every: int = 1

    def __post_init__(self):
        self.weighting = WeightScheme(self.weighting)
        if not self.lr > 0:
            raise InvalidArgument("lr must be positive")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.total_steps < 0:
            raise InvalidArgument("total_steps must be >= 0")


def cosine_lr(step: int, total: int, lr: float) -> float:
    """Cosine annealing from ``lr`` at step 0 to 0 at ``total``."""
    if total <= 0:
        return lr
    return lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


def weighted_loss(model, z, t, target, weighting: WeightScheme) -> torch.Tensor:
    """Batch mean of ``w(lambda_t) * mean((target - x_hat(z_t))^2)``.

    The squared norm is averaged over elements rather than summed so the scale
    does not depend on the slice size.
    """
    t = torch.as_tensor(t, dtype=torch.float64)
    out = model(z, t.to(z.dtype))
    a, s = alpha_sigma(t)
    x_hat = to_x_prediction(out, model.param_kind, z, a.to(z.dtype), s.to(z.dtype))
    per_item = (target - x_hat).square().reshape(z.shape[0], -1).mean(dim=1)
    w = loss_weight(log_snr_t(t), weighting).to(z.dtype)
    return (w * per_item).mean()


def noisy_input(x, t, eps):
    a, s = alpha_sigma(torch.as_tensor(t, dtype=torch.float64))
    return bcast(a, x) * x + bcast(s, x) * eps


def loss_and_grad(model, x, t, eps, weighting: WeightScheme, target=None):
    """Loss and per-parameter gradients for one batch.

    ``z = alpha_t x + sigma_t eps`` is regressed towards ``target`` (the data
    ``x`` itself for ordinary training, a teacher target when distilling).
    Gradients are left in ``.grad`` as well as returned by name.

    Raises:
        NumericFailure: the loss is not finite; carries the batch times.
    """
    z = noisy_input(x, t, eps)
    target = x if target is None else target
    model.zero_grad(set_to_none=True)
    loss = weighted_loss(model, z, t, target, weighting)
    if not torch.isfinite(loss):
        raise NumericFailure(f"non-finite loss {loss.item()}", t=torch.as_tensor(t).tolist())
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    return loss.item(), grads


def sample_steps(g: torch.Generator, batch: int, T: int, kind: ParamKind) -> torch.Tensor:
    """Uniform grid indices in ``1..T``; eps-prediction skips ``T`` where alpha is 0."""
    high = T if ParamKind(kind) is ParamKind.EPS else T + 1
    return torch.randint(1, high, (batch,), generator=g)


def _finite_state(model) -> bool:
    return all(torch.isfinite(v).all() for v in model.state_dict().values() if v.is_floating_point())


def train(model, data: torch.Tensor, cfg: TrainConfig, T: int | None = None, history=None):
    """Train ``model`` in place with Adam and cosine-annealed learning rate.

    Args:
        data: tensor of clean slices, shape ``(n, C, M, L)``.
        T: number of discrete noise levels; defaults to ``model.schedule_T``.
        history: optional list receiving ``(step, loss, lr)`` rows.

    Returns:
        The same ``model`` object.

    Raises:
        NumericFailure: with ``last_good_state`` holding the most recent
            finite parameter snapshot.
    """
    if len(data) == 0:
        raise InvalidArgument("training data set is empty")
    T = T or model.schedule_T
    if cfg.total_steps == 0:
        return model
    g = torch.Generator().manual_seed(int(cfg.seed))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    snapshot = copy.deepcopy(model.state_dict())
    for step in range(cfg.total_steps):
        lr = cosine_lr(step, cfg.total_steps, cfg.lr)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = torch.randint(0, len(data), (cfg.batch_size,), generator=g)
        x = data[idx]
        t = sample_steps(g, cfg.batch_size, T, model.param_kind).to(torch.float64) / T
        eps = torch.randn(x.shape, generator=g, dtype=x.dtype)
        try:
            loss, _ = loss_and_grad(model, x, t, eps, cfg.weighting)
        except NumericFailure as exc:
            exc.step = step
            exc.last_good_state = snapshot
            raise
        opt.step()
        if history is not None and step % cfg.log_every == 0:
            history.append((step, loss, lr))
        if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0 and _finite_state(model):
            snapshot = copy.deepcopy(model.state_dict())
        if step % 100 == 0:
            log.info("train step %d loss %.5f lr %.3g", step, loss, lr)
    return model


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for row in history:
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])
