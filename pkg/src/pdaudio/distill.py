"""Progressive distillation: teach a student to cover two teacher DDIM steps
with one of its own, then halve the step count and repeat."""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass

import torch

from .diffusion import LatentState, _eval_mode, ddim_step, predict_x
from .errors import DegenerateTarget, InvalidArgument
from .param import ParamKind, WeightScheme, bcast
from .schedule import alpha_sigma
from .train import cosine_lr, loss_and_grad, noisy_input

log = logging.getLogger(__name__)

DENOMINATOR_EPS = 1e-12


@dataclass
class DistillConfig:
    N0: int = 64
    K: int = 3
    steps_per_round: int = 10_000
    weighting: WeightScheme = WeightScheme.SNR_PLUS_ONE
    kind: ParamKind | None = None
    lr: float = 2e-5
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        self.weighting = WeightScheme(self.weighting)
        if self.kind is not None:
            self.kind = ParamKind(self.kind)
        if self.N0 < 2:
            raise InvalidArgument("N0 must be >= 2")
        if self.K < 1:
            raise InvalidArgument("K must be >= 1")
        if self.N0 % (2**self.K):
            raise InvalidArgument(
                f"N0={self.N0} is not divisible by 2**K={2**self.K}; "
                "the step count would fall below 1"
            )
        if self.steps_per_round < 0:
            raise InvalidArgument("steps_per_round must be >= 0")
        if self.batch_size < 1 or not self.lr > 0:
            raise InvalidArgument("batch_size must be >= 1 and lr > 0")

    def schedule(self) -> list[int]:
        """Student step counts, one per round."""
        return [self.N0 // 2**k for k in range(self.K)]


def _grid_index(t, N: int):
    """Recover the integer ``i`` with ``t == i / N``; rejects off-grid times."""
    tt = torch.as_tensor(t, dtype=torch.float64)
    i = torch.round(tt * N)
    if bool((torch.abs(tt * N - i) > 1e-6).any()) or bool((i < 1).any()) or bool((i > N).any()):
        raise InvalidArgument(f"time {t} is not on the grid i/{N} with 1 <= i <= {N}")
    return i


@torch.no_grad()
def distill_target(teacher, state: LatentState, N: int) -> torch.Tensor:
    """Student regression target from two teacher DDIM steps.

    From ``z_t`` at ``t = i/N`` the teacher steps to ``t' = t - 0.5/N`` and
    ``t'' = t - 1/N``; the returned ``x_tilde`` is the clean estimate that
    would make a single student DDIM step ``t -> t''`` land on the same
    ``z_t''``.
    """
    i = _grid_index(state.t, N)
    scalar = not isinstance(state.t, torch.Tensor)
    if scalar:
        i = int(i.item())
    t, t1, t2 = i / N, (2 * i - 1) / (2 * N), (i - 1) / N
    z = state.z
    with _eval_mode(teacher):
        s0 = LatentState(z, t)
        s1 = ddim_step(s0, predict_x(teacher, z, t), t1)
        s2 = ddim_step(s1, predict_x(teacher, s1.z, t1), t2)
    if scalar:
        (a, s), (a2, s2_) = alpha_sigma(t), alpha_sigma(t2)
        ratio = s2_ / s
        den = a2 - ratio * a
        if abs(den) < DENOMINATOR_EPS:
            raise DegenerateTarget(f"target denominator {den!r} at t={t}, N={N}")
    else:
        a, s = alpha_sigma(t)
        a2, s2_ = alpha_sigma(t2)
        ratio = s2_ / s
        den = a2 - ratio * a
        if bool((den.abs() < DENOMINATOR_EPS).any()):
            raise DegenerateTarget(f"target denominator underflow at N={N}")
        ratio, den = bcast(ratio, z), bcast(den, z)
    return ((s2.z - ratio * z) / den).to(z.dtype)


def _round_seed(seed: int, N: int) -> int:
    h = hashlib.sha256(f"{seed}:distill:N{N}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def distill_round(teacher, data: torch.Tensor, N: int, cfg: DistillConfig, history=None, student=None):
    """Train a fresh copy of ``teacher`` to sample in ``N`` steps.

    The teacher is frozen in inference mode; the student starts as an exact
    copy and receives ``cfg.steps_per_round`` Adam updates on
    ``w(lambda_t) * ||x_tilde - x_hat(z_t)||^2`` with ``t = i / N``.

    Args:
        student: optional initial student; defaults to a deep copy of
            ``teacher``.  It is trained in place.
    """
    if len(data) == 0:
        raise InvalidArgument("distillation data set is empty")
    if cfg.kind is not None and ParamKind(cfg.kind) is not ParamKind(teacher.param_kind):
        raise InvalidArgument(
            f"config asks for {cfg.kind.value} but the teacher predicts {teacher.param_kind.value}"
        )
    if student is None:
        student = copy.deepcopy(teacher)
    if ParamKind(student.param_kind) is not ParamKind(teacher.param_kind):
        raise InvalidArgument("student and teacher must share a parameterization")
    if cfg.steps_per_round == 0:
        return student
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(_round_seed(cfg.seed, N))
    opt = torch.optim.Adam(student.parameters(), lr=cfg.lr)
    student.train()
    try:
        for step in range(cfg.steps_per_round):
            lr = cosine_lr(step, cfg.steps_per_round, cfg.lr)
            for group in opt.param_groups:
                group["lr"] = lr
            idx = torch.randint(0, len(data), (cfg.batch_size,), generator=g)
            x = data[idx]
            t = torch.randint(1, N + 1, (cfg.batch_size,), generator=g).to(torch.float64) / N
            eps = torch.randn(x.shape, generator=g, dtype=x.dtype)
            z = noisy_input(x, t, eps)
            target = distill_target(teacher, LatentState(z, t), N)
            loss, _ = loss_and_grad(student, x, t, eps, cfg.weighting, target=target)
            opt.step()
            if history is not None:
                history.append((N, step, loss, lr))
            if step % 100 == 0:
                log.info("distill N=%d step %d loss %.5f", N, step, loss)
    finally:
        for p in teacher.parameters():
            p.requires_grad_(True)
    student.eval()
    return student


def progressive_distill(model, data: torch.Tensor, cfg: DistillConfig, history=None, on_round=None):
    """Run ``cfg.K`` halving rounds starting from ``cfg.N0`` student steps.

    Returns the students in round order (``N0, N0/2, ...``).  ``on_round`` is
    called as ``on_round(N, student)`` after each round, e.g. to checkpoint.
    """
    students = []
    teacher = model
    for N in cfg.schedule():
        student = distill_round(teacher, data, N, cfg, history)
        students.append(student)
        if on_round is not None:
            on_round(N, student)
        teacher = student
    return students
