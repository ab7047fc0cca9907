"""Progressive distillation of v-prediction diffusion models on mel-spectrogram audio."""

from .diffusion import LatentState, ddim_step, predict_x, q_sample, sample, sample_ancestral
from .distill import DistillConfig, distill_round, distill_target, progressive_distill
from .param import ParamKind, WeightScheme, loss_weight, to_x_prediction
from .schedule import NoiseSchedule, alpha_sigma, log_snr, make_cosine_schedule

__version__ = "0.1.0"

__all__ = [
    "DistillConfig",
    "LatentState",
    "NoiseSchedule",
    "ParamKind",
    "WeightScheme",
    "alpha_sigma",
    "ddim_step",
    "distill_round",
    "distill_target",
    "log_snr",
    "loss_weight",
    "make_cosine_schedule",
    "predict_x",
    "progressive_distill",
    "q_sample",
    "sample",
    "sample_ancestral",
    "to_x_prediction",
]
