"""Self-describing model checkpoints on top of the tensor container."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .audio import LAYOUT_VERSION
from .denoiser import DenoiserModel, UNetConfig
from .errors import IncompatibleCheckpoint
from .metrics import ToneClassifier
from .schedule import FAMILY
from .tensorfile import read_tensors, write_tensors

FORMAT = "pdaudio-checkpoint"
FORMAT_VERSION = 1
_OPT_PREFIX = "optim/"


def _state_arrays(module: torch.nn.Module) -> tuple[dict, dict]:
    arrays, int_dtypes = {}, {}
    for name, v in module.state_dict().items():
        v = v.detach().cpu()
        if not v.is_floating_point():
            int_dtypes[name] = str(v.dtype).replace("torch.", "")
            v = v.to(torch.float64)
        arrays[name] = v.numpy()
    return arrays, int_dtypes


def _load_state(module: torch.nn.Module, arrays: dict, int_dtypes: dict) -> None:
    state = {}
    for name, ref in module.state_dict().items():
        if name not in arrays:
            raise IncompatibleCheckpoint(f"checkpoint lacks tensor {name!r}")
        t = torch.from_numpy(arrays[name])
        if name in int_dtypes:
            t = t.to(getattr(torch, int_dtypes[name]))
        state[name] = t
    module.load_state_dict(state)


def save_checkpoint(model: DenoiserModel, path, optimizer=None, step: int = 0, extra: dict | None = None) -> None:
    arrays, int_dtypes = _state_arrays(model)
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            for key, val in st.items():
                arrays[f"{_OPT_PREFIX}{names[id(p)]}/{key}"] = (
                    val.detach().cpu().to(torch.float64).numpy() if torch.is_tensor(val) else np.float64(val)
                )
    meta = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "unet": model.config.to_dict(),
        "param_kind": model.param_kind.value,
        "schedule": {"family": FAMILY, "T": model.schedule_T},
        "layout": LAYOUT_VERSION,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "int_tensors": int_dtypes,
        "step": int(step),
        **(extra or {}),
    }
    write_tensors(path, arrays, meta)


def read_checkpoint_meta(path) -> dict:
    return read_tensors(path)[1]


def load_checkpoint(path) -> DenoiserModel:
    arrays, meta = read_tensors(path)
    if meta.get("format") != FORMAT:
        raise IncompatibleCheckpoint(f"{path}: not a model checkpoint")
    if meta.get("version") != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: checkpoint version {meta.get('version')}, expected {FORMAT_VERSION}")
    if meta["schedule"]["family"] != FAMILY:
        raise IncompatibleCheckpoint(f"{path}: unsupported schedule family {meta['schedule']['family']!r}")
    model = DenoiserModel(UNetConfig.from_dict(meta["unet"]), meta["param_kind"], meta["schedule"]["T"])
    model = model.to(getattr(torch, meta.get("dtype", "float32")))
    _load_state(model, {k: v for k, v in arrays.items() if not k.startswith(_OPT_PREFIX)}, meta["int_tensors"])
    model.checkpoint_meta = meta
    model.eval()
    return model


def optimizer_state(path) -> dict:
    """Optimizer tensors stored in a checkpoint, keyed ``param_name/slot``."""
    arrays, _ = read_tensors(path)
    return {k[len(_OPT_PREFIX):]: v for k, v in arrays.items() if k.startswith(_OPT_PREFIX)}


def save_extractor(model: ToneClassifier, path) -> None:
    arrays, int_dtypes = _state_arrays(model)
    write_tensors(path, arrays, {"format": "pdaudio-extractor", "version": 1, "in_shape": list(model.in_shape)})


def load_extractor(path) -> ToneClassifier:
    arrays, meta = read_tensors(path)
    if meta.get("format") != "pdaudio-extractor":
        raise IncompatibleCheckpoint(f"{path}: not an extractor checkpoint")
    model = ToneClassifier(tuple(meta["in_shape"]))
    _load_state(model, arrays, {})
    model.eval()
    return model


def checkpoint_name(N: int) -> str:
    return f"model_N{N}.pdt"


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
