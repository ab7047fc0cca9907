"""Declarative run configuration: one JSON file, per-command sections, flag
overrides, strict validation before any work starts."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, InvalidArgument
from .param import ParamKind, WeightScheme


def derive_seed(master: int, label: str) -> int:
    """Independent 64-bit stream seed for ``label``; adding labels never shifts others."""
    h = hashlib.sha256(f"{int(master)}/{label}".encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass
class ModelSection:
    n_channels: int = 3
    n_mels: int = 128
    length: int = 128
    base_width: int = 64
    depth: int = 3
    channel_mult: list = field(default_factory=lambda: [1, 2, 2])
    kernel_sizes: list = field(default_factory=lambda: [3, 5])
    time_embed_dim: int = 64
    use_attention: bool = True
    attention_heads: int = 4
    zero_init_out: bool = True
    input_skip: bool = True
    param_kind: str = "v"
    T: int = 1000

    def unet_kwargs(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("param_kind")
        d.pop("T")
        return d


@dataclass
class IngestSection:
    audio_dir: str | None = None
    sr: int = 22050


@dataclass
class TrainSection:
    manifest: str | None = None
    lr: float = 2e-5
    total_steps: int = 1000
    batch_size: int = 8
    weighting: str = "snr_plus_one"
    snapshot_every: int = 100


@dataclass
class DistillSection:
    teacher: str | None = None
    manifest: str | None = None
    N0: int = 64
    K: int = 3
    steps_per_round: int = 10_000
    weighting: str = "snr_plus_one"
    lr: float = 2e-5
    batch_size: int = 8


@dataclass
class SampleSection:
    checkpoint: str | None = None
    N: int = 64
    batch: int = 8
    sampler: str = "ddim"
    variance: str = "posterior"
    griffin_lim_iters: int = 64
    write_wav: bool = True


@dataclass
class EvalSection:
    generated: str | None = None
    reference: str | None = None
    extractor: str | None = None
    model_id: str = "model"
    N: int | None = None
    extractor_per_class: int = 4
    extractor_steps: int = 400


SECTIONS = {
    "model": ModelSection,
    "ingest": IngestSection,
    "train": TrainSection,
    "distill": DistillSection,
    "sample": SampleSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    model: ModelSection = field(default_factory=ModelSection)
    ingest: IngestSection = field(default_factory=IngestSection)
    train: TrainSection = field(default_factory=TrainSection)
    distill: DistillSection = field(default_factory=DistillSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"seed", "out", *SECTIONS}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        kwargs = {k: d[k] for k in ("seed", "out") if k in d}
        for name, section in SECTIONS.items():
            body = d.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(section)}
            bad = set(body) - known
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = section(**body)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        try:
            if not isinstance(self.seed, int) or self.seed < 0:
                raise ConfigError("seed must be a non-negative integer")
            ParamKind(self.model.param_kind)
            WeightScheme(self.train.weighting)
            WeightScheme(self.distill.weighting)
            if self.model.T < 1:
                raise ConfigError("model.T must be >= 1")
            if self.sample.sampler not in ("ddim", "ancestral"):
                raise ConfigError(f"unknown sampler {self.sample.sampler!r}")
            if self.sample.N < 1 or self.sample.batch < 1 or self.sample.griffin_lim_iters < 1:
                raise ConfigError("sample.N, sample.batch and sample.griffin_lim_iters must be >= 1")
            if self.train.total_steps < 0 or self.train.batch_size < 1 or not self.train.lr > 0:
                raise ConfigError("train needs total_steps >= 0, batch_size >= 1, lr > 0")
            d = self.distill
            if d.N0 < 2 or d.K < 1 or d.N0 % (2**d.K):
                raise ConfigError(f"distill.N0={d.N0} must be >= 2 and divisible by 2**K (K={d.K})")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` (or top-level ``key=value``) overrides; values parse as JSON."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        target = d
        for p in parts[:-1]:
            target = target.setdefault(p, {})
            if not isinstance(target, dict):
                raise ConfigError(f"override {item!r} does not address a section")
        target[parts[-1]] = _coerce(value)
    return d


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    try:
        return RunConfig.from_dict(apply_overrides(raw, overrides or []))
    except (TypeError, InvalidArgument) as exc:
        raise ConfigError(str(exc)) from exc


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
