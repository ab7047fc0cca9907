"""Command-line entry points: ``ingest``, ``train``, ``distill``, ``sample``,
``eval`` and ``pack``.

Exit codes: 0 success, 1 configuration error, 2 runtime or numeric failure,
3 partial ingest failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import audio
from .checkpoint import (
    checkpoint_name,
    ensure_dir,
    load_checkpoint,
    load_extractor,
    read_checkpoint_meta,
    save_checkpoint,
    save_extractor,
)
from .config import RunConfig, derive_seed, load_config, write_config
from .denoiser import UNetConfig, build_model
from .diffusion import sample, sample_ancestral
from .distill import DistillConfig, progressive_distill
from .errors import ConfigError, IncompatibleCheckpoint, IngestError, NumericFailure, PDAudioError
from .metrics import evaluate, train_extractor
from .schedule import make_cosine_schedule
from .tensorfile import read_tensors, write_tensors
from .train import TrainConfig, train, write_loss_csv

log = logging.getLogger("pdaudio")

MANIFEST_FIELDS = ["source", "window", "tensor_path", "norm_id"]


# ---------------------------------------------------------------- data sets


def norm_id(norm: audio.NormStats) -> str:
    return hashlib.sha256(norm.to_json().encode()).hexdigest()[:12]


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_manifest_slices(path) -> tuple[torch.Tensor, audio.NormStats]:
    """Stack every slice referenced by a manifest into one ``(n, 3, M, L)`` tensor."""
    path = Path(path)
    rows = read_manifest(path)
    norm_file = path.parent / "norm_stats.json"
    norm = audio.NormStats.from_json(norm_file.read_text()) if norm_file.exists() else audio.NormStats()
    if not rows:
        return torch.zeros((0, audio.PACKED_CHANNELS, audio.N_MELS, audio.PACKED_FRAMES)), norm
    slices = [read_tensors(path.parent / r["tensor_path"])[0]["slice"] for r in rows]
    return torch.as_tensor(np.stack(slices)), norm


def load_slice_set(path) -> tuple[np.ndarray, audio.NormStats | None]:
    """Slices from a manifest (``.csv``) or a sample file written by ``sample``."""
    path = Path(path)
    if path.suffix == ".csv":
        x, norm = load_manifest_slices(path)
        return x.numpy(), norm
    tensors, meta = read_tensors(path)
    if "slices" not in tensors:
        raise ConfigError(f"{path} holds no 'slices' tensor")
    norm = audio.NormStats.from_json(meta["norm"]) if "norm" in meta else None
    return tensors["slices"], norm


# ---------------------------------------------------------------- commands


def ingest_cmd(cfg: RunConfig, out: Path) -> int:
    src = cfg.ingest.audio_dir
    if src is None or not Path(src).is_dir():
        raise ConfigError(f"ingest.audio_dir {src!r} is not a directory")
    files = sorted(p for p in Path(src).iterdir() if p.suffix.lower() == ".wav")
    slices_dir = ensure_dir(out / "slices")
    manifest_path = out / "manifest.csv"
    if not files:
        log.warning("no WAV files in %s; writing an empty manifest", src)

    # pass 1: decode and collect dB windows and the data-set level range
    failures, windows = [], {}
    for f in files:
        try:
            windows[f] = audio.db_windows(audio.read_wav(f, cfg.ingest.sr), cfg.ingest.sr)
        except IngestError as exc:
            log.error("%s", exc)
            failures.append(str(f))
    peak = max((float(w.max()) for ws in windows.values() for w in ws), default=0.0)
    norm = audio.NormStats(scale_max=max(peak, audio.LOG_FLOOR_DB + 1.0))
    nid = norm_id(norm)
    (out / "norm_stats.json").write_text(norm.to_json() + "\n")

    # pass 2: normalize, pack and store; content hashes make re-runs no-ops
    existing = read_manifest(manifest_path) if manifest_path.exists() else []
    seen = {r["tensor_path"] for r in existing}
    records = list(existing)
    for f, ws in windows.items():
        for k, db in enumerate(ws):
            packed = audio.pack(audio.LongMel(norm.normalize(db)[None].astype(np.float32), norm)).data
            digest = hashlib.sha256(packed.tobytes()).hexdigest()[:20]
            rel = f"slices/{digest}.pdt"
            if rel in seen:
                continue
            write_tensors(out / rel, {"slice": packed}, {"source": f.name, "window": k, "norm_id": nid})
            records.append({"source": f.name, "window": k, "tensor_path": rel, "norm_id": nid})
            seen.add(rel)
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        w.writerows(records)
    log.info("manifest %s: %d slices from %d files", manifest_path, len(records), len(windows))
    if failures:
        log.error("%d of %d files failed to ingest", len(failures), len(files))
        return 3
    return 0


def _model_config(cfg: RunConfig) -> UNetConfig:
    return UNetConfig(**cfg.model.unet_kwargs())


def _require(path, what):
    if path is None or not Path(path).exists():
        raise ConfigError(f"{what} {path!r} does not exist")
    return Path(path)


def train_cmd(cfg: RunConfig, out: Path) -> int:
    data, norm = load_manifest_slices(_require(cfg.train.manifest, "train.manifest"))
    if len(data) == 0:
        raise ConfigError("training manifest holds no slices")
    model = build_model(_model_config(cfg), cfg.model.param_kind, cfg.model.T, derive_seed(cfg.seed, "init"))
    t = cfg.train
    tcfg = TrainConfig(
        lr=t.lr,
        total_steps=t.total_steps,
        batch_size=t.batch_size,
        weighting=t.weighting,
        seed=derive_seed(cfg.seed, "train"),
        snapshot_every=t.snapshot_every,
    )
    history = []
    extra = {"norm": norm.to_json()}
    try:
        train(model, data, tcfg, history=history)
    except NumericFailure as exc:
        model.load_state_dict(exc.last_good_state)
        save_checkpoint(model, out / "model.pdt", step=exc.step or 0, extra=extra)
        write_loss_csv(out / "loss.csv", history)
        log.error("numeric failure at step %s (t=%s); kept last good state", exc.step, exc.t)
        return 2
    save_checkpoint(model, out / "model.pdt", step=t.total_steps, extra=extra)
    write_loss_csv(out / "loss.csv", history)
    return 0


def distill_cmd(cfg: RunConfig, out: Path) -> int:
    d = cfg.distill
    teacher_path = _require(d.teacher, "distill.teacher")
    data, _ = load_manifest_slices(_require(d.manifest, "distill.manifest"))
    if len(data) == 0:
        raise ConfigError("distillation manifest holds no slices")
    teacher = load_checkpoint(teacher_path)
    extra = {k: v for k, v in teacher.checkpoint_meta.items() if k == "norm"}
    dcfg = DistillConfig(
        N0=d.N0,
        K=d.K,
        steps_per_round=d.steps_per_round,
        weighting=d.weighting,
        lr=d.lr,
        batch_size=d.batch_size,
        seed=derive_seed(cfg.seed, "distill"),
    )
    history = []

    def save(N, student):
        save_checkpoint(student, out / checkpoint_name(N), step=dcfg.steps_per_round, extra={**extra, "N": N})

    progressive_distill(teacher, data, dcfg, history=history, on_round=save)
    with open(out / "distill_loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "step", "loss", "lr"])
        w.writerows(history)
    return 0


def sample_cmd(cfg: RunConfig, out: Path) -> int:
    s = cfg.sample
    path = _require(s.checkpoint, "sample.checkpoint")
    meta = read_checkpoint_meta(path)
    if meta.get("layout") != audio.LAYOUT_VERSION:
        raise IncompatibleCheckpoint(
            f"{path}: snake layout {meta.get('layout')!r} does not match {audio.LAYOUT_VERSION!r}"
        )
    model = load_checkpoint(path)
    seed = derive_seed(cfg.seed, "sample")
    if s.sampler == "ddim":
        x = sample(model, s.N, s.batch, seed)
    else:
        x = sample_ancestral(model, make_cosine_schedule(model.schedule_T), s.batch, seed, s.variance)
    x = x.clamp(-1.0, 1.0).to(torch.float32).numpy()
    norm = audio.NormStats.from_json(meta["norm"]) if "norm" in meta else audio.NormStats()
    long = audio.unpack_array(x)
    write_tensors(
        out / "samples.pdt",
        {"slices": x, "long": np.ascontiguousarray(long)},
        # name plus content digest rather than an absolute path, so reruns elsewhere match bit for bit
        {"checkpoint": Path(path).name, "checkpoint_sha256": hashlib.sha256(Path(path).read_bytes()).hexdigest(),
         "N": s.N, "sampler": s.sampler, "norm": norm.to_json()},
    )
    if s.write_wav and x.shape[-2] == audio.N_MELS:
        wav_dir = ensure_dir(out / "wav")
        for k in range(len(x)):
            wave = audio.invert_mel(audio.LongMel(long[k], norm), s.griffin_lim_iters, seed=k)
            audio.write_wav(wav_dir / f"sample_{k:03d}.wav", wave)
    return 0


METRIC_COLUMNS = ["model_id", "N", "PIS", "IIS", "PKID", "IKID", "FAD"]


def format_table(rows: list[dict]) -> str:
    header = f"{'Model':<20} {'N':>5} {'PIS':>8} {'IIS':>8} {'PKID':>9} {'IKID':>9} {'FAD':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['model_id']:<20} {str(r['N']):>5} {r['PIS']:>8.3f} {r['IIS']:>8.3f} "
            f"{r['PKID']:>9.4f} {r['IKID']:>9.4f} {r['FAD']:>9.4f}"
        )
    return "\n".join(lines)


def eval_cmd(cfg: RunConfig, out: Path) -> int:
    e = cfg.eval
    gen, gen_norm = load_slice_set(_require(e.generated, "eval.generated"))
    ref, ref_norm = load_slice_set(_require(e.reference, "eval.reference"))
    if e.extractor is not None:
        extractor = load_extractor(_require(e.extractor, "eval.extractor"))
    else:
        extractor = train_extractor(
            e.extractor_per_class, e.extractor_steps, derive_seed(cfg.seed, "extractor") % 2**31, ref_norm or gen_norm
        )
        save_extractor(extractor, out / "extractor.pdt")
    row = {"model_id": e.model_id, "N": e.N if e.N is not None else "", **evaluate(gen, ref, extractor)}
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    print(format_table([row]))
    return 0


def pack_cmd(cfg: RunConfig, out: Path, src) -> int:
    tensors, meta = read_tensors(_require(src, "--input"))
    key = next((k for k in ("long", "mel") if k in tensors), None)
    if key is None:
        raise ConfigError(f"{src} holds neither a 'long' nor a 'mel' tensor")
    long = tensors[key]
    packed = np.ascontiguousarray(audio.pack_array(long))
    back = np.ascontiguousarray(audio.unpack_array(packed))
    write_tensors(out / "packed.pdt", {"slices": packed}, meta)
    write_tensors(out / "unpacked.pdt", {"long": back}, meta)
    exact = np.array_equal(back, long)
    print(f"pack/unpack round trip {'exact' if exact else 'MISMATCH'} for shape {tuple(long.shape)}")
    return 0 if exact else 2


# ---------------------------------------------------------------- argparse

COMMANDS = ("ingest", "train", "distill", "sample", "eval", "pack")

# flag -> config path, per command
FLAG_OVERRIDES = {
    "ingest": {"audio_dir": "ingest.audio_dir", "sr": "ingest.sr"},
    "train": {"manifest": "train.manifest", "steps": "train.total_steps", "batch_size": "train.batch_size", "lr": "train.lr", "weighting": "train.weighting"},
    "distill": {"teacher": "distill.teacher", "manifest": "distill.manifest", "N0": "distill.N0", "K": "distill.K", "steps_per_round": "distill.steps_per_round", "lr": "distill.lr"},
    "sample": {"checkpoint": "sample.checkpoint", "N": "sample.N", "batch": "sample.batch", "sampler": "sample.sampler"},
    "eval": {"generated": "eval.generated", "reference": "eval.reference", "extractor": "eval.extractor", "model_id": "eval.model_id", "N": "eval.N"},
    "pack": {},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdaudio", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
        for flag in FLAG_OVERRIDES[name]:
            p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, default=None)
        if name == "pack":
            p.add_argument("--input", required=True, help="tensor file holding a 'long' spectrogram")
    return parser


def _overrides(args) -> list[str]:
    items = []
    if args.seed is not None:
        items.append(f"seed={args.seed}")
    if args.out is not None:
        items.append(f"out={json.dumps(args.out)}")
    for flag, target in FLAG_OVERRIDES[args.command].items():
        value = getattr(args, flag)
        if value is not None:
            try:
                json.loads(value)
            except json.JSONDecodeError:
                value = json.dumps(value)
            items.append(f"{target}={value}")
    return items + list(args.set)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        out = ensure_dir(cfg.out)
        write_config(cfg, out / f"config.{args.command}.json")
        if args.command == "pack":
            return pack_cmd(cfg, out, args.input)
        return {
            "ingest": ingest_cmd,
            "train": train_cmd,
            "distill": distill_cmd,
            "sample": sample_cmd,
            "eval": eval_cmd,
        }[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PDAudioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
