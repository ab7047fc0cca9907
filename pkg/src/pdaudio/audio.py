"""Audio ingestion: WAV decoding, log-mel analysis, normalization, snake
packing of 128 x 384 spectrograms into 3 x 128 x 128 slices, and Griffin-Lim
inversion back to a waveform."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import librosa
import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch

from .errors import IngestError, InvalidArgument

log = logging.getLogger(__name__)

SR = 22050
N_FFT = 2048
HOP = 512
N_MELS = 128
FRAMES = 384
PACKED_CHANNELS = 3
PACKED_FRAMES = FRAMES // PACKED_CHANNELS
LOG_FLOOR_DB = -80.0
LAYOUT_VERSION = "snake-boustrophedon-v1"

# frame order of the packed tensor: channel 1 runs backwards in time
_SNAKE = np.concatenate(
    [
        np.arange(0, PACKED_FRAMES),
        np.arange(2 * PACKED_FRAMES - 1, PACKED_FRAMES - 1, -1),
        np.arange(2 * PACKED_FRAMES, FRAMES),
    ]
)
_UNSNAKE = np.argsort(_SNAKE)


@dataclass(frozen=True)
class NormStats:
    """Affine map between floored dB values and ``[-1, 1]``."""

    log_floor: float = LOG_FLOOR_DB
    scale_min: float = LOG_FLOOR_DB
    scale_max: float = 0.0

    def __post_init__(self):
        if not self.scale_min < self.scale_max:
            raise InvalidArgument("NormStats needs scale_min < scale_max")

    def normalize(self, db):
        y = 2.0 * (db - self.scale_min) / (self.scale_max - self.scale_min) - 1.0
        return np.clip(y, -1.0, 1.0)

    def denormalize(self, y):
        return (np.asarray(y, dtype=np.float64) + 1.0) * 0.5 * (self.scale_max - self.scale_min) + self.scale_min

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        return cls(**json.loads(text))


@dataclass
class LongMel:
    """Normalized log-mel spectrogram, shape ``(1, 128, 384)``."""

    data: np.ndarray
    norm: NormStats = NormStats()


@dataclass
class MelSlice:
    """Snake-packed spectrogram, shape ``(3, 128, 128)``."""

    data: np.ndarray
    norm: NormStats = NormStats()


def mel_filterbank(sr: int = SR, n_fft: int = N_FFT, n_mels: int = N_MELS) -> np.ndarray:
    """Slaney-scale triangular filters with unit peak (no area normalization)."""
    return librosa.filters.mel(sr=sr, n_fft=n_fft, n_mels=n_mels, norm=None, htk=False)


def mel_center_frequencies(sr: int = SR, n_mels: int = N_MELS) -> np.ndarray:
    # filter k peaks at mel point k + 1 of n_mels + 2 equally spaced points
    return librosa.mel_frequencies(n_mels=n_mels + 2, fmin=0.0, fmax=sr / 2.0, htk=False)[1:-1]


def _stft_scale(n_fft: int = N_FFT) -> float:
    # a full-scale sine maps to unit magnitude
    return 2.0 / np.sum(scipy.signal.get_window("hann", n_fft, fftbins=True))


def required_samples(frames: int = FRAMES) -> int:
    return N_FFT + (frames - 1) * HOP


def mel_db(wave: np.ndarray, sr: int = SR, log_floor: float = LOG_FLOOR_DB) -> np.ndarray:
    """Floored dB mel power of every full analysis frame, shape ``(128, n_frames)``.

    Frames are not centre-padded: frame ``k`` covers samples
    ``[k * hop, k * hop + n_fft)``.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if len(wave) < N_FFT:
        return np.zeros((N_MELS, 0))
    spec = librosa.stft(wave, n_fft=N_FFT, hop_length=HOP, window="hann", center=False)
    power = (np.abs(spec) * _stft_scale()) ** 2
    mel = mel_filterbank(sr) @ power
    return np.maximum(10.0 * np.log10(np.maximum(mel, 1e-30)), log_floor)


def mel_spectrogram(wave: np.ndarray, sr: int = SR, norm: NormStats | None = None) -> LongMel:
    """Normalized 128 x 384 log-mel spectrogram, centre-cropped in time."""
    norm = norm or NormStats()
    need = required_samples()
    if len(wave) < need:
        raise InvalidArgument(f"need at least {need} samples for {FRAMES} frames, got {len(wave)}")
    db = mel_db(wave, sr, norm.log_floor)
    start = (db.shape[1] - FRAMES) // 2
    db = db[:, start : start + FRAMES]
    return LongMel(norm.normalize(db)[None].astype(np.float32), norm)


def _check_trailing(a, shape, what):
    if tuple(a.shape[-3:]) != shape:
        raise InvalidArgument(f"{what}: expected trailing shape {shape}, got {tuple(a.shape)}")


def pack_array(a):
    """``(..., 1, M, 384) -> (..., 3, M, 128)`` for numpy arrays or torch tensors."""
    _check_trailing(a, (1, a.shape[-2], FRAMES), "pack")
    idx = torch.as_tensor(_SNAKE) if isinstance(a, torch.Tensor) else _SNAKE
    g = a[..., 0, :, :][..., idx]
    m = a.shape[-2]
    g = g.reshape(*a.shape[:-3], m, PACKED_CHANNELS, PACKED_FRAMES)
    return g.swapaxes(-3, -2) if not isinstance(g, torch.Tensor) else g.transpose(-3, -2)


def unpack_array(p):
    """Inverse of :func:`pack_array`."""
    _check_trailing(p, (PACKED_CHANNELS, p.shape[-2], PACKED_FRAMES), "unpack")
    m = p.shape[-2]
    if isinstance(p, torch.Tensor):
        flat = p.transpose(-3, -2).reshape(*p.shape[:-3], m, FRAMES)
        return flat[..., torch.as_tensor(_UNSNAKE)].unsqueeze(-3)
    flat = p.swapaxes(-3, -2).reshape(*p.shape[:-3], m, FRAMES)
    return flat[..., _UNSNAKE][..., None, :, :]


def pack(m: LongMel) -> MelSlice:
    if tuple(m.data.shape) != (1, N_MELS, FRAMES):
        raise InvalidArgument(f"pack expects (1, {N_MELS}, {FRAMES}), got {tuple(m.data.shape)}")
    return MelSlice(np.ascontiguousarray(pack_array(m.data)), m.norm)


def unpack(s: MelSlice) -> LongMel:
    if tuple(s.data.shape) != (PACKED_CHANNELS, N_MELS, PACKED_FRAMES):
        raise InvalidArgument(
            f"unpack expects ({PACKED_CHANNELS}, {N_MELS}, {PACKED_FRAMES}), got {tuple(s.data.shape)}"
        )
    return LongMel(np.ascontiguousarray(unpack_array(s.data)), s.norm)


def read_wav(path, sr: int = SR) -> np.ndarray:
    """Decode a 16-bit PCM WAV file to mono float64 in ``[-1, 1)`` at ``sr``."""
    try:
        file_sr, raw = scipy.io.wavfile.read(path)
    except Exception as exc:  # scipy raises ValueError, EOFError, struct.error ...
        raise IngestError(f"cannot decode WAV: {exc}", filename=str(path)) from exc
    if raw.dtype != np.int16:
        raise IngestError(f"expected 16-bit PCM, got {raw.dtype}", filename=str(path))
    wave = raw.astype(np.float64) / 32768.0
    if wave.ndim == 2:
        wave = wave.mean(axis=1)
    if file_sr != sr:
        g = np.gcd(int(file_sr), int(sr))
        wave = scipy.signal.resample_poly(wave, sr // g, file_sr // g)
    return wave


def write_wav(path, wave: np.ndarray, sr: int = SR) -> None:
    pcm = np.clip(np.round(np.asarray(wave) * 32767.0), -32768, 32767).astype(np.int16)
    scipy.io.wavfile.write(path, sr, pcm)


def db_windows(wave: np.ndarray, sr: int = SR, log_floor: float = LOG_FLOOR_DB) -> list[np.ndarray]:
    """Consecutive non-overlapping 384-frame dB windows; the remainder is dropped."""
    db = mel_db(wave, sr, log_floor)
    n = db.shape[1] // FRAMES
    return [db[:, k * FRAMES : (k + 1) * FRAMES] for k in range(n)]


def slice_audio(path, sr: int = SR, norm: NormStats | None = None) -> list[LongMel]:
    norm = norm or NormStats()
    wave = read_wav(path, sr)
    return [
        LongMel(norm.normalize(db)[None].astype(np.float32), norm)
        for db in db_windows(wave, sr, norm.log_floor)
    ]


def mel_to_linear_power(mel_power: np.ndarray, sr: int = SR, iterations: int = 300) -> np.ndarray:
    """Non-negative linear-frequency power ``P`` with ``fb @ P ~= mel_power``.

    Minimizes the generalized KL divergence with multiplicative updates, which
    keep ``P >= 0`` and, unlike a squared-error fit, resolve quiet cells as
    well as loud ones.
    """
    fb = mel_filterbank(sr)
    colsum = np.maximum(fb.sum(axis=0)[:, None], 1e-10)
    p = (fb.T @ mel_power) / colsum**2 + 1e-12
    for _ in range(iterations):
        p *= (fb.T @ (mel_power / np.maximum(fb @ p, 1e-30))) / colsum
    return p


def invert_mel(m: LongMel, iterations: int = 64, sr: int = SR, seed: int = 0) -> np.ndarray:
    """Waveform whose log-mel spectrogram approximates ``m``.

    Denormalizes, subtracts the floor (so floor cells become silence), maps
    mel power back to linear frequency with a non-negative fit, then recovers
    phase with Griffin-Lim from a seeded random start.
    """
    if iterations < 1:
        raise InvalidArgument("iterations must be >= 1")
    db = m.norm.denormalize(np.asarray(m.data)[0])
    power = np.maximum(10.0 ** (db / 10.0) - 10.0 ** (m.norm.log_floor / 10.0), 0.0)
    n_frames = power.shape[1]
    length = N_FFT + (n_frames - 1) * HOP
    if not power.any():
        return np.zeros(length)
    mag = np.sqrt(mel_to_linear_power(power, sr)) / _stft_scale()
    return librosa.griffinlim(
        mag,
        n_iter=iterations,
        hop_length=HOP,
        win_length=N_FFT,
        n_fft=N_FFT,
        window="hann",
        center=False,
        length=length,
        init="random",
        random_state=np.random.RandomState(seed),
    )
