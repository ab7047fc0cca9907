"""Synthetic tone corpora: labeled single-tone slices for the stand-in
classifier, and multi-file note sequences for end-to-end runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import audio

TIMBRES = ("sine", "square", "sawtooth", "triangle")
N_PITCH_CLASSES = 12
BASE_MIDI = 72  # C5


def midi_to_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69.0) / 12.0)


def harmonic_amplitudes(timbre: str, n: int) -> np.ndarray:
    """Fourier-series amplitudes of the first ``n`` harmonics (signed for triangle)."""
    k = np.arange(1, n + 1, dtype=np.float64)
    if timbre == "sine":
        return (k == 1).astype(np.float64)
    if timbre == "square":
        return np.where(k % 2 == 1, 1.0 / k, 0.0)
    if timbre == "sawtooth":
        return 1.0 / k
    if timbre == "triangle":
        sign = np.where(((k - 1) // 2) % 2 == 0, 1.0, -1.0)
        return np.where(k % 2 == 1, sign / k**2, 0.0)
    raise ValueError(f"unknown timbre {timbre!r}")


def tone(freq: float, timbre: str, n_samples: int, sr: int = audio.SR, amp: float = 0.5, phase: float = 0.0):
    """Band-limited additive tone, peak-normalized to ``amp``."""
    n_harm = max(1, int((sr / 2 - 1) // freq))
    weights = harmonic_amplitudes(timbre, n_harm)
    t = np.arange(n_samples) / sr
    wave = np.zeros(n_samples)
    for k, w in enumerate(weights, start=1):
        if w:
            wave += w * np.sin(2 * np.pi * k * freq * t + k * phase)
    peak = np.max(np.abs(wave)) or 1.0
    return amp * wave / peak


def tone_slice(pitch_class: int, timbre: str, rng: np.random.Generator, norm=None) -> np.ndarray:
    """One packed ``(3, 128, 128)`` slice of a steady tone with random level and detune."""
    n = audio.required_samples()
    midi = BASE_MIDI + pitch_class + rng.uniform(-0.15, 0.15)
    wave = tone(midi_to_hz(midi), timbre, n, amp=rng.uniform(0.2, 0.8), phase=rng.uniform(0, 2 * np.pi))
    wave += rng.normal(0.0, 1e-3, n)
    return audio.pack(audio.mel_spectrogram(wave, norm=norm)).data


def tone_dataset(n_per_class: int, seed: int = 0, norm=None):
    """Labeled tone slices covering every (pitch class, timbre) pair.

    Returns:
        ``(slices, pitch_labels, timbre_labels)`` with slices of shape
        ``(n, 3, 128, 128)``.
    """
    rng = np.random.default_rng(seed)
    xs, ps, ts = [], [], []
    for _ in range(n_per_class):
        for p in range(N_PITCH_CLASSES):
            for ti, timbre in enumerate(TIMBRES):
                xs.append(tone_slice(p, timbre, rng, norm))
                ps.append(p)
                ts.append(ti)
    return np.stack(xs).astype(np.float32), np.array(ps), np.array(ts)


def note_sequence(seconds: float, rng: np.random.Generator, sr: int = audio.SR) -> np.ndarray:
    """Consecutive notes of random pitch, timbre and length with short fades."""
    total = int(seconds * sr)
    out = np.zeros(total)
    pos = 0
    while pos < total:
        n = min(int(rng.uniform(0.5, 2.0) * sr), total - pos)
        midi = BASE_MIDI + rng.integers(0, N_PITCH_CLASSES)
        note = tone(midi_to_hz(midi), TIMBRES[rng.integers(0, len(TIMBRES))], n, sr, rng.uniform(0.2, 0.7))
        fade = min(n // 2, int(0.01 * sr))
        if fade:
            ramp = np.linspace(0.0, 1.0, fade)
            note[:fade] *= ramp
            note[-fade:] *= ramp[::-1]
        out[pos : pos + n] = note
        pos += n
    return out


def write_tone_corpus(out_dir, minutes: float = 10.0, n_files: int = 5, seed: int = 0) -> list[Path]:
    """Write ``n_files`` WAV files of note sequences totalling ``minutes``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for k in range(n_files):
        path = out_dir / f"tones_{k:03d}.wav"
        audio.write_wav(path, note_sequence(60.0 * minutes / n_files, rng))
        paths.append(path)
    return paths
