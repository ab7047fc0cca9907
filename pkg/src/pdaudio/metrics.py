"""Generative-audio metrics: Frechet distance between embedding Gaussians,
Inception Score, and the unbiased squared MMD with an inverse multi-quadratic
kernel.  Embeddings and class probabilities come from a small tone classifier
trained on synthetic pitch/timbre data."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import InvalidArgument, NumericFailure

log = logging.getLogger(__name__)

IMQ_GAMMA2 = 8.0
CLIP_RTOL = 1e-8


@dataclass
class EmbeddingStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @property
    def full_rank(self) -> bool:
        """Whether there were enough samples (``n >= d + 1``) for a full-rank covariance."""
        return self.n >= len(self.mean) + 1


def fit_gaussian(emb) -> EmbeddingStats:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise InvalidArgument(f"need an (n >= 2, d) embedding matrix, got shape {emb.shape}")
    mean = emb.mean(axis=0)
    centered = emb - mean
    cov = centered.T @ centered / (emb.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    stats = EmbeddingStats(mean, cov, emb.shape[0])
    if not stats.full_rank:
        log.warning("only %d samples for %d-dim embeddings; covariance is rank deficient", *emb.shape)
    return stats


def _psd_eigh(m: np.ndarray, what: str):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    top = max(float(np.max(np.abs(w))), 0.0)
    tol = CLIP_RTOL * top
    if np.any(w < -tol):
        raise NumericFailure(f"{what} has a negative eigenvalue {w.min():.3e} (tolerance {tol:.3e})")
    if np.any(w < 0):
        log.info("clipped %d tiny negative eigenvalues of %s", int(np.sum(w < 0)), what)
    return np.clip(w, 0.0, None), v


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """``||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the square-root term is evaluated as the sum of square roots of
    the eigenvalues of the symmetric matrix ``S_a^{1/2} S_b S_a^{1/2}``.
    """
    if a.mean.shape != b.mean.shape:
        raise InvalidArgument(f"dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    for s in (a, b):
        if not (np.all(np.isfinite(s.mean)) and np.all(np.isfinite(s.cov))):
            raise InvalidArgument("embedding statistics contain non-finite values")
    w, v = _psd_eigh(a.cov, "first covariance")
    root_a = (v * np.sqrt(w)) @ v.T
    inner = root_a @ b.cov @ root_a
    wi, _ = _psd_eigh(inner, "covariance product")
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sum(np.sqrt(wi)))
    return max(value, 0.0)


def inception_score(p) -> float:
    """``exp(E_x KL(p(y|x) || p(y)))`` with natural logs and ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise InvalidArgument("expected a non-empty (samples, classes) matrix")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise InvalidArgument("every row must be a probability vector")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def imq_kernel(X, Y, gamma2: float = IMQ_GAMMA2) -> np.ndarray:
    """``k(x, y) = 1 / (1 + ||x - y||^2 / (2 gamma^2))`` for all row pairs."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    d2 = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return 1.0 / (1.0 + np.maximum(d2, 0.0) / (2.0 * gamma2))


def mmd2_imq(X, Y, gamma2: float = IMQ_GAMMA2) -> float:
    """Unbiased squared MMD; within-set sums skip the diagonal, the cross sum keeps it."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise InvalidArgument("mmd2_imq needs at least 2 samples on each side")
    kxx = imq_kernel(X, X, gamma2)
    kyy = imq_kernel(Y, Y, gamma2)
    kxy = imq_kernel(X, Y, gamma2)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


class ToneClassifier(nn.Module):
    """Pitch-class / timbre classifier over packed mel slices.

    A shared 1-D convolutional trunk produces the embedding used for FAD; each
    head has its own penultimate layer (used for PKID / IKID) and a softmax
    output (used for PIS / IIS).
    """

    LAYERS = ("trunk", "pitch_emb", "instrument_emb", "pitch_prob", "instrument_prob")

    def __init__(self, in_shape=(3, 128, 128), width: int = 64, emb_dim: int = 16, n_pitch=12, n_inst=4):
        super().__init__()
        self.in_shape = tuple(in_shape)
        c, m, _ = self.in_shape
        self.conv1 = nn.Conv1d(c * m, width, 3, padding=1)
        self.conv2 = nn.Conv1d(width, width, 3, padding=1)
        self.trunk = nn.Linear(width, emb_dim)
        self.pitch_emb = nn.Linear(emb_dim, emb_dim)
        self.pitch_out = nn.Linear(emb_dim, n_pitch)
        self.inst_emb = nn.Linear(emb_dim, emb_dim)
        self.inst_out = nn.Linear(emb_dim, n_inst)

    def features(self, x) -> dict:
        if tuple(x.shape[1:]) != self.in_shape:
            raise InvalidArgument(f"extractor expects (B, {self.in_shape}), got {tuple(x.shape)}")
        c, m, n = self.in_shape
        h = F.relu(self.conv1(x.reshape(x.shape[0], c * m, n)))
        h = F.relu(self.conv2(h)).mean(dim=2)
        trunk = F.relu(self.trunk(h))
        pe = F.relu(self.pitch_emb(trunk))
        ie = F.relu(self.inst_emb(trunk))
        return {
            "trunk": trunk,
            "pitch_emb": pe,
            "instrument_emb": ie,
            "pitch_logits": self.pitch_out(pe),
            "instrument_logits": self.inst_out(ie),
        }

    def forward(self, x):
        f = self.features(x)
        return f["pitch_logits"], f["instrument_logits"]


@dataclass
class Extractor:
    """A classifier plus the layer to read: one of :attr:`ToneClassifier.LAYERS`."""

    model: ToneClassifier
    layer: str = "trunk"

    def __post_init__(self):
        if self.layer not in ToneClassifier.LAYERS:
            raise InvalidArgument(f"unknown extractor layer {self.layer!r}")

    def with_layer(self, layer: str) -> "Extractor":
        return Extractor(self.model, layer)


@torch.no_grad()
def embed(slices, ex: Extractor, batch_size: int = 64) -> np.ndarray:
    """One row per slice: embeddings, or class probabilities for ``*_prob`` layers."""
    x = torch.as_tensor(np.asarray(slices), dtype=torch.float32)
    ex.model.eval()
    rows = []
    for start in range(0, len(x), batch_size):
        f = ex.model.features(x[start : start + batch_size])
        if ex.layer == "pitch_prob":
            rows.append(torch.softmax(f["pitch_logits"].double(), dim=1))
        elif ex.layer == "instrument_prob":
            rows.append(torch.softmax(f["instrument_logits"].double(), dim=1))
        else:
            rows.append(f[ex.layer].double())
    return torch.cat(rows).numpy() if rows else np.zeros((0, 0))


def train_extractor(n_per_class: int = 5, steps: int = 400, seed: int = 0, norm=None, return_data=False):
    """Fit a :class:`ToneClassifier` on freshly synthesized labeled tones."""
    from .synth import tone_dataset

    x, p, i = tone_dataset(n_per_class, seed=seed, norm=norm)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToneClassifier()
    xt = torch.as_tensor(x)
    pt = torch.as_tensor(p)
    it = torch.as_tensor(i)
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=2e-3)
    model.train()
    for step in range(steps):
        idx = torch.randint(0, len(xt), (32,), generator=g)
        lp, li = model(xt[idx])
        loss = F.cross_entropy(lp, pt[idx]) + F.cross_entropy(li, it[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.info("extractor step %d loss %.4f", step, loss.item())
    model.eval()
    if return_data:
        return model, (x, p, i)
    return model


@torch.no_grad()
def classifier_accuracy(model: ToneClassifier, x, pitch, inst) -> tuple[float, float]:
    lp, li = model(torch.as_tensor(np.asarray(x), dtype=torch.float32))
    return (
        float((lp.argmax(1).numpy() == np.asarray(pitch)).mean()),
        float((li.argmax(1).numpy() == np.asarray(inst)).mean()),
    )


def evaluate(generated, reference, model: ToneClassifier) -> dict:
    """Table-style metrics of ``generated`` slices against ``reference`` slices."""
    ex = Extractor(model)
    fad = frechet_distance(
        fit_gaussian(embed(reference, ex)), fit_gaussian(embed(generated, ex))
    )
    return {
        "PIS": inception_score(embed(generated, ex.with_layer("pitch_prob"))),
        "IIS": inception_score(embed(generated, ex.with_layer("instrument_prob"))),
        "PKID": mmd2_imq(embed(reference, ex.with_layer("pitch_emb")), embed(generated, ex.with_layer("pitch_emb"))),
        "IKID": mmd2_imq(
            embed(reference, ex.with_layer("instrument_emb")), embed(generated, ex.with_layer("instrument_emb"))
        ),
        "FAD": fad,
    }
