import math

import numpy as np
import pytest
import scipy.linalg
import torch

from pdaudio.errors import InvalidArgument, NumericFailure
from pdaudio.metrics import (
    EmbeddingStats,
    Extractor,
    ToneClassifier,
    classifier_accuracy,
    embed,
    evaluate,
    fit_gaussian,
    frechet_distance,
    imq_kernel,
    inception_score,
    mmd2_imq,
    train_extractor,
)
from pdaudio.synth import tone_dataset


def _stats(mean, cov, n=100):
    return EmbeddingStats(np.asarray(mean, float), np.asarray(cov, float), n)


def test_fit_gaussian_examples():
    s = fit_gaussian([[0, 0], [2, 0]])
    assert s.mean.tolist() == [1, 0] and s.cov.tolist() == [[2, 0], [0, 0]]
    same = fit_gaussian(np.tile([[1.0, -2.0, 3.0]], (5, 1)))
    assert not same.cov.any()
    with pytest.raises(InvalidArgument):
        fit_gaussian([[1.0, 2.0]])


def test_fit_gaussian_monte_carlo_and_rank_flag():
    x = np.random.default_rng(0).normal(size=(10_000, 4))
    s = fit_gaussian(x)
    assert np.all(np.abs(s.mean) < 0.05)
    assert np.all(np.abs(np.diag(s.cov) - 1) < 0.05)
    assert np.max(np.abs(s.cov - s.cov.T)) < 1e-10
    assert s.full_rank and not fit_gaussian(x[:4]).full_rank


def test_frechet_listed_cases():
    a = _stats([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]])
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-12)
    d = np.array([0.5, -1.5])
    shifted = _stats(a.mean + d, a.cov)
    assert frechet_distance(a, shifted) == pytest.approx(float(d @ d), abs=1e-12)
    assert frechet_distance(_stats([0, 0], 4 * np.eye(2)), _stats([0, 0], np.eye(2))) == 2.0


def test_frechet_matches_sqrtm_oracle_and_is_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = 6
        A, B = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        ca, cb = A @ A.T + 0.1 * np.eye(d), B @ B.T + 0.1 * np.eye(d)
        ma, mb = rng.normal(size=d), rng.normal(size=d)
        ref = float(np.sum((ma - mb) ** 2) + np.trace(ca + cb - 2 * scipy.linalg.sqrtm(ca @ cb).real))
        a, b = _stats(ma, ca), _stats(mb, cb)
        assert frechet_distance(a, b) == pytest.approx(ref, rel=1e-8, abs=1e-10)
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8


def test_frechet_rank_deficient_is_nonnegative():
    x = np.random.default_rng(2).normal(size=(3, 8))
    s = fit_gaussian(x)
    assert frechet_distance(s, s) >= 0.0
    assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-7)


def test_frechet_errors():
    a = _stats([0, 0], np.eye(2))
    with pytest.raises(InvalidArgument):
        frechet_distance(a, _stats([0, 0, 0], np.eye(3)))
    with pytest.raises(InvalidArgument):
        frechet_distance(a, _stats([0, math.nan], np.eye(2)))
    with pytest.raises(NumericFailure):
        frechet_distance(_stats([0, 0], [[1, 0], [0, -0.5]]), a)


def test_inception_score_cases():
    assert inception_score(np.tile([0.2, 0.3, 0.5], (7, 1))) == pytest.approx(1.0, abs=1e-12)
    assert inception_score(np.eye(10)) == pytest.approx(10.0, rel=1e-12)
    p = np.array([[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]])
    # marginal (0.5, 0.5); KL per row: 0, log 2, log 2
    assert inception_score(p) == pytest.approx(math.exp(2 * math.log(2) / 3), rel=1e-12)


def test_inception_score_invariants():
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(5) * 0.3, size=40)
    v = inception_score(p)
    assert 1.0 <= v <= 5.0
    assert inception_score(p[rng.permutation(40)]) == pytest.approx(v, rel=1e-12)
    with pytest.raises(InvalidArgument):
        inception_score([[0.5, 0.6]])
    with pytest.raises(InvalidArgument):
        inception_score([[1.2, -0.2]])


def test_mmd_hand_case():
    a, b = np.zeros(3), np.array([4.0, 0.0, 0.0])  # ||a - b||^2 = 16
    X = np.stack([a, b])
    assert imq_kernel(X, X)[0, 1] == 0.5
    assert mmd2_imq(X, X) == -0.5
    assert np.all(np.diag(imq_kernel(X, X)) == 1.0)


def _triple_loop(X, Y, gamma2=8.0):
    def k(x, y):
        return 1.0 / (1.0 + sum((xi - yi) ** 2 for xi, yi in zip(x, y)) / (2 * gamma2))

    m, n = len(X), len(Y)
    sx = sum(k(X[i], X[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    sy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sxy = sum(k(X[i], Y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sx + sy - 2 * sxy


def test_mmd_matches_naive_oracle():
    rng = np.random.default_rng(4)
    for m, n in [(5, 5), (2, 5), (4, 3)]:
        X, Y = rng.normal(size=(m, 3)), rng.normal(1.0, 2.0, size=(n, 3))
        assert abs(mmd2_imq(X, Y) - _triple_loop(X.tolist(), Y.tolist())) < 1e-12


def test_mmd_same_distribution_and_order_invariance():
    rng = np.random.default_rng(5)
    X, Y = rng.normal(size=(500, 4)), rng.normal(size=(500, 4))
    v = mmd2_imq(X, Y)
    assert abs(v) < 0.01
    assert mmd2_imq(X[rng.permutation(500)], Y) == pytest.approx(v, abs=1e-12)
    assert mmd2_imq(X, rng.normal(1.0, 1.0, size=(500, 4))) > 0.05
    with pytest.raises(InvalidArgument):
        mmd2_imq(X[:1], Y)


@pytest.fixture(scope="module")
def extractor():
    return train_extractor(n_per_class=4, steps=400, seed=0, return_data=True)


def test_extractor_accuracy_on_held_out_tones(extractor):
    model, _ = extractor
    x, p, i = tone_dataset(2, seed=123)
    pitch_acc, inst_acc = classifier_accuracy(model, x, p, i)
    assert pitch_acc >= 0.95 and inst_acc >= 0.95


def test_embed_is_deterministic_and_order_equivariant(extractor):
    model, (x, _, _) = extractor
    x = x[:10]
    ex = Extractor(model, "trunk")
    a, b = embed(x, ex), embed(x, ex, batch_size=3)
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)
    assert np.array_equal(embed(x, ex), a)
    perm = np.random.default_rng(0).permutation(10)
    np.testing.assert_allclose(embed(x[perm], ex), a[perm], rtol=1e-5, atol=1e-6)
    probs = embed(x, ex.with_layer("pitch_prob"))
    assert probs.shape == (10, 12)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    with pytest.raises(InvalidArgument):
        Extractor(model, "logits")


def test_evaluate_identical_sets(extractor):
    model, (x, _, _) = extractor
    m = evaluate(x[:48], x[:48], model)
    assert abs(m["FAD"]) < 1e-6
    assert abs(m["PKID"]) < 0.05 and abs(m["IKID"]) < 0.05
    assert set(m) == {"PIS", "IIS", "PKID", "IKID", "FAD"}


def test_extractor_shape_contract():
    with pytest.raises(InvalidArgument):
        embed(np.zeros((2, 3, 128, 64), np.float32), Extractor(ToneClassifier()))
