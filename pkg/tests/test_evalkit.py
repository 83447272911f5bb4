import numpy as np
import pytest
import torch

from grwm.evalkit import (
    StateProbe,
    cluster_report,
    diagnostics,
    framewise_mse,
    kmeans,
    probe,
    spatial_dispersion,
)
from grwm.numcore import ContractViolation
from grwm.repmodel import TemporalVAE


def test_framewise_identical_and_extreme():
    x = np.random.default_rng(0).random((3, 5, 4, 4, 3))
    assert np.array_equal(framewise_mse(x, x).values, np.zeros(5))
    c = framewise_mse(np.ones((2, 4, 4, 4, 3)), np.zeros((2, 4, 4, 4, 3)))
    assert np.array_equal(c.values, np.ones(4))
    assert c.horizon == 4 and c.episodes == 2


def test_framewise_matches_brute_force():
    rng = np.random.default_rng(1)
    a, b = rng.random((3, 6, 5, 5, 3)), rng.random((3, 6, 5, 5, 3))
    c = framewise_mse(a, b)
    for t in range(6):
        brute = np.mean([np.mean((a[e, t] - b[e, t]) ** 2) for e in range(3)])
        assert c.values[t] == pytest.approx(brute, abs=1e-14)
    med = framewise_mse(a, b, mode="median")
    assert med.values[2] == pytest.approx(np.median(((a[:, 2] - b[:, 2]) ** 2).reshape(3, -1).mean(1)))
    assert c.window_mean(2, 4) == pytest.approx(c.values[1:4].mean())


def test_framewise_uint8_and_errors():
    a = np.full((2, 2, 2, 3), 255, np.uint8)
    assert framewise_mse(a, np.zeros_like(a)).values.tolist() == [1.0, 1.0]
    with pytest.raises(ContractViolation):
        framewise_mse(a, a[:1])
    with pytest.raises(ContractViolation):
        framewise_mse(a, a, mode="max")


def random_states(N, T, seed=0):
    rng = np.random.default_rng(seed)
    th = rng.uniform(0, 2 * np.pi, size=(N, T))
    return np.stack([rng.uniform(-1, 1, (N, T)), rng.uniform(-1, 1, (N, T)), np.sin(th), np.cos(th)], -1)


def test_probe_on_identity_features():
    S = random_states(20, 50)
    rep = probe(S, S, (np.arange(16), np.arange(16, 20)), seed=0, n_steps=1500)
    assert rep.mse < 1e-3
    assert rep.n_train == 16 * 50 and rep.n_val == 4 * 50
    assert set(rep.per_component) == {"x", "y", "sin_theta", "cos_theta"}


def test_probe_on_noise_hits_variance_floor():
    S = random_states(20, 50)
    noise = np.random.default_rng(9).normal(size=(20, 50, 8))
    rep = probe(noise, S, (np.arange(16), np.arange(16, 20)), seed=0, n_steps=300)
    floor = S[16:].reshape(-1, 4).var(0).mean()
    assert rep.mse == pytest.approx(floor, rel=0.3)


def test_probe_is_deterministic_and_validates_split():
    S = random_states(6, 10)
    a = probe(S, S, ([0, 1, 2, 3], [4, 5]), seed=2, n_steps=20)
    b = probe(S, S, ([0, 1, 2, 3], [4, 5]), seed=2, n_steps=20)
    assert a == b
    with pytest.raises(ContractViolation):
        probe(S, S, ([0, 1, 2], [2, 5]))
    with pytest.raises(ContractViolation):
        probe(S, S, ([0, 1], []))


def test_state_probe_estimator_api():
    X = np.random.default_rng(0).normal(size=(40, 3))
    m = StateProbe(n_steps=5).fit(X, X[:, :2])
    assert m.predict(X).shape == (40, 2)
    assert m.n_features_in_ == 3


def test_kmeans_single_cluster_and_blobs():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 2))
    assert np.all(kmeans(X, 1) == 0)
    centers = np.array([[0, 0], [10, 0], [0, 10]])
    truth = np.repeat(np.arange(3), 40)
    blobs = centers[truth] + 0.1 * rng.normal(size=(120, 2))
    got = kmeans(blobs, 3, seed=4)
    # exact recovery up to permutation
    perm = {g: t for g, t in zip(got, truth)}
    assert np.array_equal(np.vectorize(perm.get)(got), truth)
    assert np.array_equal(kmeans(blobs, 3, seed=4), got)
    with pytest.raises(ContractViolation):
        kmeans(X[:2], 3)


def test_dispersion_examples():
    pos = np.array([[0, 0], [0, 0], [5, 5], [5, 5]], dtype=float)
    assert spatial_dispersion([0, 0, 1, 1], pos) == 0.0
    assert spatial_dispersion([0, 1, 0, 1], pos) == pytest.approx(1.0)
    corners = np.array([[0, 0], [0.1, 0], [9, 9], [9.1, 9]], dtype=float)
    assert spatial_dispersion([0, 0, 0, 0], corners) > spatial_dispersion([0, 0, 1, 1], corners)
    with pytest.raises(ContractViolation):
        spatial_dispersion([0, 1], pos)


def test_random_assignments_score_near_one():
    rng = np.random.default_rng(0)
    pos = rng.uniform(0, 3, size=(4000, 2))
    scores = [spatial_dispersion(rng.integers(0, 20, 4000), pos) for _ in range(10)]
    assert np.mean(scores) == pytest.approx(1.0, abs=0.02)


def test_cluster_report():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(200, 4))
    rep = cluster_report(Z, Z[:, :2], k=5, seed=0)
    assert sum(rep.counts) == 200 and len(rep.counts) == 5
    assert rep.to_dict()["k"] == 5 and 0 < rep.dispersion < 1


def test_diagnostics_on_collapsed_embeddings():
    X = np.random.default_rng(0).integers(0, 256, size=(4, 8, 8, 8, 3), dtype=np.uint8)
    est = TemporalVAE(
        latent_dim=4, window=2, feature_width=8, depth=1, heads=2, proj_dim=3, channels=(2, 2, 2),
        seq_len=4, batch_size=3, n_steps=1, warmup=1,
    ).fit(X)
    with torch.no_grad():
        est.net_.proj.weight.zero_()
        est.net_.proj.bias.copy_(torch.tensor([1.0, 2.0, 3.0]))
    d = diagnostics(est, X)
    assert d["L_slow"] == pytest.approx(0.0, abs=1e-9)
    assert d["L_uniform"] == pytest.approx(0.0, abs=1e-9)
    assert d == diagnostics(est, X)
