import numpy as np
import pytest
import torch
from torch.func import functional_call

from grwm import numcore
from grwm.geomloss import LossConfig, total_loss
from grwm.numcore import ContractViolation, check_gradient
from grwm.repmodel import (
    Bottleneck,
    RepConfig,
    TemporalVAE,
    TemporalVAENet,
    project_normalize,
    window_mask,
    window_slices,
)

TINY = RepConfig(latent_dim=4, window=3, feature_width=8, depth=1, heads=2, proj_dim=5, channels=(2, 2, 2), frame_h=8, frame_w=8)


def tiny_net(cfg=TINY, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    return TemporalVAENet(cfg).to(dtype).eval()


def frames(B, L, cfg=TINY, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(B, L, 3, cfg.frame_h, cfg.frame_w, generator=g, dtype=dtype)


def test_window_mask():
    m = window_mask(5, 2)
    expected = torch.tensor(
        [[1, 0, 0, 0, 0], [1, 1, 0, 0, 0], [0, 1, 1, 0, 0], [0, 0, 1, 1, 0], [0, 0, 0, 1, 1]], dtype=torch.bool
    )
    assert torch.equal(m, expected)


def test_frame_encoder_is_per_frame_and_sensitive():
    net = tiny_net()
    x = frames(1, 4)
    x[0, 2] = x[0, 1]
    f = net.encode_frames(x)
    assert f.shape == (1, 4, TINY.feature_width)
    assert torch.equal(f[0, 1], f[0, 2])
    y = x.clone()
    y[0, 0, 1, 3, 4] += 1e-3
    assert not torch.equal(net.encode_frames(y)[0, 0], f[0, 0])


@pytest.mark.parametrize("depth", [1, 3])
@pytest.mark.parametrize("t", [0, 3, 6, 9])
def test_causality_and_window_are_exact(t, depth):
    # stacked layers must not widen the receptive field beyond k frames
    net = tiny_net(RepConfig(**{**TINY.to_dict(), "depth": depth, "channels": (2, 2, 2)}))
    x = frames(1, 10)
    base = net(x, sample=False)["mu"][0, t]
    k = TINY.window
    for s in range(10):
        if t - k + 1 <= s <= t:
            continue
        y = x.clone()
        y[0, s] = torch.rand_like(y[0, s])
        assert torch.equal(net(y, sample=False)["mu"][0, t], base), f"frame {s} leaked into t={t}"
    # and frames inside the window do matter
    y = x.clone()
    y[0, max(0, t - k + 1)] += 0.5
    assert not torch.equal(net(y, sample=False)["mu"][0, t], base)


def test_window_slices():
    idx, valid = window_slices(4, 3)
    assert idx.tolist() == [[0, 0, 0], [0, 0, 1], [0, 1, 2], [1, 2, 3]]
    assert valid.tolist() == [[False, False, True], [False, True, True], [True, True, True], [True, True, True]]


def test_window_one_is_per_frame():
    cfg = RepConfig(**{**TINY.to_dict(), "window": 1, "channels": (2, 2, 2)})
    net = tiny_net(cfg)
    x = frames(1, 5, cfg)
    mu = net(x, sample=False)["mu"]
    for t in range(5):
        assert torch.allclose(net(x[:, t : t + 1], sample=False)["mu"][0, 0], mu[0, t], atol=1e-12)


def test_bottleneck_eval_and_sampling_variance():
    b = Bottleneck(TINY).to(torch.float64)
    h = torch.randn(1, 1, TINY.feature_width, dtype=torch.float64)
    mu, lv, z = b(h, sample=False)
    assert torch.equal(z, mu)
    hs = h.expand(10_000, 1, -1)
    mu, lv, z = b(hs, generator=numcore.torch_generator(0, "bn"))
    var = (z - mu).var(0).squeeze()
    assert torch.allclose(var, lv[0, 0].exp(), rtol=0.05)


def test_logvar_clamped():
    b = Bottleneck(TINY).to(torch.float64)
    with torch.no_grad():
        b.fc.bias.fill_(100.0)
    _, lv, _ = b(torch.zeros(1, TINY.feature_width, dtype=torch.float64), sample=False)
    assert lv.max().item() == 4.0


def test_decoder_shape_range_and_instantaneous():
    net = tiny_net()
    z = torch.randn(2, 6, TINY.latent_dim, dtype=torch.float64)
    out = net.decoder(z)
    assert out.shape == (2, 6, 3, 8, 8)
    assert out.min() >= 0 and out.max() <= 1
    assert torch.equal(net.decoder(z[:, 2:3])[:, 0], out[:, 2])


def test_project_normalize():
    z = torch.randn(3, 4, 6, dtype=torch.float64)
    proj = torch.nn.Linear(6, 5).to(torch.float64)
    p = project_normalize(z, proj)
    assert torch.allclose(p.norm(dim=-1), torch.ones(3, 4, dtype=torch.float64), atol=1e-12)
    ident = torch.nn.Identity()
    assert torch.allclose(project_normalize(5 * z, ident), project_normalize(z, ident), atol=1e-15)
    assert torch.allclose(project_normalize(z, None), z / z.norm(dim=-1, keepdim=True))


def test_without_head_normalises_latent_directly():
    cfg = RepConfig(**{**TINY.to_dict(), "proj_mode": "without_head", "channels": (2, 2, 2)})
    net = tiny_net(cfg)
    out = net(frames(1, 4, cfg), sample=False)
    assert net.proj is None
    assert torch.allclose(out["p"], out["mu"] / out["mu"].norm(dim=-1, keepdim=True))


def test_end_to_end_gradient_matches_finite_differences():
    net = tiny_net()
    x = frames(2, 4)
    names = [n for n, _ in net.named_parameters()]
    cfg = LossConfig(beta=1e-3, lambda_slow=0.1, lambda_uniform=0.1)

    def objective(*arrays):
        params = dict(zip(names, arrays))
        out = functional_call(net, params, (x,), {"sample": True, "generator": numcore.torch_generator(0, "e2e")})
        return total_loss(out["recon"], x, out["mu"], out["logvar"], out["p"], cfg)[0]

    inputs = [p.detach().numpy() for p in net.parameters()]
    res = check_gradient("end_to_end", objective, inputs, tol=1e-5)
    assert res.passed, res


def test_rep_config_validation():
    with pytest.raises(ContractViolation):
        RepConfig(window=0)
    with pytest.raises(ContractViolation):
        RepConfig(latent_dim=1)


# -- estimator --------------------------------------------------------------

@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 256, size=(4, 10, 8, 8, 3), dtype=np.uint8)
    est = TemporalVAE(
        latent_dim=4, window=3, feature_width=8, depth=1, heads=2, proj_dim=5, channels=(2, 2, 2),
        seq_len=6, batch_size=3, n_steps=5, warmup=2, seed=1,
    )
    return est.fit(X), X


def test_estimator_api(fitted):
    est, X = fitted
    Z = est.transform(X)
    assert Z.shape == (4, 10, 4)
    assert est.project(X).shape == (4, 10, 5)
    R = est.reconstruct(X)
    assert R.shape == X.shape and R.min() >= 0 and R.max() <= 1
    assert est.decode(Z[0]).shape == (10, 8, 8, 3)
    assert len(est.history_) == 5
    assert set(est.history_[0]) >= {"L_recon", "L_KL", "L_slow", "L_uniform", "L_total"}
    assert est.get_params()["latent_dim"] == 4


def test_estimator_is_deterministic(fitted):
    est, X = fitted
    again = TemporalVAE(**est.get_params()).fit(X)
    assert np.array_equal(again.transform(X), est.transform(X))


def test_save_load_round_trip(tmp_path, fitted):
    est, X = fitted
    path = tmp_path / "ae.grwm"
    est.save(path)
    back = TemporalVAE.load(path)
    assert np.array_equal(back.transform(X), est.transform(X))
    back.save(tmp_path / "again.grwm")
    assert (tmp_path / "again.grwm").read_bytes() == path.read_bytes()


def test_estimator_input_errors(fitted):
    est, X = fitted
    with pytest.raises(ContractViolation):
        est.transform(X[..., :2])
    with pytest.raises(ContractViolation):
        est.transform(np.zeros((1, 10, 16, 16, 3), np.uint8))
    with pytest.raises(ContractViolation):
        TemporalVAE(seq_len=20).fit(X)
    with pytest.raises(ContractViolation):
        est.decode(np.zeros((3, 7)))


def test_vanilla_configuration_trains_reconstruction_only(fitted):
    _, X = fitted
    est = TemporalVAE(
        latent_dim=4, window=3, feature_width=8, depth=1, heads=2, proj_dim=5, channels=(2, 2, 2),
        seq_len=6, batch_size=3, n_steps=3, warmup=1, beta=0.0, lambda_slow=0.0, lambda_uniform=0.0,
    ).fit(X)
    for row in est.history_:
        assert row["L_total"] == row["L_recon"]
