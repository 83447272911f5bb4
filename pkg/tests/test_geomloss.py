import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from grwm.geomloss import (
    LossConfig,
    Reduction,
    SlowMode,
    kl_loss,
    recon_loss,
    safe_norm,
    slow_loss,
    total_loss,
    uniform_loss,
)
from grwm.numcore import ContractViolation

f64 = torch.float64


def unit(x):
    return x / x.norm(dim=-1, keepdim=True)


def test_recon_reductions():
    ones, zeros = torch.ones(2, 3, 3, 4, 4), torch.zeros(2, 3, 3, 4, 4)
    assert recon_loss(ones, zeros).item() == 1.0
    assert recon_loss(ones, zeros, Reduction.PIXEL_SUM).item() == 48.0
    with pytest.raises(ContractViolation):
        recon_loss(ones, zeros[..., :3])


def test_kl_examples():
    z = torch.zeros(2, 5, 4, dtype=f64)
    assert kl_loss(z, z).item() == 0.0
    mu = torch.full((1, 1, 3), 2.0, dtype=f64)
    lv = torch.full((1, 1, 3), math.log(0.5), dtype=f64)
    expected = 0.5 * 3 * (4 + 0.5 - math.log(0.5) - 1)
    assert kl_loss(mu, lv).item() == pytest.approx(expected, abs=1e-12)


def test_safe_norm_zero_has_zero_gradient():
    d = torch.zeros(3, 4, dtype=f64, requires_grad=True)
    n = safe_norm(d)
    n.sum().backward()
    assert torch.equal(n, torch.zeros(3, dtype=f64))
    assert torch.equal(d.grad, torch.zeros_like(d))


def test_slow_analytic_cases():
    e = torch.tensor([1.0, 0.0, 0.0], dtype=f64)
    antipodal = torch.stack([e, -e])[None]
    assert slow_loss(antipodal).item() == pytest.approx(2.0, abs=1e-9)
    identical = e.expand(1, 5, 3)
    assert slow_loss(identical).item() == 0.0
    assert slow_loss(identical, SlowMode.ADJACENT_ONLY).item() == 0.0


def test_slow_modes_differ():
    # path on a great circle: all-pairs average includes long chords
    ang = torch.linspace(0, math.pi / 2, 4, dtype=f64)
    p = torch.stack([ang.cos(), ang.sin()], -1)[None]
    adj = slow_loss(p, "adjacent").item()
    allp = slow_loss(p, "all_pairs").item()
    chord = lambda a: 2 * math.sin(a / 2)
    assert adj == pytest.approx(chord(math.pi / 6), abs=1e-12)
    expected = (3 * chord(math.pi / 6) + 2 * chord(math.pi / 3) + chord(math.pi / 2)) / 6
    assert allp == pytest.approx(expected, abs=1e-12)


def test_uniform_analytic_cases():
    e1 = torch.tensor([1.0, 0.0], dtype=f64)
    e2 = torch.tensor([0.0, 1.0], dtype=f64)
    assert uniform_loss(torch.stack([e1, -e1])[:, None]).item() == pytest.approx(-8.0, abs=1e-9)
    assert uniform_loss(torch.stack([e1, e1])[:, None]).item() == pytest.approx(0.0, abs=1e-9)
    assert uniform_loss(torch.stack([e1, e2])[:, None]).item() == pytest.approx(-4.0, abs=1e-9)


def test_uniform_ignores_same_trajectory_pairs():
    e1 = torch.tensor([1.0, 0.0], dtype=f64)
    # trajectory 0 holds antipodal points; they must not count as negatives
    p = torch.stack([torch.stack([e1, -e1]), torch.stack([e1, e1])])
    # cross pairs: (e1,e1) x2 -> 0, (-e1,e1) x2 -> d^2=4
    expected = math.log((2 * 1.0 + 2 * math.exp(-8)) / 4)
    assert uniform_loss(p).item() == pytest.approx(expected, abs=1e-12)


def test_uniform_needs_two_trajectories():
    with pytest.raises(ContractViolation):
        uniform_loss(torch.ones(1, 3, 2))
    with pytest.raises(ContractViolation):
        slow_loss(torch.ones(2, 1, 2))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 5), st.integers(2, 6), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_bounds_on_random_unit_batches(B, L, D, seed):
    g = torch.Generator().manual_seed(seed)
    p = unit(torch.randn(B, L, D, generator=g, dtype=f64))
    s, u = slow_loss(p).item(), uniform_loss(p).item()
    assert 0.0 <= s <= 2.0 + 1e-12
    assert -8.0 - 1e-12 <= u <= 1e-12


def test_total_matches_hand_combination():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(3, 4, 3, 8, 8, generator=g, dtype=f64)
    r = torch.rand(3, 4, 3, 8, 8, generator=g, dtype=f64)
    mu, lv = torch.randn(3, 4, 5, generator=g, dtype=f64), torch.randn(3, 4, 5, generator=g, dtype=f64)
    p = unit(torch.randn(3, 4, 6, generator=g, dtype=f64))
    cfg = LossConfig()
    obj, rep = total_loss(r, x, mu, lv, p, cfg)
    hand = recon_loss(r, x) + 1e-6 * kl_loss(mu, lv) + 0.1 * slow_loss(p) + 0.1 * uniform_loss(p)
    assert obj.item() == pytest.approx(hand.item(), abs=1e-12)
    assert rep.total == pytest.approx(rep.recon + 1e-6 * rep.kl + 0.1 * rep.slow + 0.1 * rep.uniform, abs=1e-9)


def test_vanilla_total_is_recon_and_detaches_monitors():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 3, 4, 4, generator=g, dtype=f64)
    r = torch.rand(2, 3, 3, 4, 4, generator=g, dtype=f64)
    mu = torch.randn(2, 3, 5, generator=g, dtype=f64, requires_grad=True)
    lv = torch.zeros(2, 3, 5, dtype=f64, requires_grad=True)
    p = unit(mu)
    obj, rep = total_loss(r, x, mu, lv, p, LossConfig.vanilla())
    assert obj.item() == rep.total == recon_loss(r, x).item()
    assert rep.slow > 0 and rep.uniform < 0
    assert not obj.requires_grad  # nothing upstream of recon needs gradients here


def test_small_weights_accepted():
    cfg = LossConfig(lambda_slow=0.01, lambda_uniform=0.01)
    assert cfg.to_dict()["lambda_slow"] == 0.01
    with pytest.raises(ContractViolation):
        LossConfig(beta=-1.0)


def test_singleton_batch_with_zero_uniform_weight():
    p = unit(torch.randn(1, 4, 3, dtype=f64))
    x = torch.rand(1, 4, 3, 4, 4, dtype=f64)
    obj, rep = total_loss(x, x, torch.zeros(1, 4, 2, dtype=f64), torch.zeros(1, 4, 2, dtype=f64), p, LossConfig(lambda_uniform=0.0))
    assert math.isnan(rep.uniform) and math.isfinite(rep.total)
