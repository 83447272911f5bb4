import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from grwm import numcore
from grwm.numcore import (
    Adam,
    AdamState,
    CheckpointFormatError,
    ContractViolation,
    LRSchedule,
    NumericFailure,
    adam_step,
    check_gradient,
    forward_backward,
    load_arrays,
    save_arrays,
    schedule_rate,
)


def test_forward_backward_polynomial():
    x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    value, (g,) = forward_backward(lambda: (x**2).sum(), [x])
    assert value == 5.0
    assert g.tolist() == [2.0, 4.0]


def test_forward_backward_sum_gives_ones():
    x = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    _, (g,) = forward_backward(lambda: x.sum(), [x])
    assert torch.equal(g, torch.ones_like(x))


def test_unused_parameter_gets_zero_gradient():
    x = torch.ones(2, requires_grad=True)
    y = torch.ones(3, requires_grad=True)
    _, (gx, gy) = forward_backward(lambda: x.sum(), [x, y])
    assert torch.equal(gy, torch.zeros(3))


def test_non_scalar_objective_is_rejected():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ContractViolation):
        forward_backward(lambda: x * 2, [x])


def test_non_finite_objective_names_primitive():
    x = torch.tensor([-1.0, 2.0], requires_grad=True)
    with pytest.raises(NumericFailure) as info:
        forward_backward(lambda: torch.log(x).sum(), [x])
    assert info.value.primitive is not None
    assert "log" in info.value.primitive


def test_three_layer_map_matches_finite_differences():
    # 12 scalar parameters across three layers
    def fn(w1, w2, w3):
        h = torch.tanh(w1 @ torch.tensor([0.3, -0.7], dtype=torch.float64))
        h = torch.sigmoid(w2 @ h)
        return (w3 * h).sum() ** 2

    rng = np.random.default_rng(0)
    res = check_gradient("three_layer", fn, [rng.standard_normal((2, 2)), rng.standard_normal((2, 2)), rng.standard_normal(2)])
    res_big = check_gradient("three_layer", fn, [rng.standard_normal((3, 2)), rng.standard_normal((2, 3)), rng.standard_normal(2)])
    assert res.passed and res_big.passed
    assert res_big.max_rel_err < 1e-6


def test_gradient_checker_flags_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.exp()

        @staticmethod
        def backward(ctx, g):
            return g

    res = check_gradient("wrong", lambda x: Wrong.apply(x).sum(), [np.array([0.5, 1.0])])
    assert not res.passed


# -- Adam -------------------------------------------------------------------

def test_adam_zero_gradient_is_identity():
    p = torch.randn(4, 3)
    before = p.clone()
    st_ = AdamState.fresh([p])
    adam_step([p], [torch.zeros_like(p)], st_, 1e-3)
    assert torch.equal(p, before)
    assert st_.step == 1


def test_adam_first_step_moves_by_lr_against_sign():
    p = torch.zeros(4, dtype=torch.float64)
    g = torch.tensor([0.5, -2.0, 1e-3, -7.0], dtype=torch.float64)
    adam_step([p], [g], AdamState.fresh([p]), 0.01)
    # m_hat = g, v_hat = g^2  =>  update = -lr * g / (|g| + eps)
    expected = -0.01 * g / (g.abs() + 1e-8)
    assert torch.allclose(p, expected, rtol=0, atol=1e-12)


def test_adam_two_steps_follow_recurrence():
    p = torch.tensor([1.0, -1.0], dtype=torch.float64)
    g = torch.tensor([0.2, 0.4], dtype=torch.float64)
    s = AdamState.fresh([p], beta1=0.9, beta2=0.99)
    adam_step([p], [g], s, 0.1)
    adam_step([p], [g], s, 0.1)
    assert s.step == 2
    m = 0.1 * g + 0.9 * (0.1 * g)
    v = 0.01 * g**2 + 0.99 * (0.01 * g**2)
    assert torch.allclose(s.m[0], m, rtol=1e-15)
    assert torch.allclose(s.v[0], v, rtol=1e-15)


def test_adam_decoupled_weight_decay():
    p = torch.tensor([2.0], dtype=torch.float64)
    adam_step([p], [torch.zeros_like(p)], AdamState.fresh([p], weight_decay=1e-4), 0.5)
    assert p.item() == pytest.approx(2.0 * (1 - 0.5 * 1e-4), abs=1e-15)


def test_adam_shape_mismatch():
    p = torch.zeros(3)
    with pytest.raises(ContractViolation):
        adam_step([p], [torch.zeros(4)], AdamState.fresh([p]), 1e-3)


def test_adam_rejects_nonpositive_lr():
    p = torch.zeros(3)
    with pytest.raises(ContractViolation):
        adam_step([p], [torch.zeros(3)], AdamState.fresh([p]), 0.0)


def test_adam_wrapper_minimises_quadratic():
    x = torch.tensor([3.0, -2.0], requires_grad=True)
    opt = Adam([x])
    for _ in range(500):
        _, g = forward_backward(lambda: ((x - 1.0) ** 2).sum(), [x])
        opt.step(g, 0.05)
    assert torch.allclose(x.detach(), torch.ones(2), atol=1e-2)


# -- schedule ---------------------------------------------------------------

def test_schedule_examples():
    s = LRSchedule(1e-3, warmup=1000, total=10_000, min_ratio=0.1)
    assert schedule_rate(s, 1000) == pytest.approx(1e-3)
    assert schedule_rate(s, 500) == pytest.approx(5e-4)
    assert schedule_rate(s, 10_000) == pytest.approx(1e-4)
    assert schedule_rate(s, 50_000) == pytest.approx(1e-4)
    assert schedule_rate(s, 5500) == pytest.approx(1e-3 * (1 - 0.9 * 0.5))


def test_schedule_rejects_bad_construction():
    with pytest.raises(ContractViolation):
        LRSchedule(1e-3, warmup=100, total=50)
    with pytest.raises(ContractViolation):
        schedule_rate(LRSchedule(1e-3), -1)


@given(
    warmup=st.integers(0, 200),
    extra=st.integers(0, 300),
    ratio=st.floats(0.01, 1.0),
    step=st.integers(1, 1000),
)
def test_schedule_bounded_and_continuous(warmup, extra, ratio, step):
    s = LRSchedule(2.0, warmup=warmup, total=warmup + extra, min_ratio=ratio)
    r = s.rate(step)
    if step >= warmup:
        assert 2.0 * ratio - 1e-12 <= r <= 2.0 + 1e-12
    else:
        assert 0 < r <= 2.0
    assert abs(s.rate(step + 1) - r) <= 2.0 / max(1, min(warmup or 1, extra or 1)) + 1e-12


# -- RNG streams ------------------------------------------------------------

def test_streams_are_reproducible_and_distinct():
    a = numcore.np_rng(3, "x", 1).random(5)
    assert np.array_equal(a, numcore.np_rng(3, "x", 1).random(5))
    assert not np.array_equal(a, numcore.np_rng(3, "x", 2).random(5))
    assert not np.array_equal(a, numcore.np_rng(3, "y", 1).random(5))
    t1 = torch.randn(4, generator=numcore.torch_generator(0, "z"))
    t2 = torch.randn(4, generator=numcore.torch_generator(0, "z"))
    assert torch.equal(t1, t2)


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.bias": np.arange(5, dtype=np.float32), "s": np.float32(2.5).reshape(())}
    path = tmp_path / "m.grwm"
    save_arrays(path, arrays)
    back = load_arrays(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()
    blob = path.read_bytes()
    save_arrays(tmp_path / "n.grwm", back)
    assert (tmp_path / "n.grwm").read_bytes() == blob


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "m.grwm"
    save_arrays(path, {"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    blob = path.read_bytes()
    expected = b"GRWM" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"w" + struct.pack("<I", 2)
    expected += struct.pack("<QQ", 1, 2) + np.array([1.0, 2.0], dtype="<f4").tobytes()
    assert blob == expected


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing"])
def test_checkpoint_format_errors(tmp_path, mutate):
    path = tmp_path / "m.grwm"
    save_arrays(path, {"w": np.ones((2, 2), dtype=np.float32)})
    blob = bytearray(path.read_bytes())
    if mutate == "magic":
        blob[:4] = b"XXXX"
    elif mutate == "version":
        blob[4:8] = struct.pack("<I", 99)
    elif mutate == "truncate":
        blob = blob[:-3]
    else:
        blob += b"\0"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError):
        load_arrays(path)


def test_dtype_for():
    assert numcore.dtype_for("64") is torch.float64
    assert numcore.dtype_for(32) is torch.float32
    with pytest.raises(ContractViolation):
        numcore.dtype_for("16")
