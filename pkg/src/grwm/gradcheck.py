"""Finite-difference checks over every differentiable primitive the models use,
plus the two geometric regularizers through the projection-normalisation chain.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import geomloss
from .numcore import GradCheck, check_gradient, np_rng
from .repmodel import window_mask


@dataclass(frozen=True)
class GradCase:
    name: str
    fn: Callable[..., torch.Tensor]
    shapes: tuple


class _BadSquare(torch.autograd.Function):
    """x**2 with a deliberately wrong backward; fixture for the checker itself."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2.02 * x


def corrupted_case() -> GradCase:
    return GradCase("corrupted_square", lambda x: _BadSquare.apply(x).sum(), ((3, 4),))


def _attention(q, k, v):
    mask = torch.zeros(q.shape[-2], k.shape[-2], dtype=q.dtype).masked_fill(~window_mask(q.shape[-2], 3), float("-inf"))
    return F.scaled_dot_product_attention(q, k, v, attn_mask=mask)


def _normalized(z, w):
    return z @ w / (z @ w).norm(dim=-1, keepdim=True)


def primitive_cases() -> list[GradCase]:
    """One case per primitive; objectives are weighted sums to exercise all entries."""

    def wsum(y):
        w = torch.linspace(-1.0, 1.0, y.numel(), dtype=y.dtype).reshape(y.shape)
        return (y * w).sum()

    return [
        GradCase("matmul", lambda a, b: wsum(a @ b), ((3, 4), (4, 5))),
        GradCase("affine", lambda x, w, b: wsum(F.linear(x, w, b)), ((4, 6), (3, 6), (3,))),
        GradCase("add_mul", lambda a, b: wsum(a * b + a), ((3, 4), (3, 4))),
        GradCase("exp", lambda x: wsum(torch.exp(0.5 * x)), ((3, 4),)),
        GradCase("log", lambda x: wsum(torch.log(x * x + 1.0)), ((3, 4),)),
        GradCase("sqrt", lambda x: wsum(torch.sqrt(x * x + 0.5)), ((3, 4),)),
        GradCase("tanh", lambda x: wsum(torch.tanh(x)), ((3, 4),)),
        GradCase("sigmoid", lambda x: wsum(torch.sigmoid(x)), ((3, 4),)),
        GradCase("gelu", lambda x: wsum(F.gelu(x)), ((3, 4),)),
        GradCase("relu", lambda x: wsum(F.relu(x + 0.05)), ((3, 4),)),
        GradCase("softmax", lambda x: wsum(torch.softmax(x, -1)), ((3, 5),)),
        GradCase("logsumexp", lambda x: wsum(torch.logsumexp(x, -1)), ((3, 5),)),
        GradCase("mean_sum", lambda x: x.mean() + wsum(x.sum(0)), ((3, 5),)),
        GradCase("layer_norm", lambda x, g, b: wsum(F.layer_norm(x, (5,), g, b)), ((3, 5), (5,), (5,))),
        GradCase("conv2d_stride2", lambda x, w, b: wsum(F.conv2d(x, w, b, stride=2, padding=1)), ((1, 2, 6, 6), (3, 2, 4, 4), (3,))),
        GradCase("conv_transpose2d", lambda x, w, b: wsum(F.conv_transpose2d(x, w, b, stride=2, padding=1)), ((1, 3, 3, 3), (3, 2, 4, 4), (2,))),
        GradCase("masked_window_attention", lambda q, k, v: wsum(_attention(q, k, v)), ((1, 2, 5, 3),) * 3),
        GradCase("l2_normalize", lambda z, w: wsum(_normalized(z, w)), ((2, 3, 4), (4, 5))),
        GradCase("reparameterize", lambda mu, lv, e: wsum(mu + torch.exp(0.5 * lv) * e), ((3, 4),) * 3),
        GradCase("kl", lambda mu, lv: geomloss.kl_loss(mu, lv), ((2, 3, 4), (2, 3, 4))),
        GradCase("recon_mse", lambda r, t: geomloss.recon_loss(r, t), ((2, 3, 4, 4), (2, 3, 4, 4))),
        GradCase("slow_all_pairs", lambda z, w: geomloss.slow_loss(_normalized(z, w), "all_pairs"), ((2, 4, 5), (5, 3))),
        GradCase("slow_adjacent", lambda z, w: geomloss.slow_loss(_normalized(z, w), "adjacent"), ((2, 4, 5), (5, 3))),
        GradCase("uniform", lambda z, w: geomloss.uniform_loss(_normalized(z, w)), ((3, 4, 5), (5, 3))),
    ]


def run_suite(cases: list[GradCase] | None = None, tol: float = 1e-6, seed: int = 0) -> list[GradCheck]:
    cases = primitive_cases() if cases is None else cases
    out = []
    for i, case in enumerate(cases):
        rng = np_rng(seed, "gradcheck", i)
        inputs = [rng.standard_normal(s) for s in case.shapes]
        out.append(check_gradient(case.name, case.fn, inputs, tol=tol))
    return out


def format_report(results: list[GradCheck]) -> str:
    lines = [f"{'check':<26} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<26} {r.max_rel_err:12.3e} {r.tol:8.0e}  {'ok' if r.passed else 'FAIL ' + str(r.worst_index)}")
    return "\n".join(lines)


if __name__ == "__main__":
    t = time.time()
    res = run_suite()
    print(format_report(res))
    print(f"{time.time() - t:.1f}s")
