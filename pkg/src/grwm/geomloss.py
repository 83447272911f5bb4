"""Training objective: reconstruction, KL, temporal slowness and latent uniformity."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import torch

from .numcore import ContractViolation


class SlowMode(str, Enum):
    ALL_PAIRS = "all_pairs"
    ADJACENT_ONLY = "adjacent"


class ProjMode(str, Enum):
    WITH_HEAD = "with_head"
    WITHOUT_HEAD = "without_head"


class Reduction(str, Enum):
    PIXEL_MEAN = "pixel_mean"
    PIXEL_SUM = "pixel_sum"


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1e-6
    lambda_slow: float = 0.1
    lambda_uniform: float = 0.1
    slow_mode: SlowMode = SlowMode.ALL_PAIRS
    proj_mode: ProjMode = ProjMode.WITH_HEAD
    recon_reduction: Reduction = Reduction.PIXEL_MEAN

    def __post_init__(self):
        for name in ("beta", "lambda_slow", "lambda_uniform"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")
        object.__setattr__(self, "slow_mode", SlowMode(self.slow_mode))
        object.__setattr__(self, "proj_mode", ProjMode(self.proj_mode))
        object.__setattr__(self, "recon_reduction", Reduction(self.recon_reduction))

    @classmethod
    def vanilla(cls, **kw) -> "LossConfig":
        return cls(beta=0.0, lambda_slow=0.0, lambda_uniform=0.0, **kw)

    def to_dict(self) -> dict:
        return {k: (v.value if isinstance(v, Enum) else v) for k, v in asdict(self).items()}


@dataclass
class LossReport:
    recon: float
    kl: float
    slow: float
    uniform: float
    total: float
    weighted: dict

    def as_row(self) -> dict:
        return {"L_recon": self.recon, "L_KL": self.kl, "L_slow": self.slow, "L_uniform": self.uniform, "L_total": self.total}


def recon_loss(recon: torch.Tensor, target: torch.Tensor, reduction: Reduction | str = Reduction.PIXEL_MEAN) -> torch.Tensor:
    """Squared error of frames shaped (..., C, H, W) or (..., H, W, C)."""
    if recon.shape != target.shape:
        raise ContractViolation(f"shape mismatch {tuple(recon.shape)} vs {tuple(target.shape)}")
    sq = (recon - target) ** 2
    if Reduction(reduction) is Reduction.PIXEL_MEAN:
        return sq.mean()
    return sq.flatten(-3).sum(-1).mean()


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0, I)) summed over latent dims, averaged over batch and time."""
    if mu.shape != logvar.shape:
        raise ContractViolation("mu and logvar shapes differ")
    return (0.5 * (mu**2 + logvar.exp() - logvar - 1.0).sum(-1)).mean()


def safe_norm(diff: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over the last axis, exactly 0 (with zero gradient) at 0."""
    sq = (diff**2).sum(-1)
    nonzero = sq > 0
    return torch.where(nonzero, torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def slow_loss(p: torch.Tensor, mode: SlowMode | str = SlowMode.ALL_PAIRS) -> torch.Tensor:
    """Mean distance between embeddings of the same trajectory, p: (B, L, D)."""
    if p.dim() != 3 or p.shape[1] < 2:
        raise ContractViolation("slow_loss needs (B, L, D) with L >= 2")
    if SlowMode(mode) is SlowMode.ADJACENT_ONLY:
        return safe_norm(p[:, 1:] - p[:, :-1]).mean()
    L = p.shape[1]
    i, j = torch.triu_indices(L, L, offset=1)
    return safe_norm(p[:, i] - p[:, j]).mean()


def uniform_loss(p: torch.Tensor) -> torch.Tensor:
    """log-mean of exp(-2 |p_i - p_j|^2) over all pairs from different trajectories."""
    if p.dim() != 3:
        raise ContractViolation("uniform_loss needs (B, L, D)")
    B, L, D = p.shape
    if B < 2:
        raise ContractViolation("uniform_loss needs at least two trajectories for negatives")
    flat = p.reshape(B * L, D)
    owner = torch.arange(B, device=p.device).repeat_interleave(L)
    norms = (flat**2).sum(-1)
    sq = (norms[:, None] + norms[None, :] - 2.0 * flat @ flat.T).clamp_min(0.0)
    negatives = owner[:, None] != owner[None, :]
    vals = (-2.0 * sq)[negatives]
    return torch.logsumexp(vals, 0) - math.log(vals.numel())


def total_loss(
    recon: torch.Tensor,
    target: torch.Tensor,
    mu: torch.Tensor,
    logvar: torch.Tensor,
    p: torch.Tensor,
    cfg: LossConfig,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted objective plus a report of every term.

    Terms with zero weight are still evaluated for monitoring but are
    detached so they contribute no gradient.
    """
    terms = {
        "recon": (1.0, lambda: recon_loss(recon, target, cfg.recon_reduction)),
        "kl": (cfg.beta, lambda: kl_loss(mu, logvar)),
        "slow": (cfg.lambda_slow, lambda: slow_loss(p, cfg.slow_mode)),
        "uniform": (
            cfg.lambda_uniform,
            lambda: uniform_loss(p) if p.shape[0] >= 2 or cfg.lambda_uniform else p.new_tensor(float("nan")),
        ),
    }
    values = {}
    objective = None
    weighted = {}
    for name, (w, fn) in terms.items():
        if w == 0.0:
            with torch.no_grad():
                v = fn()
            values[name] = v
            weighted[name] = 0.0
            continue
        v = fn()
        values[name] = v
        contrib = w * v
        weighted[name] = float(contrib.detach())
        objective = contrib if objective is None else objective + contrib
    r, k, s, u = (float(values[n].detach()) for n in ("recon", "kl", "slow", "uniform"))
    total = r + cfg.beta * k + cfg.lambda_slow * s + (cfg.lambda_uniform * u if cfg.lambda_uniform else 0.0)
    report = LossReport(recon=r, kl=k, slow=s, uniform=u, total=total, weighted=weighted)
    return objective, report
