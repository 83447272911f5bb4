"""Action-conditioned latent dynamics and autoregressive rollout.

Three backends share one estimator: a deterministic residual regressor, a
v-prediction latent diffusion model sampled with DDIM, and an oracle that
learns the same map on ground-truth state vectors.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import numcore
from .mazeworld import EnvConfig, MazeMap, render, state_to_pose, Pose
from .numcore import ContractViolation
from .validation import check_actions, check_latents, check_frames

N_ACTIONS = 3


class Backend(str, Enum):
    REGRESSOR = "regressor"
    DIFFUSION = "diffusion"
    ORACLE = "oracle"


@dataclass(frozen=True)
class DynConfig:
    backend: str = Backend.REGRESSOR.value
    context: int = 4
    diffusion_steps: int = 1000
    shift: float = 10.0
    noise_clip: float = 20.0
    snr_gamma: float = 20.0
    snr_decay: float | None = None
    sampler_steps: int = 5
    eta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "backend", Backend(self.backend).value)
        if self.context < 1:
            raise ContractViolation("context length must be >= 1")
        if self.diffusion_steps < 2:
            raise ContractViolation("need at least 2 diffusion steps")
        if not 1 <= self.sampler_steps <= self.diffusion_steps:
            raise ContractViolation("sampler steps must lie in [1, diffusion_steps]")
        if self.eta < 0:
            raise ContractViolation("eta must be >= 0")


# --------------------------------------------------------------------------
# diffusion schedule
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    alphas_cumprod: np.ndarray  # index t-1 for t = 1..T
    log_snr: np.ndarray
    clip: float

    @property
    def T(self) -> int:
        return len(self.alphas_cumprod)

    @property
    def snr(self) -> np.ndarray:
        return np.exp(self.log_snr)

    def alpha_bar(self, t) -> np.ndarray:
        return self.alphas_cumprod[np.asarray(t) - 1]


def cosine_log_snr(u, shift: float = 1.0, clip: float = 20.0) -> np.ndarray:
    """log-SNR of the cos^2 schedule at u in [0, 1], offset by -2 ln(shift), clipped."""
    u = np.asarray(u, dtype=np.float64)
    a = np.cos(0.5 * np.pi * u) ** 2
    with np.errstate(divide="ignore"):
        lsnr = np.log(a) - np.log1p(-a)
    return np.clip(lsnr - 2.0 * math.log(shift), -clip, clip)


def build_schedule(cfg: DynConfig) -> DiffusionSchedule:
    T = cfg.diffusion_steps
    lsnr = cosine_log_snr(np.arange(1, T + 1) / T, cfg.shift, cfg.noise_clip)
    return DiffusionSchedule(1.0 / (1.0 + np.exp(-lsnr)), lsnr, cfg.noise_clip)


def _ab(schedule: DiffusionSchedule, t, like: torch.Tensor) -> torch.Tensor:
    a = torch.as_tensor(schedule.alpha_bar(np.asarray(t)), dtype=like.dtype)
    return a.reshape(a.shape + (1,) * (like.dim() - a.dim()))


def v_target(z0: torch.Tensor, eps: torch.Tensor, t, schedule: DiffusionSchedule):
    """(v, x_t) for the v-parameterisation at integer timesteps ``t``."""
    if z0.shape != eps.shape:
        raise ContractViolation("z0 and eps shapes differ")
    a = _ab(schedule, t, z0)
    sa, sb = a.sqrt(), (1.0 - a).sqrt()
    return sa * eps - sb * z0, sa * z0 + sb * eps


def z0_from_v(x_t: torch.Tensor, v: torch.Tensor, t, schedule: DiffusionSchedule) -> torch.Tensor:
    a = _ab(schedule, t, x_t)
    return a.sqrt() * x_t - (1.0 - a).sqrt() * v


def eps_from_v(x_t: torch.Tensor, v: torch.Tensor, t, schedule: DiffusionSchedule) -> torch.Tensor:
    a = _ab(schedule, t, x_t)
    return (1.0 - a).sqrt() * x_t + a.sqrt() * v


def min_snr_weight(t, schedule: DiffusionSchedule, gamma: float = 20.0) -> np.ndarray:
    """min(SNR_t, gamma) / (SNR_t + 1), the min-SNR weight for v-prediction."""
    if gamma <= 0:
        raise ContractViolation("gamma must be positive")
    snr = schedule.snr[np.asarray(t) - 1]
    return np.minimum(snr, gamma) / (snr + 1.0)


def snr_weight_table(schedule: DiffusionSchedule, gamma: float, decay: float | None = None) -> np.ndarray:
    w = min_snr_weight(np.arange(1, schedule.T + 1), schedule, gamma)
    if decay:
        # optional exponential smoothing along t
        out = np.empty_like(w)
        acc = w[0]
        for i, wi in enumerate(w):
            acc = decay * acc + (1.0 - decay) * wi
            out[i] = acc
        w = out
    return w


def sampler_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniformly strided descending sub-schedule from T down to 1."""
    if not 1 <= steps <= T:
        raise ContractViolation("sampler steps must lie in [1, T]")
    return np.round(np.linspace(T, 1, steps)).astype(np.int64)


@torch.no_grad()
def ddim_sample(
    v_model,
    cond: torch.Tensor,
    schedule: DiffusionSchedule,
    steps: int,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    dim: int | None = None,
) -> torch.Tensor:
    """DDIM over a strided sub-schedule; ``v_model(x_t, t, cond)`` predicts v.

    The last step returns the model's z0 estimate directly.
    """
    ts = sampler_timesteps(schedule.T, steps)
    x = torch.randn((cond.shape[0], dim), generator=generator, dtype=cond.dtype)
    for i, t in enumerate(ts):
        tt = np.full(len(x), t)
        v = v_model(x, tt, cond)
        z0 = z0_from_v(x, v, tt, schedule)
        if i == len(ts) - 1:
            return z0
        eps = eps_from_v(x, v, tt, schedule)
        a = float(schedule.alpha_bar(t))
        a_prev = float(schedule.alpha_bar(ts[i + 1]))
        sigma = eta * math.sqrt((1 - a_prev) / (1 - a)) * math.sqrt(max(0.0, 1 - a / a_prev))
        x = math.sqrt(a_prev) * z0 + math.sqrt(max(0.0, 1 - a_prev - sigma**2)) * eps
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------

def timestep_embedding(t, dim: int, dtype=torch.float32) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(t), dtype=dtype)
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=dtype) / half)
    ang = t[:, None] * freqs[None, :]
    return torch.cat([ang.sin(), ang.cos()], dim=-1)


class ResidualMLP(nn.Module):
    def __init__(self, d_in: int, d_out: int, width: int = 256, blocks: int = 3):
        super().__init__()
        self.inp = nn.Linear(d_in, width)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.LayerNorm(width), nn.Linear(width, width), nn.GELU(), nn.Linear(width, width))
            for _ in range(blocks)
        )
        self.out = nn.Sequential(nn.LayerNorm(width), nn.Linear(width, d_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.inp(x)
        for blk in self.blocks:
            h = h + blk(h)
        return self.out(h)


@dataclass
class Transitions:
    """Training tuples: context (n, m, d), action (n,), target (n, d)."""

    context: np.ndarray
    action: np.ndarray
    target: np.ndarray


def build_transitions(Z, actions, m: int) -> Transitions:
    """All (z_{t-m+1..t}, a_t) -> z_{t+1} tuples from (N, T, d) sequences."""
    Z = check_latents(Z)
    A = check_actions(actions)
    if Z.ndim == 2:
        Z, A = Z[None], A[None]
    N, T, d = Z.shape
    if A.shape != (N, T):
        raise ContractViolation("actions must align with latents (N, T)")
    if T <= m:
        raise ContractViolation("sequences too short for the context length")
    idx = np.arange(m - 1, T - 1)
    ctx = np.stack([Z[:, t - m + 1 : t + 1] for t in idx], axis=1).reshape(-1, m, d)
    act = A[:, idx].reshape(-1)
    tgt = Z[:, idx + 1].reshape(-1, d)
    return Transitions(ctx, act, tgt)


# --------------------------------------------------------------------------
# estimator
# --------------------------------------------------------------------------

class LatentDynamics(RegressorMixin, BaseEstimator):
    """Predicts the next latent from a context window and an action.

    ``fit(Z, actions)`` takes aligned sequences (N, T, d) and (N, T), where
    ``actions[:, t]`` leads from step t to t+1. Targets are modelled as
    standardised residuals z_{t+1} - z_t. With ``backend="oracle"`` the
    inputs must be oracle state vectors (x, y, sin, cos).
    """

    def __init__(
        self,
        backend="regressor",
        context=4,
        width=256,
        blocks=3,
        n_steps=4000,
        batch_size=256,
        lr=1e-3,
        warmup=200,
        min_ratio=0.1,
        weight_decay=1e-4,
        betas=(0.9, 0.99),
        diffusion_steps=1000,
        shift=10.0,
        noise_clip=20.0,
        snr_gamma=20.0,
        snr_decay=None,
        sampler_steps=5,
        eta=0.0,
        t_embed_dim=64,
        fourier=0,
        seed=0,
    ):
        self.backend = backend
        self.context = context
        self.width = width
        self.blocks = blocks
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.min_ratio = min_ratio
        self.weight_decay = weight_decay
        self.betas = betas
        self.diffusion_steps = diffusion_steps
        self.shift = shift
        self.noise_clip = noise_clip
        self.snr_gamma = snr_gamma
        self.snr_decay = snr_decay
        self.sampler_steps = sampler_steps
        self.eta = eta
        self.t_embed_dim = t_embed_dim
        self.fourier = fourier
        self.seed = seed

    def dyn_config(self) -> DynConfig:
        return DynConfig(
            backend=self.backend, context=self.context, diffusion_steps=self.diffusion_steps,
            shift=self.shift, noise_clip=self.noise_clip, snr_gamma=self.snr_gamma,
            snr_decay=self.snr_decay, sampler_steps=self.sampler_steps, eta=self.eta,
        )

    def _build(self, d: int):
        self.cfg_ = self.dyn_config()
        self.dim_ = d
        torch.manual_seed(numcore.stream_key(self.seed, "dyn-init") & 0x7FFF_FFFF_FFFF_FFFF)
        d_cond = self.context * d * (1 + 2 * self.fourier) + N_ACTIONS
        if self.cfg_.backend == Backend.DIFFUSION.value:
            self.schedule_ = build_schedule(self.cfg_)
            self.weights_ = snr_weight_table(self.schedule_, self.snr_gamma, self.snr_decay)
            self.net_ = ResidualMLP(d + d_cond + self.t_embed_dim, d, self.width, self.blocks)
        else:
            self.net_ = ResidualMLP(d_cond, d, self.width, self.blocks)

    # -- conditioning --------------------------------------------------------
    def _cond(self, ctx: np.ndarray, act: np.ndarray) -> torch.Tensor:
        c = ((ctx - self.z_mean_) / self.z_scale_).reshape(len(ctx), -1)
        if self.fourier:
            # sharp features such as wall contacts are hard for a plain MLP
            ang = np.pi * c[:, :, None] * 2.0 ** np.arange(self.fourier)
            c = np.concatenate([c, np.sin(ang).reshape(len(c), -1), np.cos(ang).reshape(len(c), -1)], 1)
        onehot = np.eye(N_ACTIONS)[act]
        return torch.as_tensor(np.concatenate([c, onehot], 1), dtype=torch.float32)

    def _v(self, x: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.t_embed_dim)
        return self.net_(torch.cat([x, cond, emb], dim=-1))

    def _check_oracle(self, Z: np.ndarray) -> None:
        if Z.shape[-1] != 4 or not np.allclose(Z[..., 2] ** 2 + Z[..., 3] ** 2, 1.0, atol=1e-6):
            raise ContractViolation("oracle backend trains on oracle state vectors (x, y, sin, cos), not latents")

    # -- training ------------------------------------------------------------
    def fit(self, Z, actions):
        Z = check_latents(Z)
        if Backend(self.backend) is Backend.ORACLE:
            self._check_oracle(Z)
        tr = build_transitions(Z, actions, self.context)
        d = tr.target.shape[-1]
        self._build(d)
        flat = Z.reshape(-1, d)
        self.z_mean_ = flat.mean(0)
        self.z_scale_ = flat.std(0) + 1e-6
        delta = tr.target - tr.context[:, -1]
        self.delta_mean_ = delta.mean(0)
        self.delta_scale_ = delta.std(0) + 1e-6
        cond = self._cond(tr.context, tr.action)
        y = torch.as_tensor((delta - self.delta_mean_) / self.delta_scale_, dtype=torch.float32)

        params = list(self.net_.parameters())
        opt = numcore.Adam(params, betas=tuple(self.betas), weight_decay=self.weight_decay)
        sched = numcore.LRSchedule(self.lr, min(self.warmup, self.n_steps), self.n_steps, self.min_ratio)
        rng = numcore.np_rng(self.seed, "dyn-batches")
        bs = min(self.batch_size, len(y))
        diffusion = self.cfg_.backend == Backend.DIFFUSION.value
        self.history_ = []
        for step in range(self.n_steps):
            idx = torch.as_tensor(rng.integers(0, len(y), size=bs))
            if diffusion:
                g = numcore.torch_generator(self.seed, "dyn-noise", step)
                t = rng.integers(1, self.schedule_.T + 1, size=bs)
                loss_fn = lambda: self.diffusion_loss(y[idx], cond[idx], t, g)
            else:
                loss_fn = lambda: ((self.net_(cond[idx]) - y[idx]) ** 2).mean()
            value, grads = numcore.forward_backward(loss_fn, params)
            opt.step(grads, sched.rate(step + 1))
            self.history_.append(value)
        self.net_.eval()
        return self

    def diffusion_loss(self, x0: torch.Tensor, cond: torch.Tensor, t, generator=None) -> torch.Tensor:
        """min-SNR weighted v-prediction error at integer timesteps ``t``."""
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        v, x_t = v_target(x0, eps, t, self.schedule_)
        w = torch.as_tensor(self.weights_[np.asarray(t) - 1], dtype=x0.dtype)
        return (w * ((self._v(x_t, t, cond) - v) ** 2).mean(-1)).mean()

    # -- prediction ----------------------------------------------------------
    @torch.no_grad()
    def predict(self, context, actions, seed: int = 0):
        """Next latent for each (context window, action) pair.

        context: (B, m, d) or (m, d); actions: (B,) or scalar.
        """
        check_is_fitted(self, "net_")
        ctx = check_latents(context, self.dim_)
        single = ctx.ndim == 2
        if single:
            ctx = ctx[None]
        act = check_actions(np.atleast_1d(actions))
        if ctx.shape[1] < self.context:
            raise ContractViolation(f"need {self.context} context latents, got {ctx.shape[1]}")
        ctx = ctx[:, -self.context :]
        cond = self._cond(ctx, act)
        if self.cfg_.backend == Backend.DIFFUSION.value:
            g = numcore.torch_generator(seed, "ddim")
            r = ddim_sample(self._v, cond, self.schedule_, self.sampler_steps, self.eta, g, self.dim_)
        else:
            r = self.net_(cond)
        nxt = ctx[:, -1] + r.numpy().astype(np.float64) * self.delta_scale_ + self.delta_mean_
        if self.cfg_.backend == Backend.ORACLE.value:
            nxt = renormalize_state(nxt)
        return nxt[0] if single else nxt

    # -- persistence ---------------------------------------------------------
    def save(self, path: str | Path, rep_digest: str | None = None) -> None:
        check_is_fitted(self, "net_")
        path = Path(path)
        arrays = {f"net.{k}": v for k, v in self.net_.state_dict().items()}
        side = {"kind": "dynamics", "dyn_config": asdict(self.cfg_), "params": _jsonable(self.get_params()),
                "dim": self.dim_, "rep_digest": rep_digest,
                "stats": {k: getattr(self, k).tolist() for k in ("z_mean_", "z_scale_", "delta_mean_", "delta_scale_")}}
        numcore.save_arrays(path, arrays)
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "LatentDynamics":
        path = Path(path)
        side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        if side.get("kind") != "dynamics":
            raise ContractViolation("sidecar does not describe a dynamics model")
        params = side["params"]
        params["betas"] = tuple(params["betas"])
        est = cls(**params)
        est._build(side["dim"])
        for k, v in side["stats"].items():
            setattr(est, k, np.asarray(v, dtype=np.float64))
        arrays = numcore.load_arrays(path)
        est.net_.load_state_dict({k[4:]: torch.as_tensor(v) for k, v in arrays.items()})
        est.net_.eval()
        est.rep_digest_ = side.get("rep_digest")
        return est


def renormalize_state(s: np.ndarray) -> np.ndarray:
    """Project the (sin, cos) part of oracle states back onto the unit circle."""
    s = np.array(s, dtype=np.float64)
    n = np.sqrt(s[..., 2] ** 2 + s[..., 3] ** 2)
    n = np.where(n > 0, n, 1.0)
    s[..., 2] /= n
    s[..., 3] /= n
    return s


def _jsonable(params: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}


# --------------------------------------------------------------------------
# rollout
# --------------------------------------------------------------------------

class LatentWorldModel:
    """Frozen representation model + latent dynamics, rolled out in latent space."""

    def __init__(self, rep, dyn: LatentDynamics):
        if dyn.dim_ != rep.latent_dim:
            raise ContractViolation("dynamics latent dim differs from the representation model")
        self.rep, self.dyn = rep, dyn

    def rollout_latents(self, context_frames, actions, horizon: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        ctx_frames = check_frames(context_frames)
        E = len(ctx_frames)
        if ctx_frames.shape[1] < self.rep.window:
            raise ContractViolation(f"need at least {self.rep.window} context frames")
        if horizon < 0:
            raise ContractViolation("horizon must be >= 0")
        A = check_actions(np.asarray(actions).reshape(E, -1))
        if A.shape[1] < horizon:
            raise ContractViolation("fewer actions than the rollout horizon")
        Z = self.rep.transform(ctx_frames)
        window = Z[:, -self.dyn.context :]
        preds = []
        for i in range(horizon):
            nxt = self.dyn.predict(window, A[:, i], seed=numcore.stream_key(seed, "rollout", i) & 0xFFFF_FFFF)
            preds.append(nxt)
            window = np.concatenate([window[:, 1:], nxt[:, None]], axis=1)
        if not preds:
            return Z, np.empty((E, 0, Z.shape[-1]))
        return Z, np.stack(preds, axis=1)

    def rollout(self, context_frames, actions, horizon: int, seed: int = 0) -> np.ndarray:
        """Predicted frames (E, horizon, H, W, 3) in [0, 1].

        With horizon 0 the reconstructions of the last ``context`` frames
        are returned instead.
        """
        Z, preds = self.rollout_latents(context_frames, actions, horizon, seed)
        if horizon == 0:
            return self.rep.decode(Z[:, -self.dyn.context :])
        return self.rep.decode(preds)


class OracleWorldModel:
    """Dynamics on ground-truth states, rendered with the true renderer."""

    def __init__(self, dyn: LatentDynamics, maze: MazeMap, cfg: EnvConfig):
        if Backend(dyn.backend) is not Backend.ORACLE:
            raise ContractViolation("OracleWorldModel needs an oracle-backend dynamics model")
        self.dyn, self.maze, self.cfg = dyn, maze, cfg

    def _render(self, s: np.ndarray) -> np.ndarray:
        p = state_to_pose(s, self.maze)
        eps = 1e-6
        p = Pose(min(max(p.x, eps), self.maze.width - eps), min(max(p.y, eps), self.maze.height - eps), p.theta)
        return render(self.maze, p, self.cfg).astype(np.float64) / 255.0

    def rollout_states(self, context_states, actions, horizon: int) -> np.ndarray:
        S = np.asarray(context_states, dtype=np.float64)
        if S.ndim == 2:
            S = S[None]
        if horizon < 0:
            raise ContractViolation("horizon must be >= 0")
        A = check_actions(np.asarray(actions).reshape(len(S), -1))
        window = S[:, -self.dyn.context :]
        out = []
        for i in range(horizon):
            nxt = self.dyn.predict(window, A[:, i])
            out.append(nxt)
            window = np.concatenate([window[:, 1:], nxt[:, None]], axis=1)
        return np.stack(out, axis=1) if out else np.empty((len(S), 0, 4))

    def rollout(self, context_states, actions, horizon: int) -> np.ndarray:
        if horizon == 0:
            S = np.asarray(context_states, dtype=np.float64).reshape(-1, np.shape(context_states)[-2], 4)
            return np.stack([[self._render(s) for s in ep[-self.dyn.context :]] for ep in S])
        states = self.rollout_states(context_states, actions, horizon)
        return np.stack([[self._render(s) for s in ep] for ep in states])
