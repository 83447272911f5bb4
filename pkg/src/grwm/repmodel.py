"""Temporally-contextualised VAE with a projection-normalisation head."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numcore
from .geomloss import LossConfig, LossReport, ProjMode, total_loss
from .numcore import ContractViolation, NumericFailure
from .validation import check_frames, frames_to_tensor

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 4.0


@dataclass(frozen=True)
class RepConfig:
    latent_dim: int = 32
    window: int = 8
    feature_width: int = 128
    depth: int = 2
    heads: int = 4
    proj_dim: int = 64
    proj_mode: str = ProjMode.WITH_HEAD.value
    channels: tuple[int, ...] = (16, 32, 64)
    frame_h: int = 32
    frame_w: int = 32

    def __post_init__(self):
        if self.window < 1:
            raise ContractViolation("window must be >= 1")
        if self.latent_dim < 2 or self.proj_dim < 2:
            raise ContractViolation("latent and projection dims must be >= 2")
        if self.feature_width % self.heads:
            raise ContractViolation("feature_width must be divisible by heads")
        down = 2 ** len(self.channels)
        if self.frame_h % down or self.frame_w % down:
            raise ContractViolation(f"frame dims must be divisible by {down}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "proj_mode", ProjMode(self.proj_mode).value)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


# --------------------------------------------------------------------------
# network pieces
# --------------------------------------------------------------------------

class FrameEncoder(nn.Module):
    """Per-frame 2D CNN: strided conv stages then an affine head."""

    def __init__(self, cfg: RepConfig):
        super().__init__()
        layers, c_in = [], 3
        for c in cfg.channels:
            layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.GELU()]
            c_in = c
        self.convs = nn.Sequential(*layers)
        down = 2 ** len(cfg.channels)
        self.head = nn.Linear(c_in * (cfg.frame_h // down) * (cfg.frame_w // down), cfg.feature_width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.convs(x).flatten(1))


def window_mask(L: int, k: int, device=None) -> torch.Tensor:
    """Boolean (L, L): position t may attend to s iff t-k < s <= t."""
    t = torch.arange(L, device=device)
    diff = t[:, None] - t[None, :]
    return (diff >= 0) & (diff < k)


def window_slices(L: int, k: int, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Frame index (L, k) of each slot in the window ending at t, and a
    validity mask for slots that fall before the first frame."""
    idx = torch.arange(L, device=device)[:, None] - (k - 1) + torch.arange(k, device=device)[None, :]
    return idx.clamp(min=0), idx >= 0


class WindowAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, window: int):
        super().__init__()
        self.heads, self.window = heads, window
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        # learned bias per head and relative offset 0..window-1
        self.rel_bias = nn.Parameter(torch.zeros(heads, window))
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        """x: (N, k, W) windows; allowed: (N or 1, k, k) boolean attention mask."""
        N, K, W = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).view(N, K, 3, self.heads, W // self.heads).permute(2, 0, 3, 1, 4)
        pos = torch.arange(K, device=x.device)
        offset = (pos[:, None] - pos[None, :]).clamp(0, self.window - 1)
        bias = self.rel_bias[:, offset][None]  # (1, heads, k, k)
        bias = bias.masked_fill(~allowed[:, None], float("-inf"))
        att = F.scaled_dot_product_attention(q, k, v, attn_mask=bias.to(q.dtype))
        x = x + self.out(att.transpose(1, 2).reshape(N, K, W))
        return x + self.mlp(self.ln2(x))


class WindowAggregator(nn.Module):
    """Causal transformer applied to each k-frame window separately.

    Stacking windowed attention layers over the whole sequence would widen
    the receptive field to depth*(k-1)+1 frames; running every window on its
    own keeps z_t a function of frames t-k+1..t only, at any depth.
    """

    def __init__(self, cfg: RepConfig):
        super().__init__()
        self.window = cfg.window
        self.blocks = nn.ModuleList(
            WindowAttentionBlock(cfg.feature_width, cfg.heads, cfg.window) for _ in range(cfg.depth)
        )
        self.ln = nn.LayerNorm(cfg.feature_width)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        B, L, W = feats.shape
        k = self.window
        idx, valid = window_slices(L, k, feats.device)
        x = feats[:, idx].reshape(B * L, k, W)
        # causal inside the window; padding slots only see themselves
        causal = window_mask(k, k, feats.device)
        allowed = causal & (valid[:, None, :] | torch.eye(k, dtype=torch.bool, device=feats.device))
        allowed = allowed.repeat(B, 1, 1)
        for blk in self.blocks:
            x = blk(x, allowed)
        return self.ln(x[:, -1].reshape(B, L, W))


class Bottleneck(nn.Module):
    def __init__(self, cfg: RepConfig):
        super().__init__()
        self.fc = nn.Linear(cfg.feature_width, 2 * cfg.latent_dim)

    def forward(self, h: torch.Tensor, generator: torch.Generator | None = None, sample: bool = True):
        mu, logvar = self.fc(h).chunk(2, dim=-1)
        logvar = logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)
        if not sample:
            return mu, logvar, mu
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu, logvar, mu + torch.exp(0.5 * logvar) * eps


class FrameDecoder(nn.Module):
    """Instantaneous decoder: one latent in, one frame out."""

    def __init__(self, cfg: RepConfig):
        super().__init__()
        down = 2 ** len(cfg.channels)
        self.base = (cfg.channels[-1], cfg.frame_h // down, cfg.frame_w // down)
        self.fc = nn.Linear(cfg.latent_dim, int(np.prod(self.base)))
        layers = []
        chans = list(cfg.channels[::-1]) + [3]
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.GELU(), nn.ConvTranspose2d(a, b, 4, stride=2, padding=1)]
        self.deconvs = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-1]
        x = self.fc(z.reshape(-1, z.shape[-1])).view(-1, *self.base)
        x = torch.sigmoid(self.deconvs(x))
        return x.view(*lead, *x.shape[1:])


def project_normalize(z: torch.Tensor, proj: nn.Module | None, eps: float = 1e-8) -> torch.Tensor:
    """p = proj(z) (identity when ``proj`` is None); returns p / |p| rowwise."""
    p = z if proj is None else proj(z)
    return p / p.norm(dim=-1, keepdim=True).clamp_min(eps)


class TemporalVAENet(nn.Module):
    def __init__(self, cfg: RepConfig):
        super().__init__()
        self.cfg = cfg
        self.frame_encoder = FrameEncoder(cfg)
        self.aggregator = WindowAggregator(cfg)
        self.bottleneck = Bottleneck(cfg)
        self.decoder = FrameDecoder(cfg)
        self.proj = nn.Linear(cfg.latent_dim, cfg.proj_dim) if cfg.proj_mode == ProjMode.WITH_HEAD.value else None

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, L, 3, H, W) -> per-frame features (B, L, F)."""
        B, L = frames.shape[:2]
        return self.frame_encoder(frames.reshape(B * L, *frames.shape[2:])).view(B, L, -1)

    def contextual(self, frames: torch.Tensor) -> torch.Tensor:
        return self.aggregator(self.encode_frames(frames))

    def forward(
        self,
        frames: torch.Tensor,
        sample: bool = True,
        generator: torch.Generator | None = None,
        reg_input: str = "mean",
    ) -> dict:
        """``reg_input`` picks what the projection head sees: the posterior
        mean (default) or the reparameterised sample."""
        h = self.contextual(frames)
        mu, logvar, z = self.bottleneck(h, generator, sample)
        return {
            "mu": mu,
            "logvar": logvar,
            "z": z,
            "recon": self.decoder(z),
            "p": project_normalize(mu if reg_input == "mean" else z, self.proj),
        }


# --------------------------------------------------------------------------
# estimator
# --------------------------------------------------------------------------

class TemporalVAE(TransformerMixin, BaseEstimator):
    """Causal-window VAE trained on trajectory frames.

    ``fit`` takes frames shaped (n_trajectories, T, H, W, 3) and samples
    random length-``seq_len`` segments; ``transform`` returns the latent
    means (n_trajectories, T, latent_dim). With ``beta``, ``lambda_slow`` and
    ``lambda_uniform`` all zero this is a plain reconstruction autoencoder.
    """

    def __init__(
        self,
        latent_dim=32,
        window=8,
        feature_width=128,
        depth=2,
        heads=4,
        proj_dim=64,
        proj_mode="with_head",
        channels=(16, 32, 64),
        beta=1e-6,
        lambda_slow=0.1,
        lambda_uniform=0.1,
        slow_mode="all_pairs",
        recon_reduction="pixel_mean",
        seq_len=16,
        batch_size=16,
        n_steps=2000,
        lr=5e-4,
        warmup=200,
        min_ratio=0.1,
        seed=0,
        precision="32",
        reg_input="mean",
        log_every=0,
    ):
        self.latent_dim = latent_dim
        self.window = window
        self.feature_width = feature_width
        self.depth = depth
        self.heads = heads
        self.proj_dim = proj_dim
        self.proj_mode = proj_mode
        self.channels = channels
        self.beta = beta
        self.lambda_slow = lambda_slow
        self.lambda_uniform = lambda_uniform
        self.slow_mode = slow_mode
        self.recon_reduction = recon_reduction
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.lr = lr
        self.warmup = warmup
        self.min_ratio = min_ratio
        self.seed = seed
        self.precision = precision
        self.reg_input = reg_input
        self.log_every = log_every

    # -- configuration views -------------------------------------------------
    def rep_config(self, frame_hw: tuple[int, int] | None = None) -> RepConfig:
        h, w = frame_hw if frame_hw is not None else getattr(self, "frame_hw_", (32, 32))
        return RepConfig(
            latent_dim=self.latent_dim, window=self.window, feature_width=self.feature_width,
            depth=self.depth, heads=self.heads, proj_dim=self.proj_dim, proj_mode=self.proj_mode,
            channels=tuple(self.channels), frame_h=h, frame_w=w,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            beta=self.beta, lambda_slow=self.lambda_slow, lambda_uniform=self.lambda_uniform,
            slow_mode=self.slow_mode, proj_mode=self.proj_mode, recon_reduction=self.recon_reduction,
        )

    def _init_net(self, frame_hw):
        self.frame_hw_ = tuple(frame_hw)
        self.dtype_ = numcore.dtype_for(self.precision)
        torch.manual_seed(numcore.stream_key(self.seed, "init") & 0x7FFF_FFFF_FFFF_FFFF)
        self.net_ = TemporalVAENet(self.rep_config(frame_hw)).to(self.dtype_)
        self.rep_config_ = self.net_.cfg

    # -- training ------------------------------------------------------------
    def fit(self, X, y=None, callback=None):
        X = check_frames(X, min_len=self.seq_len)
        N, T = X.shape[:2]
        if self.lambda_uniform and N < 2:
            raise ContractViolation("uniformity needs at least two trajectories")
        self._init_net(X.shape[2:4])
        self.loss_config_ = self.loss_config()
        params = list(self.net_.parameters())
        opt = numcore.Adam(params)
        if self.reg_input not in ("mean", "sample"):
            raise ContractViolation("reg_input must be 'mean' or 'sample'")
        sched = numcore.LRSchedule(self.lr, min(self.warmup, self.n_steps), self.n_steps, self.min_ratio)
        rng = numcore.np_rng(self.seed, "segments")
        self.history_: list[dict] = []
        self.net_.train()
        B = min(self.batch_size, N)
        for step in range(self.n_steps):
            traj = rng.choice(N, size=B, replace=False)
            t0 = rng.integers(0, T - self.seq_len + 1, size=B)
            batch = np.stack([X[n, s : s + self.seq_len] for n, s in zip(traj, t0)])
            frames = frames_to_tensor(batch, self.dtype_)
            report_box = {}

            def objective():
                out = self.net_(
                    frames, sample=True, generator=numcore.torch_generator(self.seed, "bottleneck", step),
                    reg_input=self.reg_input,
                )
                loss, report = total_loss(out["recon"], frames, out["mu"], out["logvar"], out["p"], self.loss_config_)
                report_box["r"] = report
                return loss

            try:
                _, grads = numcore.forward_backward(objective, params)
            except NumericFailure:
                log.error("non-finite objective at step %d", step)
                raise
            lr = sched.rate(step + 1)
            opt.step(grads, lr)
            row = {"step": step + 1, "lr": lr, **report_box["r"].as_row()}
            self.history_.append(row)
            if callback is not None:
                callback(row, self)
            if self.log_every and (step + 1) % self.log_every == 0:
                log.info("step %d  %s", step + 1, {k: round(v, 5) for k, v in row.items() if k.startswith("L_")})
        self.net_.eval()
        return self

    # -- inference -----------------------------------------------------------
    @torch.no_grad()
    def _run(self, X, chunk: int = 8) -> dict:
        check_is_fitted(self, "net_")
        X = check_frames(X, frame_hw=self.frame_hw_)
        self.net_.eval()
        outs = []
        for s in range(0, len(X), chunk):
            outs.append(self.net_(frames_to_tensor(X[s : s + chunk], self.dtype_), sample=False))
        return {k: torch.cat([o[k] for o in outs]) for k in outs[0]}

    def transform(self, X):
        """Latent means (N, T, latent_dim) in evaluation mode."""
        return self._run(X)["mu"].numpy()

    def encode(self, X) -> dict:
        return {k: v.numpy() for k, v in self._run(X).items() if k in ("mu", "logvar", "p")}

    def project(self, X):
        return self._run(X)["p"].numpy()

    def reconstruct(self, X):
        """Reconstructed frames (N, T, H, W, 3) in [0, 1]."""
        return self._run(X)["recon"].permute(0, 1, 3, 4, 2).numpy()

    @torch.no_grad()
    def decode(self, z) -> np.ndarray:
        check_is_fitted(self, "net_")
        zt = torch.as_tensor(np.asarray(z), dtype=self.dtype_)
        if zt.shape[-1] != self.latent_dim:
            raise ContractViolation(f"latent dim {zt.shape[-1]} != {self.latent_dim}")
        out = self.net_.decoder(zt)
        return out.movedim(-3, -1).numpy()

    @torch.no_grad()
    def loss_report(self, X, batch_size: int | None = None, seed: int = 0, n_batches: int = 4) -> LossReport:
        """Monitored objective terms on random segments, evaluation mode."""
        check_is_fitted(self, "net_")
        X = check_frames(X, min_len=self.seq_len)
        N, T = X.shape[:2]
        B = min(batch_size or self.batch_size, N)
        rng = numcore.np_rng(seed, "diagnostics")
        cfg = self.loss_config_
        rows = []
        for _ in range(n_batches):
            traj = rng.choice(N, size=B, replace=False)
            t0 = rng.integers(0, T - self.seq_len + 1, size=B)
            frames = frames_to_tensor(np.stack([X[n, s : s + self.seq_len] for n, s in zip(traj, t0)]), self.dtype_)
            out = self.net_(frames, sample=False)
            rows.append(total_loss(out["recon"], frames, out["mu"], out["logvar"], out["p"], cfg)[1])
        mean = lambda k: float(np.mean([getattr(r, k) for r in rows]))
        return LossReport(mean("recon"), mean("kl"), mean("slow"), mean("uniform"), mean("total"), {})

    # -- persistence ---------------------------------------------------------
    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "net_")
        path = Path(path)
        numcore.save_arrays(path, {k: v for k, v in self.net_.state_dict().items()})
        sidecar = {
            "kind": "repmodel",
            "rep_config": self.rep_config_.to_dict(),
            "params": _jsonable(self.get_params()),
            "digest": rep_digest(self.rep_config_),
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "TemporalVAE":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        if sidecar.get("kind") != "repmodel":
            raise ContractViolation("sidecar does not describe a representation model")
        params = sidecar["params"]
        params["channels"] = tuple(params["channels"])
        est = cls(**params)
        rc = sidecar["rep_config"]
        est._init_net((rc["frame_h"], rc["frame_w"]))
        if rep_digest(est.rep_config_) != sidecar["digest"]:
            raise ContractViolation("sidecar digest does not match its RepConfig")
        arrays = numcore.load_arrays(path)
        est.net_.load_state_dict({k: torch.as_tensor(v, dtype=est.dtype_) for k, v in arrays.items()})
        est.net_.eval()
        est.loss_config_ = est.loss_config()
        return est


def rep_digest(cfg: RepConfig) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, np.generic):
            v = v.item()
        out[k] = v
    return out
