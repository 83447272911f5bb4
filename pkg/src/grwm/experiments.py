"""Pipeline stages shared by the command line and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .config import RunConfig
from .evalkit import MetricCurve, cluster_report, diagnostics, framewise_mse, probe
from .latdyn import LatentDynamics, LatentWorldModel, OracleWorldModel
from .mazeworld import EnvConfig, MazeMap, generate_maze, oracle_state
from .repmodel import TemporalVAE
from .trajectories import Dataset, collect_dataset, collect_states, collect_trajectory, split

log = logging.getLogger(__name__)

# Named representation variants; each is a set of overrides on the config.
VARIANTS = {
    "vanilla": {"beta": 0.0, "lambda_slow": 0.0, "lambda_uniform": 0.0},
    "grwm": {},
    "no_uniform": {"lambda_uniform": 0.0},
    "no_slow": {"lambda_slow": 0.0},
    "no_head": {"proj_mode": "without_head"},
    "adjacent": {"slow_mode": "adjacent"},
}


def maze_for(cfg: RunConfig) -> MazeMap:
    d = cfg.data
    return generate_maze(d.maze_seed, d.maze_width, d.maze_height, d.braid)


def make_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    return collect_dataset(maze_for(cfg), cfg.env.env_config(), d.n_trajectories, d.length, d.epsilon, d.seed)


def data_split(cfg: RunConfig, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return split(len(ds), cfg.data.train_fraction, cfg.data.seed)


def train_representation(cfg: RunConfig, frames, variant: str = "grwm", seed: int | None = None, **overrides) -> TemporalVAE:
    params = cfg.rep_params()
    params.update(VARIANTS[variant])
    params.update(overrides)
    if seed is not None:
        params["seed"] = seed
    params["warmup"] = min(params["warmup"], params["n_steps"])
    return TemporalVAE(**params).fit(frames)


def train_dynamics(cfg: RunConfig, inputs, actions, backend: str | None = None, seed: int | None = None, **overrides) -> LatentDynamics:
    params = cfg.dyn_params(backend)
    params.update(overrides)
    if seed is not None:
        params["seed"] = seed
    return LatentDynamics(**params).fit(inputs, actions)


def oracle_training_data(cfg: RunConfig, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Training-split states plus extra frame-free trajectories from the same maze and policy."""
    tr, _ = data_split(cfg, ds)
    S, A = ds.states()[tr], ds.actions[tr].astype(np.int64)
    n = cfg.oracle.extra_trajectories
    if n:
        d = cfg.data
        xs, xa = collect_states(ds.maze(), cfg.env.env_config(), n, ds.T, d.epsilon, seed=d.seed)
        S, A = np.concatenate([S, xs]), np.concatenate([A, xa.astype(np.int64)])
    return S, A


def train_oracle(cfg: RunConfig, ds: Dataset, seed: int | None = None, **overrides) -> LatentDynamics:
    S, A = oracle_training_data(cfg, ds)
    return train_dynamics(cfg, S, A, "oracle", seed, **overrides)


# --------------------------------------------------------------------------
# evaluation episodes
# --------------------------------------------------------------------------

@dataclass
class Episodes:
    """Fresh held-out trajectories of length context + horizon."""

    frames: np.ndarray  # (E, c + h, H, W, 3) uint8
    actions: np.ndarray  # (E, c + h)
    states: np.ndarray  # (E, c + h, 4)
    poses: np.ndarray
    context: int

    @property
    def horizon(self) -> int:
        return self.frames.shape[1] - self.context

    def context_frames(self) -> np.ndarray:
        return self.frames[:, : self.context]

    def rollout_actions(self) -> np.ndarray:
        """Action applied at each predicted step: a_{c-1}, ..., a_{c+h-2}."""
        return self.actions[:, self.context - 1 : self.context - 1 + self.horizon]

    def truth(self) -> np.ndarray:
        return self.frames[:, self.context :]


def make_episodes(maze: MazeMap, env: EnvConfig, n: int, context: int, horizon: int, epsilon: float, seed: int) -> Episodes:
    trajs = [
        collect_trajectory(maze, env, numcore.stream_key(seed, "eval-episode", e) & 0xFFFF_FFFF_FFFF, context + horizon, epsilon)
        for e in range(n)
    ]
    poses = np.stack([t.poses for t in trajs])
    states = np.array([[oracle_state(t.pose(i), maze) for i in range(len(t))] for t in trajs])
    return Episodes(np.stack([t.frames for t in trajs]), np.stack([t.actions for t in trajs]), states, poses, context)


def rollout_curve(model, episodes: Episodes, mode: str = "mean", seed: int = 0) -> tuple[MetricCurve, np.ndarray]:
    if isinstance(model, OracleWorldModel):
        pred = model.rollout(episodes.states[:, : episodes.context], episodes.rollout_actions(), episodes.horizon)
    else:
        pred = model.rollout(episodes.context_frames(), episodes.rollout_actions(), episodes.horizon, seed=seed)
    return framewise_mse(pred, episodes.truth(), mode), pred


@dataclass
class RepEvaluation:
    probe: dict
    clusters: dict
    diagnostics: dict
    recon_mse: float
    assignments: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"probe": self.probe, "clusters": self.clusters, "diagnostics": self.diagnostics, "recon_mse": self.recon_mse}


def evaluate_representation(cfg: RunConfig, rep: TemporalVAE, ds: Dataset, seed: int = 0) -> RepEvaluation:
    tr, va = data_split(cfg, ds)
    Z = rep.transform(ds.frames)
    pr = probe(Z, ds.states(), (tr, va), seed=seed, n_steps=cfg.eval.probe_steps)
    cr = cluster_report(Z[va].reshape(-1, Z.shape[-1]), ds.poses[va].reshape(-1, 3), cfg.eval.clusters, seed)
    diag = diagnostics(rep, ds.frames[va], seed=seed)
    recon = float(np.mean((rep.reconstruct(ds.frames[va]) - ds.frames[va] / 255.0) ** 2))
    return RepEvaluation(pr.to_dict(), cr.to_dict(), diag, recon, cr.assignments)
