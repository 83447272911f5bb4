"""Noisy-A* behaviour policy, trajectory collection and the binary dataset format."""
from __future__ import annotations

import heapq
import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mazeworld import (
    Action,
    EnvConfig,
    MazeMap,
    Pose,
    cell_center,
    generate_maze,
    oracle_state,
    render,
    step,
)
from .numcore import ContractViolation, np_rng, stream_key

# planner headings: 0 -> +x, 1 -> +y, 2 -> -x, 3 -> -y (TURN_LEFT increments)
_DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))


def _can_move(maze: MazeMap, i: int, j: int, h: int) -> bool:
    if h == 0:
        return not maze.v_walls[j, i + 1]
    if h == 1:
        return not maze.h_walls[j + 1, i]
    if h == 2:
        return not maze.v_walls[j, i]
    return not maze.h_walls[j, i]


def planner_successors(maze: MazeMap, state: tuple[int, int, int]):
    """(action, next state) pairs in fixed action order."""
    i, j, h = state
    out = []
    if _can_move(maze, i, j, h):
        di, dj = _DIRS[h]
        out.append((Action.FORWARD, (i + di, j + dj, h)))
    out.append((Action.TURN_LEFT, (i, j, (h + 1) % 4)))
    out.append((Action.TURN_RIGHT, (i, j, (h - 1) % 4)))
    return out


def plan_astar(maze: MazeMap, start: tuple[int, int, int], goal: tuple[int, int]) -> list[Action]:
    """Shortest action sequence on the (cell, quarter-heading) graph.

    Among equal-cost plans the lexicographically smallest under
    FORWARD < TURN_LEFT < TURN_RIGHT is returned.
    """
    i0, j0, h0 = start
    for (i, j) in ((i0, j0), goal):
        if not (0 <= i < maze.width and 0 <= j < maze.height):
            raise ContractViolation(f"cell {(i, j)} outside the maze")
    start = (i0, j0, h0 % 4)
    gi, gj = goal

    def heuristic(s):
        return abs(s[0] - gi) + abs(s[1] - gj)

    # key (f, path) keeps expansion order consistent with the tie-break rule
    frontier = [(heuristic(start), (), start)]
    closed = set()
    while frontier:
        f, path, s = heapq.heappop(frontier)
        if s in closed:
            continue
        if (s[0], s[1]) == (gi, gj):
            return [Action(a) for a in path]
        closed.add(s)
        for a, nxt in planner_successors(maze, s):
            if nxt not in closed:
                heapq.heappush(frontier, (len(path) + 1 + heuristic(nxt), path + (int(a),), nxt))
    raise ContractViolation(f"goal {goal} unreachable from {start[:2]}")


def quarter_ticks(cfg: EnvConfig) -> int:
    """Fine turns making up one planner quarter turn."""
    return max(1, int(round((math.pi / 2) / cfg.turn)))


def expand_plan(plan: list[Action], cfg: EnvConfig) -> list[Action]:
    q = quarter_ticks(cfg)
    per_cell = max(1, int(round(1.0 / cfg.step_size)))
    out: list[Action] = []
    for a in plan:
        out.extend([a] * (per_cell if a is Action.FORWARD else q))
    return out


# --------------------------------------------------------------------------
# collection
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Trajectory:
    actions: np.ndarray  # (T,) uint8; actions[t] is applied to poses[t]
    frames: np.ndarray  # (T, H, W, 3) uint8
    poses: np.ndarray  # (T, 3) float64 (x, y, theta)
    map_seed: int
    policy_seed: int

    def __post_init__(self):
        T = len(self.actions)
        if len(self.frames) != T or len(self.poses) != T:
            raise ContractViolation("actions, frames and poses must share length T")

    def __len__(self) -> int:
        return len(self.actions)

    def pose(self, t: int) -> Pose:
        x, y, th = self.poses[t]
        return Pose(float(x), float(y), float(th))


class NoisyAStarPolicy:
    """Follows A* plans toward random goal cells; each step is replaced by a
    uniform random action with probability ``epsilon``."""

    def __init__(self, maze: MazeMap, cfg: EnvConfig, rng: np.random.Generator, epsilon: float):
        self.maze, self.cfg, self.rng, self.epsilon = maze, cfg, rng, epsilon
        self.queue: list[Action] = []
        self.goal: tuple[int, int] | None = None

    def _new_goal(self, current: tuple[int, int]) -> tuple[int, int]:
        cells = [c for c in self.maze.free_cells() if c != current]
        return cells[int(self.rng.integers(len(cells)))]

    def _planned(self, pose: Pose) -> Action:
        if self.queue:
            return self.queue.pop(0)
        cell = pose.cell
        q = quarter_ticks(self.cfg)
        k = int(round(pose.theta / self.cfg.turn))
        r = k % q
        if r:
            # snap back onto a quarter heading first
            turn = Action.TURN_RIGHT if r <= q / 2 else Action.TURN_LEFT
            self.queue = [turn] * ((r if turn is Action.TURN_RIGHT else q - r) - 1)
            return turn
        if self.goal is None or cell == self.goal:
            self.goal = self._new_goal(cell)
        h4 = (k // q) % 4
        plan = plan_astar(self.maze, (cell[0], cell[1], h4), self.goal)
        self.queue = expand_plan(plan[:1], self.cfg)
        return self.queue.pop(0)

    def act(self, pose: Pose) -> Action:
        # draw the noise coin first so the random stream layout is fixed
        noisy = self.rng.random() < self.epsilon
        if noisy:
            self.queue = []
            return Action(int(self.rng.integers(3)))
        return self._planned(pose)


def start_pose(maze: MazeMap, rng: np.random.Generator, cfg: EnvConfig) -> Pose:
    i, j = int(rng.integers(maze.width)), int(rng.integers(maze.height))
    quarter = int(rng.integers(4))
    return cell_center(i, j, quarter * quarter_ticks(cfg) * cfg.turn)


def collect_trajectory(
    maze: MazeMap,
    cfg: EnvConfig,
    policy_seed: int,
    T: int,
    epsilon: float = 0.2,
    start: Pose | None = None,
) -> Trajectory:
    if T < 1:
        raise ContractViolation("trajectory length must be >= 1")
    if not 0.0 <= epsilon <= 1.0:
        raise ContractViolation("epsilon must lie in [0, 1]")
    rng = np_rng(policy_seed, "policy")
    pose = start if start is not None else start_pose(maze, rng, cfg)
    policy = NoisyAStarPolicy(maze, cfg, rng, epsilon)
    actions = np.empty(T, dtype=np.uint8)
    frames = np.empty((T, cfg.frame_h, cfg.frame_w, 3), dtype=np.uint8)
    poses = np.empty((T, 3), dtype=np.float64)
    for t in range(T):
        frames[t] = render(maze, pose, cfg)
        poses[t] = (pose.x, pose.y, pose.theta)
        a = policy.act(pose)
        actions[t] = int(a)
        pose = step(maze, pose, a, cfg)
    return Trajectory(actions, frames, poses, maze.seed, policy_seed)


def replay(maze: MazeMap, cfg: EnvConfig, start: Pose, actions) -> tuple[np.ndarray, np.ndarray]:
    """Re-simulate ``actions`` from ``start``: (poses, frames) incl. the start."""
    pose = start
    poses = [pose.as_array()]
    frames = [render(maze, pose, cfg)]
    for a in actions:
        pose = step(maze, pose, int(a), cfg)
        poses.append(pose.as_array())
        frames.append(render(maze, pose, cfg))
    return np.stack(poses), np.stack(frames)


def replay_matches(maze: MazeMap, cfg: EnvConfig, traj: Trajectory) -> bool:
    poses, frames = replay(maze, cfg, traj.pose(0), traj.actions[:-1])
    return bool(np.array_equal(poses, traj.poses) and np.array_equal(frames, traj.frames))


# --------------------------------------------------------------------------
# dataset container + binary format
# --------------------------------------------------------------------------

class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class TruncatedDatasetError(DatasetFormatError):
    pass


class ConfigMismatchError(DatasetFormatError):
    pass


DATASET_MAGIC = b"GRWD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII32sQIId")


@dataclass(eq=False)
class Dataset:
    actions: np.ndarray  # (N, T) uint8
    frames: np.ndarray  # (N, T, H, W, 3) uint8
    poses: np.ndarray  # (N, T, 3) float64
    policy_seeds: np.ndarray  # (N,) uint64
    env_digest: bytes
    map_seed: int
    maze_width: int
    maze_height: int
    braid: float = 0.0

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def T(self) -> int:
        return self.actions.shape[1]

    def maze(self) -> MazeMap:
        return generate_maze(self.map_seed, self.maze_width, self.maze_height, self.braid)

    def trajectory(self, n: int) -> Trajectory:
        return Trajectory(self.actions[n], self.frames[n], self.poses[n], self.map_seed, int(self.policy_seeds[n]))

    def states(self) -> np.ndarray:
        """Oracle state vectors (N, T, 4)."""
        maze = self.maze()
        p = self.poses
        return np.stack(
            [2 * p[..., 0] / maze.width - 1, 2 * p[..., 1] / maze.height - 1, np.sin(p[..., 2]), np.cos(p[..., 2])],
            axis=-1,
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.actions[idx], self.frames[idx], self.poses[idx], self.policy_seeds[idx],
            self.env_digest, self.map_seed, self.maze_width, self.maze_height, self.braid,
        )

    def check_config(self, cfg: EnvConfig) -> None:
        if cfg.digest() != self.env_digest:
            raise ConfigMismatchError("dataset was collected with a different environment config")
        if self.frames.shape[2:4] != (cfg.frame_h, cfg.frame_w):
            raise ConfigMismatchError("frame dimensions differ from the environment config")

    @classmethod
    def from_trajectories(cls, trajs: list[Trajectory], cfg: EnvConfig, maze: MazeMap) -> "Dataset":
        if not trajs:
            raise ContractViolation("empty trajectory list")
        T = len(trajs[0])
        if any(len(t) != T for t in trajs):
            raise ContractViolation("trajectories must share length")
        return cls(
            np.stack([t.actions for t in trajs]),
            np.stack([t.frames for t in trajs]),
            np.stack([t.poses for t in trajs]),
            np.array([t.policy_seed for t in trajs], dtype=np.uint64),
            cfg.digest(), maze.seed, maze.width, maze.height, maze.braid,
        )


def collect_dataset(
    maze: MazeMap, cfg: EnvConfig, n: int, T: int, epsilon: float = 0.2, seed: int = 0
) -> Dataset:
    trajs = [
        collect_trajectory(maze, cfg, stream_key(seed, "trajectory", i) & 0xFFFF_FFFF_FFFF, T, epsilon)
        for i in range(n)
    ]
    return Dataset.from_trajectories(trajs, cfg, maze)


def collect_states(
    maze: MazeMap, cfg: EnvConfig, n: int, T: int, epsilon: float = 0.2, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Frame-free rollouts of the collection policy: oracle states (n, T, 4)
    and actions (n, T). Cheap enough to give the oracle dynamics more data."""
    if n < 1 or T < 1:
        raise ContractViolation("need n >= 1 trajectories of length >= 1")
    states = np.empty((n, T, 4))
    actions = np.empty((n, T), dtype=np.uint8)
    for i in range(n):
        rng = np_rng(stream_key(seed, "state-trajectory", i) & 0xFFFF_FFFF_FFFF, "policy")
        pose = start_pose(maze, rng, cfg)
        policy = NoisyAStarPolicy(maze, cfg, rng, epsilon)
        for t in range(T):
            states[i, t] = oracle_state(pose, maze)
            a = policy.act(pose)
            actions[i, t] = int(a)
            pose = step(maze, pose, a, cfg)
    return states, actions


def dataset_bytes(ds: Dataset) -> bytes:
    N, T = ds.actions.shape
    H, W, C = ds.frames.shape[2:]
    parts = [
        _HEADER.pack(
            DATASET_MAGIC, DATASET_VERSION, N, T, H, W, C, ds.env_digest,
            ds.map_seed, ds.maze_width, ds.maze_height, float(ds.braid),
        )
    ]
    for n in range(N):
        parts.append(struct.pack("<Q", int(ds.policy_seeds[n])))
        parts.append(np.ascontiguousarray(ds.actions[n], dtype=np.uint8).tobytes())
        parts.append(np.ascontiguousarray(ds.frames[n], dtype=np.uint8).tobytes())
        parts.append(np.ascontiguousarray(ds.poses[n], dtype="<f8").tobytes())
    return b"".join(parts)


def write_dataset(path: str | Path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def read_dataset(path: str | Path, cfg: EnvConfig | None = None) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != DATASET_MAGIC:
        raise BadMagicError("not a GRWM trajectory dataset (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedDatasetError("file ends inside the header")
    (_, version, N, T, H, W, C, digest, map_seed, mw, mh, braid) = _HEADER.unpack_from(data, 0)
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"dataset version {version} (expected {DATASET_VERSION})")
    per = 8 + T + T * H * W * C + 8 * T * 3
    expected = _HEADER.size + N * per
    if len(data) < expected:
        raise TruncatedDatasetError(f"expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise DatasetFormatError("trailing bytes after the last trajectory")
    seeds = np.empty(N, dtype=np.uint64)
    actions = np.empty((N, T), dtype=np.uint8)
    frames = np.empty((N, T, H, W, C), dtype=np.uint8)
    poses = np.empty((N, T, 3), dtype=np.float64)
    pos = _HEADER.size
    for n in range(N):
        (seeds[n],) = struct.unpack_from("<Q", data, pos)
        pos += 8
        actions[n] = np.frombuffer(data, np.uint8, T, pos)
        pos += T
        frames[n] = np.frombuffer(data, np.uint8, T * H * W * C, pos).reshape(T, H, W, C)
        pos += T * H * W * C
        poses[n] = np.frombuffer(data, "<f8", T * 3, pos).reshape(T, 3)
        pos += 8 * T * 3
    if actions.max(initial=0) > 2:
        raise DatasetFormatError("action byte outside {0, 1, 2}")
    ds = Dataset(actions, frames, poses, seeds, digest, map_seed, mw, mh, braid)
    if cfg is not None:
        ds.check_config(cfg)
    return ds


def split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic trajectory-level train/validation split."""
    if not 0.0 < fraction < 1.0:
        raise ContractViolation("split fraction must lie in (0, 1)")
    perm = np_rng(seed, "split").permutation(n)
    n_train = int(round(fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def coverage_report(ds: Dataset) -> dict:
    maze = ds.maze()
    cells = np.floor(ds.poses[..., :2]).astype(int)
    visited = {(int(i), int(j)) for i, j in cells.reshape(-1, 2)}
    free = maze.free_cells()
    hist = Counter(int(a) for a in ds.actions.reshape(-1))
    return {
        "free_cells": len(free),
        "visited_cells": sum(1 for c in free if c in visited),
        "coverage": sum(1 for c in free if c in visited) / len(free),
        "action_histogram": {Action(k).name: hist.get(k, 0) for k in range(3)},
    }
