"""Deterministic first-person grid maze: generation, motion, raycast rendering."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .numcore import ContractViolation, np_rng

TWO_PI = 2.0 * math.pi

# RGB, deliberately few so that distinct places look alike.
DEFAULT_PALETTE: tuple[tuple[int, int, int], ...] = (
    (220, 60, 60),
    (60, 170, 70),
    (70, 90, 220),
    (230, 200, 50),
    (200, 80, 200),
    (70, 200, 210),
)
CEILING = (150, 150, 165)
FLOOR = (85, 75, 65)


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2


@dataclass(frozen=True)
class EnvConfig:
    step_size: float = 0.25
    turn: float = math.pi / 8  # 22.5 degrees
    fov: float = math.radians(66.0)
    frame_h: int = 32
    frame_w: int = 32
    margin: float = 0.1
    palette: tuple[tuple[int, int, int], ...] = DEFAULT_PALETTE

    def __post_init__(self):
        if not 0 < self.step_size < 1:
            raise ContractViolation("step_size must lie in (0, 1) cell")
        if not 0 < self.fov < math.pi:
            raise ContractViolation("fov must lie in (0, pi)")
        if self.turn <= 0:
            raise ContractViolation("turn increment must be positive")
        if not 0 <= self.margin < 0.5:
            raise ContractViolation("margin must lie in [0, 0.5)")
        object.__setattr__(self, "palette", tuple(tuple(int(v) for v in c) for c in self.palette))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "palette" in d:
            d["palette"] = tuple(tuple(c) for c in d["palette"])
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


@dataclass(frozen=True, eq=False)
class MazeMap:
    """Grid of ``width`` x ``height`` unit cells with walls on cell edges.

    ``h_walls[j, i]`` is the wall on the line y=j spanning x in [i, i+1];
    ``v_walls[j, i]`` is the wall on the line x=i spanning y in [j, j+1].
    """

    width: int
    height: int
    h_walls: np.ndarray  # (height+1, width) bool
    v_walls: np.ndarray  # (height, width+1) bool
    h_colors: np.ndarray  # same shape, palette index
    v_colors: np.ndarray
    seed: int = 0
    braid: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, MazeMap):
            return NotImplemented
        return (
            (self.width, self.height) == (other.width, other.height)
            and np.array_equal(self.h_walls, other.h_walls)
            and np.array_equal(self.v_walls, other.v_walls)
            and np.array_equal(self.h_colors, other.h_colors)
            and np.array_equal(self.v_colors, other.v_colors)
        )

    __hash__ = None

    @property
    def wall_count(self) -> int:
        return int(self.h_walls.sum() + self.v_walls.sum())

    def neighbors(self, i: int, j: int) -> list[tuple[int, int]]:
        out = []
        if not self.v_walls[j, i + 1]:
            out.append((i + 1, j))
        if not self.v_walls[j, i]:
            out.append((i - 1, j))
        if not self.h_walls[j + 1, i]:
            out.append((i, j + 1))
        if not self.h_walls[j, i]:
            out.append((i, j - 1))
        return out

    def free_cells(self) -> list[tuple[int, int]]:
        return [(i, j) for j in range(self.height) for i in range(self.width)]


def full_wall_count(width: int, height: int) -> int:
    return (height + 1) * width + height * (width + 1)


def spanning_wall_count(width: int, height: int) -> int:
    """Walls left after carving a spanning tree (a perfect maze)."""
    return full_wall_count(width, height) - (width * height - 1)


def generate_maze(seed: int, width: int, height: int, braid: float = 0.0, n_colors: int = len(DEFAULT_PALETTE)) -> MazeMap:
    """Carve a perfect maze by randomized depth-first search, then optionally
    knock out a ``braid`` fraction of the remaining interior walls."""
    if width < 2 or height < 2:
        raise ContractViolation("maze must be at least 2x2 cells")
    if not 0.0 <= braid <= 1.0:
        raise ContractViolation("braid fraction must lie in [0, 1]")
    rng = np_rng(seed, f"maze/{width}x{height}")
    h_walls = np.ones((height + 1, width), dtype=bool)
    v_walls = np.ones((height, width + 1), dtype=bool)

    visited = np.zeros((height, width), dtype=bool)
    start = (int(rng.integers(width)), int(rng.integers(height)))
    stack = [start]
    visited[start[1], start[0]] = True
    while stack:
        i, j = stack[-1]
        options = [
            (di, dj)
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
            if 0 <= i + di < width and 0 <= j + dj < height and not visited[j + dj, i + di]
        ]
        if not options:
            stack.pop()
            continue
        di, dj = options[int(rng.integers(len(options)))]
        _open(h_walls, v_walls, i, j, di, dj)
        visited[j + dj, i + di] = True
        stack.append((i + di, j + dj))

    if braid > 0:
        interior = [("h", j, i) for j in range(1, height) for i in range(width) if h_walls[j, i]]
        interior += [("v", j, i) for j in range(height) for i in range(1, width) if v_walls[j, i]]
        n_remove = int(round(braid * len(interior)))
        for idx in rng.permutation(len(interior))[:n_remove]:
            kind, j, i = interior[idx]
            (h_walls if kind == "h" else v_walls)[j, i] = False

    h_colors = rng.integers(n_colors, size=h_walls.shape).astype(np.int8)
    v_colors = rng.integers(n_colors, size=v_walls.shape).astype(np.int8)
    return MazeMap(width, height, h_walls, v_walls, h_colors, v_colors, seed, braid)


def _open(h_walls, v_walls, i, j, di, dj):
    if di == 1:
        v_walls[j, i + 1] = False
    elif di == -1:
        v_walls[j, i] = False
    elif dj == 1:
        h_walls[j + 1, i] = False
    else:
        h_walls[j, i] = False


def reachable_cells(maze: MazeMap, start: tuple[int, int] = (0, 0)) -> set[tuple[int, int]]:
    seen = {start}
    frontier = [start]
    while frontier:
        cell = frontier.pop()
        for nb in maze.neighbors(*cell):
            if nb not in seen:
                seen.add(nb)
                frontier.append(nb)
    return seen


# --------------------------------------------------------------------------
# poses and motion
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float

    @property
    def cell(self) -> tuple[int, int]:
        return int(math.floor(self.x)), int(math.floor(self.y))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=np.float64)


def wrap_angle(theta: float) -> float:
    t = math.fmod(theta, TWO_PI)
    if t < 0:
        t += TWO_PI
    return 0.0 if t >= TWO_PI else t


def _turn(theta: float, delta: float, sign: int) -> float:
    # Headings on the turn lattice are stored as exact multiples of delta so
    # that opposite turns cancel bit-for-bit.
    k = theta / delta
    n = round(k)
    if abs(k - n) < 1e-9:
        n += sign
        period = TWO_PI / delta
        if abs(period - round(period)) < 1e-9:
            n %= int(round(period))
            return n * delta
        return wrap_angle(n * delta)
    return wrap_angle(theta + sign * delta)


def is_free(maze: MazeMap, x: float, y: float, margin: float) -> bool:
    """True when a disc of radius ``margin`` at (x, y) touches no wall."""
    if not (margin <= x <= maze.width - margin and margin <= y <= maze.height - margin):
        return False
    i = min(int(math.floor(x)), maze.width - 1)
    j = min(int(math.floor(y)), maze.height - 1)
    fx, fy = x - i, y - j
    if maze.v_walls[j, i] and fx < margin:
        return False
    if maze.v_walls[j, i + 1] and 1.0 - fx < margin:
        return False
    if maze.h_walls[j, i] and fy < margin:
        return False
    if maze.h_walls[j + 1, i] and 1.0 - fy < margin:
        return False
    # wall ends meeting at the nearest cell corner
    ci = i + (1 if fx > 0.5 else 0)
    cj = j + (1 if fy > 0.5 else 0)
    if (x - ci) ** 2 + (y - cj) ** 2 < margin**2 and _corner_has_wall(maze, ci, cj):
        return False
    return True


def _corner_has_wall(maze: MazeMap, ci: int, cj: int) -> bool:
    W, H = maze.width, maze.height
    return bool(
        (ci - 1 >= 0 and maze.h_walls[cj, ci - 1])
        or (ci < W and maze.h_walls[cj, ci])
        or (cj - 1 >= 0 and maze.v_walls[cj - 1, ci])
        or (cj < H and maze.v_walls[cj, ci])
    )


def check_pose(maze: MazeMap, pose: Pose, cfg: EnvConfig) -> None:
    if not (0.0 <= pose.theta < TWO_PI) or not math.isfinite(pose.theta):
        raise ContractViolation(f"heading {pose.theta} outside [0, 2pi)")
    if not is_free(maze, pose.x, pose.y, cfg.margin):
        raise ContractViolation(f"pose ({pose.x:.4f}, {pose.y:.4f}) is not in free space")


def step(maze: MazeMap, pose: Pose, action: Action | int, cfg: EnvConfig) -> Pose:
    check_pose(maze, pose, cfg)
    action = Action(int(action))
    if action is Action.TURN_LEFT:
        return Pose(pose.x, pose.y, _turn(pose.theta, cfg.turn, +1))
    if action is Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, _turn(pose.theta, cfg.turn, -1))
    dx = cfg.step_size * math.cos(pose.theta)
    dy = cfg.step_size * math.sin(pose.theta)
    x, y = pose.x, pose.y
    if is_free(maze, x + dx, y, cfg.margin):
        x += dx
    if is_free(maze, x, y + dy, cfg.margin):
        y += dy
    return Pose(x, y, pose.theta)


def cell_center(i: int, j: int, theta: float = 0.0) -> Pose:
    return Pose(i + 0.5, j + 0.5, theta)


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def focal_length(cfg: EnvConfig) -> float:
    return cfg.frame_w / (2.0 * math.tan(cfg.fov / 2.0))


def cast_rays(maze: MazeMap, pose: Pose, cfg: EnvConfig):
    """Grid DDA for every image column.

    Returns (perpendicular distance, palette index, side) per column, where
    side is 0 for walls on x-lines and 1 for walls on y-lines.
    """
    W = cfg.frame_w
    cos_t, sin_t = math.cos(pose.theta), math.sin(pose.theta)
    half = math.tan(cfg.fov / 2.0)
    cam = 1.0 - 2.0 * (np.arange(W) + 0.5) / W  # +1 at the left edge
    rx = cos_t - sin_t * half * cam
    ry = sin_t + cos_t * half * cam

    with np.errstate(divide="ignore"):
        ddx = np.where(rx == 0, np.inf, np.abs(1.0 / rx))
        ddy = np.where(ry == 0, np.inf, np.abs(1.0 / ry))
    mx = np.full(W, int(math.floor(pose.x)))
    my = np.full(W, int(math.floor(pose.y)))
    sx = np.where(rx >= 0, 1, -1)
    sy = np.where(ry >= 0, 1, -1)
    side_x = np.where(rx >= 0, (mx + 1 - pose.x) * ddx, (pose.x - mx) * ddx)
    side_y = np.where(ry >= 0, (my + 1 - pose.y) * ddy, (pose.y - my) * ddy)

    dist = np.full(W, np.nan)
    color = np.zeros(W, dtype=np.int64)
    side = np.zeros(W, dtype=np.int64)
    active = np.ones(W, dtype=bool)
    for _ in range(2 * (maze.width + maze.height) + 4):
        if not active.any():
            break
        cross_x = active & (side_x < side_y)
        cross_y = active & ~cross_x
        if cross_x.any():
            idx = np.nonzero(cross_x)[0]
            line = mx[idx] + (sx[idx] > 0)
            row = my[idx]
            wall = maze.v_walls[row, line]
            hit = idx[wall]
            dist[hit] = side_x[hit]
            color[hit] = maze.v_colors[row[wall], line[wall]]
            side[hit] = 0
            active[hit] = False
            go = idx[~wall]
            side_x[go] += ddx[go]
            mx[go] += sx[go]
        if cross_y.any():
            idx = np.nonzero(cross_y)[0]
            line = my[idx] + (sy[idx] > 0)
            col = mx[idx]
            wall = maze.h_walls[line, col]
            hit = idx[wall]
            dist[hit] = side_y[hit]
            color[hit] = maze.h_colors[line[wall], col[wall]]
            side[hit] = 1
            active[hit] = False
            go = idx[~wall]
            side_y[go] += ddy[go]
            my[go] += sy[go]
    if active.any():
        raise RuntimeError("ray escaped the maze; outer boundary is not closed")
    return dist, color, side


def render(maze: MazeMap, pose: Pose, cfg: EnvConfig) -> np.ndarray:
    """First-person frame as uint8 of shape (H, W, 3)."""
    H, W = cfg.frame_h, cfg.frame_w
    dist, color, side = cast_rays(maze, pose, cfg)
    slice_h = focal_length(cfg) / np.maximum(dist, 1e-6)
    rows = np.arange(H)[:, None] + 0.5
    wall_mask = np.abs(rows - H / 2.0) < slice_h[None, :] / 2.0

    palette = np.asarray(cfg.palette, dtype=np.float64)
    shade = (1.0 / (1.0 + 0.25 * dist)) * np.where(side == 1, 0.8, 1.0)
    wall_rgb = palette[color] * shade[:, None]  # (W, 3)

    frame = np.empty((H, W, 3), dtype=np.float64)
    frame[: H // 2] = CEILING
    frame[H // 2 :] = FLOOR
    frame = np.where(wall_mask[:, :, None], wall_rgb[None, :, :], frame)
    return np.clip(np.rint(frame), 0, 255).astype(np.uint8)


def oracle_state(pose: Pose, maze: MazeMap) -> np.ndarray:
    """(x, y) mapped affinely to [-1, 1] by the map extents, plus (sin, cos)."""
    return np.array(
        [
            2.0 * pose.x / maze.width - 1.0,
            2.0 * pose.y / maze.height - 1.0,
            math.sin(pose.theta),
            math.cos(pose.theta),
        ]
    )


def state_to_pose(state: np.ndarray, maze: MazeMap) -> Pose:
    x = (float(state[0]) + 1.0) * maze.width / 2.0
    y = (float(state[1]) + 1.0) * maze.height / 2.0
    return Pose(x, y, wrap_angle(math.atan2(float(state[2]), float(state[3]))))


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def ascii_map(maze: MazeMap) -> str:
    """Top-down dump, y increasing downwards, one character per half-edge."""
    lines = []
    for j in range(maze.height + 1):
        row = "+"
        for i in range(maze.width):
            row += ("-" if maze.h_walls[j, i] else " ") + "+"
        lines.append(row)
        if j < maze.height:
            row = ""
            for i in range(maze.width + 1):
                row += "|" if maze.v_walls[j, i] else " "
                if i < maze.width:
                    row += " "
            lines.append(row)
    return "\n".join(lines) + "\n"


def write_ppm(path: str | Path, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    if frame.dtype != np.uint8:
        frame = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = frame.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + frame.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError("not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    pixels = data[pos + 1 : pos + 1 + w * h * 3]  # exactly one whitespace byte after maxval
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def frame_strip(rows: list[np.ndarray], gap: int = 1) -> np.ndarray:
    """Tile rows of frame sequences into one image (rows x time)."""
    rows = [np.asarray(r) for r in rows]
    n = max(len(r) for r in rows)
    h, w = rows[0].shape[1:3]
    out = np.full(((h + gap) * len(rows), (w + gap) * n, 3), 255, dtype=np.uint8)
    for a, seq in enumerate(rows):
        for b, fr in enumerate(seq):
            if fr.dtype != np.uint8:
                fr = np.clip(np.rint(fr * 255.0), 0, 255).astype(np.uint8)
            out[a * (h + gap) : a * (h + gap) + h, b * (w + gap) : b * (w + gap) + w] = fr
    return out
