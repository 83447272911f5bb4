"""Run configuration: sectioned settings loaded from ``key.path = value`` files.

Values are JSON literals (``0.1``, ``"adjacent"``, ``[16, 32, 64]``,
``true``). Blank lines and lines starting with ``#`` are ignored.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .mazeworld import EnvConfig
from .numcore import ContractViolation


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass
class EnvSection:
    step_size: float = 0.25
    turn_degrees: float = 22.5
    fov_degrees: float = 66.0
    frame_h: int = 32
    frame_w: int = 32
    margin: float = 0.1

    def env_config(self) -> EnvConfig:
        return EnvConfig(
            step_size=self.step_size, turn=math.radians(self.turn_degrees), fov=math.radians(self.fov_degrees),
            frame_h=self.frame_h, frame_w=self.frame_w, margin=self.margin,
        )


@dataclass
class DataSection:
    maze_width: int = 3
    maze_height: int = 3
    maze_seed: int = 7
    braid: float = 0.0
    n_trajectories: int = 200
    length: int = 128
    epsilon: float = 0.2
    seed: int = 0
    train_fraction: float = 0.9


@dataclass
class RepSection:
    latent_dim: int = 32
    window: int = 8
    feature_width: int = 128
    depth: int = 2
    heads: int = 4
    proj_dim: int = 64
    channels: list = field(default_factory=lambda: [16, 32, 64])
    seq_len: int = 16
    batch_size: int = 8
    n_steps: int = 1500
    lr: float = 5e-4
    warmup: int = 100
    min_ratio: float = 0.1


@dataclass
class LossSection:
    beta: float = 1e-6
    lambda_slow: float = 0.1
    lambda_uniform: float = 0.1
    slow_mode: str = "all_pairs"
    proj_mode: str = "with_head"
    recon_reduction: str = "pixel_mean"


@dataclass
class DynamicsSection:
    backend: str = "regressor"
    context: int = 4
    width: int = 256
    blocks: int = 3
    n_steps: int = 4000
    batch_size: int = 256
    lr: float = 1e-3
    warmup: int = 200
    weight_decay: float = 1e-4
    diffusion_steps: int = 1000
    shift: float = 10.0
    noise_clip: float = 20.0
    snr_gamma: float = 20.0
    sampler_steps: int = 5
    eta: float = 0.0
    min_ratio: float = 0.1


@dataclass
class OracleSection:
    """Oracle dynamics: trained on states, so extra frame-free data is cheap."""

    context: int = 1
    width: int = 256
    blocks: int = 3
    n_steps: int = 20000
    batch_size: int = 1024
    min_ratio: float = 0.01
    extra_trajectories: int = 2000


@dataclass
class EvalSection:
    horizon: int = 63
    episodes: int = 20
    context_frames: int = 8
    probe_steps: int = 2000
    clusters: int = 20
    aggregate: str = "mean"
    strips: int = 2


@dataclass
class RunSection:
    seed: int = 0
    precision: str = "32"
    strict: bool = True
    output_dir: str = ""


SECTIONS = {
    "env": EnvSection,
    "data": DataSection,
    "repmodel": RepSection,
    "loss": LossSection,
    "dynamics": DynamicsSection,
    "oracle": OracleSection,
    "eval": EvalSection,
    "run": RunSection,
}


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    data: DataSection = field(default_factory=DataSection)
    repmodel: RepSection = field(default_factory=RepSection)
    loss: LossSection = field(default_factory=LossSection)
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_text(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            for key, value in values.items():
                lines.append(f"{name}.{key} = {json.dumps(value)}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, items: dict) -> "RunConfig":
        cfg = RunConfig(**{n: replace(getattr(self, n)) for n in SECTIONS})
        for path, value in items.items():
            _assign(cfg, path, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.env.env_config()
        except ContractViolation as exc:
            raise ConfigError(f"env: {exc}") from exc
        d = self.data
        if d.maze_width < 1 or d.maze_height < 1:
            raise ConfigError("data: maze dimensions must be >= 1")
        if d.n_trajectories < 1 or d.length < 2:
            raise ConfigError("data: need >= 1 trajectory of length >= 2")
        if not 0.0 <= d.epsilon <= 1.0:
            raise ConfigError("data.epsilon must lie in [0, 1]")
        if not 0.0 < d.train_fraction < 1.0:
            raise ConfigError("data.train_fraction must lie in (0, 1)")
        if self.loss.slow_mode not in ("all_pairs", "adjacent"):
            raise ConfigError("loss.slow_mode must be 'all_pairs' or 'adjacent'")
        if self.loss.proj_mode not in ("with_head", "without_head"):
            raise ConfigError("loss.proj_mode must be 'with_head' or 'without_head'")
        if self.loss.recon_reduction not in ("pixel_mean", "pixel_sum"):
            raise ConfigError("loss.recon_reduction must be 'pixel_mean' or 'pixel_sum'")
        for k in ("beta", "lambda_slow", "lambda_uniform"):
            if getattr(self.loss, k) < 0:
                raise ConfigError(f"loss.{k} must be >= 0")
        if self.dynamics.backend not in ("regressor", "diffusion", "oracle"):
            raise ConfigError("dynamics.backend must be regressor, diffusion or oracle")
        if not 1 <= self.dynamics.sampler_steps <= self.dynamics.diffusion_steps:
            raise ConfigError("dynamics.sampler_steps must lie in [1, diffusion_steps]")
        if self.oracle.extra_trajectories < 0:
            raise ConfigError("oracle.extra_trajectories must be >= 0")
        if self.eval.context_frames < max(self.repmodel.window, self.dynamics.context, self.oracle.context):
            raise ConfigError("eval.context_frames must cover the encoder window and dynamics context")
        if self.eval.aggregate not in ("mean", "median"):
            raise ConfigError("eval.aggregate must be 'mean' or 'median'")
        if self.run.precision not in ("32", "64"):
            raise ConfigError("run.precision must be '32' or '64'")

    # -- estimator parameters -------------------------------------------------
    def rep_params(self) -> dict:
        params = asdict(self.repmodel)
        params["channels"] = tuple(params["channels"])
        params.update(asdict(self.loss))
        params["seed"] = self.run.seed
        params["precision"] = self.run.precision
        return params

    def dyn_params(self, backend: str | None = None) -> dict:
        params = asdict(self.dynamics)
        if backend is not None:
            params["backend"] = backend
        if params["backend"] == "oracle":
            params.update(asdict(self.oracle))
            params.pop("extra_trajectories")
        params["seed"] = self.run.seed
        return params


def parse_value(raw: str, where: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where}: value {raw!r} is not a JSON literal") from exc


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"{where}: expected an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, (str, int)):
            raise ConfigError(f"{where}: expected a string")
        return str(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return value
    return value


def _assign(cfg: RunConfig, path: str, value) -> None:
    parts = path.strip().split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"unknown config key {path!r}")
    section = getattr(cfg, parts[0])
    names = {f.name for f in fields(section)}
    if parts[1] not in names:
        raise ConfigError(f"unknown config key {path!r}")
    setattr(section, parts[1], _coerce(value, getattr(section, parts[1]), path))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key.path = value'")
        key, raw = line.split("=", 1)
        overrides[key.strip()] = parse_value(raw, f"{source}:{lineno}")
    return RunConfig().with_overrides(overrides)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def parse_overrides(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw.strip()  # bare strings are allowed on the command line
    return out
