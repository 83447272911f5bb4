"""Numeric foundation: autodiff evaluation, Adam, LR schedules, RNG streams,
checkpoints and finite-difference gradient checking.

Reverse-mode differentiation is delegated to torch autograd; everything that
defines training behaviour (the Adam recurrence, the schedule, the seeding
scheme, the on-disk format) lives here so that it can be tested in isolation.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

__all__ = [
    "ContractViolation",
    "NumericFailure",
    "CheckpointFormatError",
    "set_strict",
    "dtype_for",
    "stream_key",
    "np_rng",
    "torch_generator",
    "forward_backward",
    "AdamState",
    "adam_step",
    "Adam",
    "LRSchedule",
    "schedule_rate",
    "save_arrays",
    "load_arrays",
    "GradCheck",
    "central_difference",
    "check_gradient",
]


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's precondition."""


class NumericFailure(FloatingPointError):
    def __init__(self, message: str, primitive: str | None = None):
        super().__init__(message if primitive is None else f"{message} (first non-finite output: {primitive})")
        self.primitive = primitive


class CheckpointFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# execution mode
# --------------------------------------------------------------------------

def set_strict(strict: bool = True, threads: int | None = None) -> None:
    """Bit-reproducible execution: single thread and deterministic kernels."""
    if strict:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)
        if threads:
            torch.set_num_threads(threads)


def dtype_for(precision: str | int) -> torch.dtype:
    p = str(precision)
    if p in ("32", "float32", "f32"):
        return torch.float32
    if p in ("64", "float64", "f64"):
        return torch.float64
    raise ContractViolation(f"unsupported precision {precision!r}")


# --------------------------------------------------------------------------
# named counter-based random streams
# --------------------------------------------------------------------------

def stream_key(seed: int, label: str, step: int = 0) -> int:
    """64-bit key for the stream (seed, label, step)."""
    h = hashlib.blake2b(f"{int(seed)}/{label}/{int(step)}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def np_rng(seed: int, label: str, step: int = 0) -> np.random.Generator:
    # Philox is counter-based; the key selects an independent stream.
    return np.random.Generator(np.random.Philox(key=stream_key(seed, label, step)))


def torch_generator(seed: int, label: str, step: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_key(seed, label, step) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

class _FirstNonFinite(TorchFunctionMode):
    def __init__(self):
        super().__init__()
        self.culprit: str | None = None

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if self.culprit is None and isinstance(out, torch.Tensor) and out.is_floating_point():
            if not torch.isfinite(out.detach()).all():
                self.culprit = getattr(func, "__name__", repr(func))
        return out


def locate_non_finite(fn: Callable[[], torch.Tensor]) -> str | None:
    """Re-run ``fn`` and name the first primitive that produced NaN/Inf."""
    mode = _FirstNonFinite()
    with torch.no_grad(), mode:
        fn()
    return mode.culprit


def forward_backward(
    fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]
) -> tuple[float, list[torch.Tensor]]:
    """Evaluate a scalar objective and its gradient w.r.t. ``params``.

    Gradients are returned fresh (not accumulated into ``.grad``).
    """
    value = fn()
    if not isinstance(value, torch.Tensor) or value.numel() != 1:
        raise ContractViolation("objective must be a scalar tensor")
    if not torch.isfinite(value.detach()).all():
        raise NumericFailure("non-finite objective", locate_non_finite(fn))
    grads = torch.autograd.grad(value.reshape(()), list(params), allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    return float(value.detach()), grads


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def fresh(cls, params: Sequence[torch.Tensor], **hyper) -> "AdamState":
        return cls(
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
            **hyper,
        )


@torch.no_grad()
def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState,
    lr: float,
) -> AdamState:
    """Bias-corrected Adam with optional decoupled weight decay, in place."""
    if lr <= 0:
        raise ContractViolation("learning rate must be positive")
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractViolation("params, grads and moments differ in count")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractViolation(f"shape mismatch {tuple(p.shape)} / {tuple(g.shape)} / {tuple(m.shape)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if state.weight_decay:
            p.mul_(1.0 - lr * state.weight_decay)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / c1)
    return state


class Adam:
    """Thin stateful wrapper used by the training loops."""

    def __init__(self, params: Iterable[torch.Tensor], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.state = AdamState.fresh(
            self.params, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay
        )

    def step(self, grads: Sequence[torch.Tensor], lr: float) -> None:
        adam_step(self.params, grads, self.state, lr)


# --------------------------------------------------------------------------
# learning-rate schedule
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LRSchedule:
    base: float
    warmup: int = 1000
    total: int = 10_000
    min_ratio: float = 0.1

    def __post_init__(self):
        if self.total < self.warmup:
            raise ContractViolation("total steps must be >= warmup steps")
        if self.base <= 0 or not (0 < self.min_ratio <= 1):
            raise ContractViolation("base rate must be > 0 and min_ratio in (0, 1]")

    def rate(self, step: int) -> float:
        return schedule_rate(self, step)


def schedule_rate(s: LRSchedule, step: int) -> float:
    if step < 0:
        raise ContractViolation("step must be >= 0")
    if s.warmup > 0 and step < s.warmup:
        return s.base * step / s.warmup
    if step >= s.total:
        return s.base * s.min_ratio
    span = s.total - s.warmup
    frac = (step - s.warmup) / span if span else 1.0
    return s.base * (1.0 - (1.0 - s.min_ratio) * frac)


# --------------------------------------------------------------------------
# checkpoint format
# --------------------------------------------------------------------------

MAGIC = b"GRWM"
FORMAT_VERSION = 1


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray | torch.Tensor]) -> None:
    """Write named arrays as little-endian float32 in the GRWM container."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
    for name, arr in arrays.items():
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.require(np.asarray(arr, dtype="<f4"), requirements="C")  # keeps 0-d arrays 0-d
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError(f"truncated checkpoint at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointFormatError("bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointFormatError("trailing bytes after last array")
    return out


# --------------------------------------------------------------------------
# finite-difference gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradCheck:
    name: str
    max_rel_err: float
    tol: float
    worst_index: tuple = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Elementwise central differences of a scalar function, in float64."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_gradient(
    name: str,
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[np.ndarray],
    tol: float = 1e-6,
    h: float = 1e-5,
    floor: float = 1e-4,
) -> GradCheck:
    """Compare autograd gradients of ``fn(*inputs)`` with central differences.

    Relative error is |a - n| / max(|a|, |n|, floor); the floor guards
    entries whose true derivative is ~0.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [torch.tensor(a, dtype=torch.float64, requires_grad=True) for a in arrays]
    _, analytic = forward_backward(lambda: fn(*tensors), tensors)
    worst, worst_idx = 0.0, ()
    for k, (a, g) in enumerate(zip(arrays, analytic)):
        def f(xk, k=k):
            args = [torch.tensor(arrays[j] if j != k else xk, dtype=torch.float64) for j in range(len(arrays))]
            with torch.no_grad():
                return float(fn(*args))

        numeric = central_difference(f, a, h)
        an = g.detach().numpy()
        rel = np.abs(an - numeric) / np.maximum(np.maximum(np.abs(an), np.abs(numeric)), floor)
        if rel.size and rel.max() > worst:
            worst = float(rel.max())
            worst_idx = (k,) + tuple(int(i) for i in np.unravel_index(rel.argmax(), rel.shape))
    if math.isnan(worst):
        worst = math.inf
    return GradCheck(name, worst, tol, worst_idx)
