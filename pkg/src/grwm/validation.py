"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
import torch

from .numcore import ContractViolation


def check_frames(X, min_len: int | None = None, frame_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Frames as an (N, T, H, W, 3) array, uint8 or float in [0, 1].

    A single sequence (T, H, W, 3) is promoted to N=1.
    """
    X = np.asarray(X)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or X.shape[-1] != 3:
        raise ContractViolation(f"expected frames shaped (N, T, H, W, 3), got {X.shape}")
    if X.dtype != np.uint8:
        if not np.issubdtype(X.dtype, np.floating):
            raise ContractViolation(f"frames must be uint8 or float, got {X.dtype}")
        if not np.isfinite(X).all():
            raise ContractViolation("frames contain NaN or Inf")
    if min_len is not None and X.shape[1] < min_len:
        raise ContractViolation(f"sequences of length {X.shape[1]} shorter than required {min_len}")
    if frame_hw is not None and tuple(X.shape[2:4]) != tuple(frame_hw):
        raise ContractViolation(f"frame size {X.shape[2:4]} differs from fitted {tuple(frame_hw)}")
    return X


def frames_to_tensor(X: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(..., H, W, 3) frames -> (..., 3, H, W) tensor in [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(X))
    t = t.to(dtype) / 255.0 if X.dtype == np.uint8 else t.to(dtype)
    return t.movedim(-1, -3)


def frames_to_float(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    return X.astype(np.float64) / 255.0 if X.dtype == np.uint8 else X.astype(np.float64)


def check_latents(Z, dim: int | None = None) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim < 2:
        raise ContractViolation(f"latents need at least 2 dims, got shape {Z.shape}")
    if dim is not None and Z.shape[-1] != dim:
        raise ContractViolation(f"latent dim {Z.shape[-1]} != {dim}")
    if not np.isfinite(Z).all():
        raise ContractViolation("latents contain NaN or Inf")
    return Z


def check_actions(A, n_actions: int = 3) -> np.ndarray:
    A = np.asarray(A)
    if not np.issubdtype(A.dtype, np.integer):
        raise ContractViolation("actions must be integers")
    if A.size and (A.min() < 0 or A.max() >= n_actions):
        raise ContractViolation(f"actions must lie in [0, {n_actions})")
    return A.astype(np.int64)
