"""Evaluation: frame-wise rollout error, latent probing, clustering geometry."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.cluster import KMeans
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from . import numcore
from .numcore import ContractViolation
from .validation import frames_to_float

STATE_NAMES = ("x", "y", "sin_theta", "cos_theta")


@dataclass
class MetricCurve:
    values: np.ndarray  # (horizon,)
    episodes: int
    mode: str = "mean"
    per_episode: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return len(self.values)

    def window_mean(self, start: int, stop: int) -> float:
        """Mean of MSE(t) for 1-based t in [start, stop]."""
        return float(np.mean(self.values[start - 1 : stop]))

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "episodes": self.episodes, "mode": self.mode, "mse": [float(v) for v in self.values]}


def framewise_mse(pred, true, mode: str = "mean") -> MetricCurve:
    """Per-timestep, per-pixel mean squared error.

    Accepts (T, H, W, C) for one episode or (E, T, H, W, C) for several;
    uint8 frames are rescaled to [0, 1].
    """
    pred, true = frames_to_float(pred), frames_to_float(true)
    if pred.shape != true.shape:
        raise ContractViolation(f"prediction {pred.shape} and truth {true.shape} differ")
    if pred.ndim == 4:
        pred, true = pred[None], true[None]
    per_ep = ((pred - true) ** 2).reshape(pred.shape[0], pred.shape[1], -1).mean(-1)
    if mode == "mean":
        agg = per_ep.mean(0)
    elif mode == "median":
        agg = np.median(per_ep, 0)
    else:
        raise ContractViolation(f"unknown aggregation {mode!r}")
    return MetricCurve(agg, per_ep.shape[0], mode, per_ep)


# --------------------------------------------------------------------------
# probing
# --------------------------------------------------------------------------

class StateProbe(RegressorMixin, BaseEstimator):
    """Small MLP regressor from frozen latents to oracle states.

    Inputs are standardised with training-split statistics; the recipe
    (width, depth, steps) is fixed so probes are comparable across models.
    """

    def __init__(self, hidden=128, n_layers=2, n_steps=2000, lr=1e-3, batch_size=256, seed=0):
        self.hidden = hidden
        self.n_layers = n_layers
        self.n_steps = n_steps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        y = y.reshape(len(y), -1)
        self.mean_ = X.mean(0)
        self.scale_ = X.std(0) + 1e-8
        torch.manual_seed(numcore.stream_key(self.seed, "probe-init") & 0x7FFF_FFFF_FFFF_FFFF)
        layers, width = [], X.shape[1]
        for _ in range(self.n_layers):
            layers += [nn.Linear(width, self.hidden), nn.ReLU()]
            width = self.hidden
        layers.append(nn.Linear(width, y.shape[1]))
        self.net_ = nn.Sequential(*layers)
        Xt = torch.as_tensor((X - self.mean_) / self.scale_, dtype=torch.float32)
        yt = torch.as_tensor(y, dtype=torch.float32)
        params = list(self.net_.parameters())
        opt = numcore.Adam(params)
        rng = numcore.np_rng(self.seed, "probe-batches")
        bs = min(self.batch_size, len(X))
        for step in range(self.n_steps):
            idx = torch.as_tensor(rng.integers(0, len(X), size=bs))
            _, grads = numcore.forward_backward(lambda: ((self.net_(Xt[idx]) - yt[idx]) ** 2).mean(), params)
            opt.step(grads, self.lr)
        self.n_features_in_ = X.shape[1]
        return self

    @torch.no_grad()
    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        Xt = torch.as_tensor((X - self.mean_) / self.scale_, dtype=torch.float32)
        return self.net_(Xt).numpy().astype(np.float64)


@dataclass
class ProbeReport:
    mse: float
    per_component: dict
    n_train: int
    n_val: int

    def to_dict(self) -> dict:
        return asdict(self)


def probe(latents, states, split, seed: int = 0, **probe_params) -> ProbeReport:
    """Fit a StateProbe on the training trajectories, score held-out ones.

    ``latents`` (N, T, d) and ``states`` (N, T, 4) are indexed by trajectory;
    ``split`` is (train indices, validation indices).
    """
    latents, states = np.asarray(latents), np.asarray(states)
    train_idx, val_idx = (np.asarray(s, dtype=int) for s in split)
    if len(train_idx) == 0 or len(val_idx) == 0 or np.intersect1d(train_idx, val_idx).size:
        raise ContractViolation("probe needs non-empty, disjoint train and validation trajectories")
    d, s = latents.shape[-1], states.shape[-1]
    Xtr, ytr = latents[train_idx].reshape(-1, d), states[train_idx].reshape(-1, s)
    Xva, yva = latents[val_idx].reshape(-1, d), states[val_idx].reshape(-1, s)
    model = StateProbe(seed=seed, **probe_params).fit(Xtr, ytr)
    err = (model.predict(Xva) - yva) ** 2
    names = STATE_NAMES if s == len(STATE_NAMES) else tuple(f"s{i}" for i in range(s))
    return ProbeReport(float(err.mean()), {n: float(v) for n, v in zip(names, err.mean(0))}, len(Xtr), len(Xva))


# --------------------------------------------------------------------------
# clustering
# --------------------------------------------------------------------------

@dataclass
class ClusterReport:
    k: int
    assignments: np.ndarray
    dispersion: float
    counts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"k": self.k, "dispersion": self.dispersion, "counts": list(map(int, self.counts))}


def kmeans(latents, k: int, seed: int = 0, max_iter: int = 300) -> np.ndarray:
    """Lloyd iterations from a k-means++ start drawn from the named stream."""
    X = check_array(latents, dtype=np.float64)
    if len(X) < k:
        raise ContractViolation(f"k-means needs at least k={k} points, got {len(X)}")
    km = KMeans(
        n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter,
        random_state=numcore.stream_key(seed, "kmeans") % (2**32), algorithm="lloyd",
    )
    return km.fit_predict(X)


def spatial_dispersion(assignments, positions) -> float:
    """Size-weighted within-cluster positional variance over global variance.

    0 means every cluster sits on a single point; ~1 means cluster labels
    carry no spatial information.
    """
    a = np.asarray(assignments)
    xy = np.asarray(positions, dtype=np.float64)[:, :2]
    if len(a) != len(xy):
        raise ContractViolation("one position per assignment required")
    total = ((xy - xy.mean(0)) ** 2).sum(1).mean()
    if total == 0:
        return 0.0
    within = 0.0
    for c in np.unique(a):
        pts = xy[a == c]
        if len(pts) == 0:
            continue
        within += ((pts - pts.mean(0)) ** 2).sum()
    return float(within / len(xy) / total)


def cluster_report(latents, positions, k: int = 20, seed: int = 0) -> ClusterReport:
    a = kmeans(latents, k, seed)
    return ClusterReport(k, a, spatial_dispersion(a, positions), np.bincount(a, minlength=k).tolist())


def diagnostics(model, frames, seed: int = 0, n_batches: int = 4) -> dict:
    """Monitored slowness/uniformity of a frozen representation model."""
    r = model.loss_report(frames, seed=seed, n_batches=n_batches)
    return {"L_recon": r.recon, "L_slow": r.slow, "L_uniform": r.uniform, "L_KL": r.kl}
