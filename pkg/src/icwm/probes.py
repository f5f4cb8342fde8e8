"""Analysis probes on trained cart-pole world models.

Predictive coding: replace the true observation at a probe position by the
model's own prediction and measure how much later predictions degrade.
Silhouette: how well per-environment memory states cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats
from sklearn.metrics import silhouette_score

from icwm.cartpole import Dataset
from icwm.errors import ConfigError, InsufficientDataError
from icwm.seqmodel.evaluate import export_memory_states, rollout_errors
from icwm.seqmodel.model import GsaWorldModel


@dataclass
class SubstitutionResult:
    positions: tuple[int, ...]
    k_list: tuple[int, ...]
    frame_error: np.ndarray  # (n_traj, n_pos) error of the substituted prediction
    delta: np.ndarray  # (n_traj, n_pos, n_k) error increase downstream
    env_index: np.ndarray


@dataclass
class CorrelationReport:
    rho: float
    ci_low: float
    ci_high: float
    n: int
    per_k: dict[int, float]


@torch.no_grad()
def substitution_deltas(
    model: GsaWorldModel, obs: torch.Tensor, actions: torch.Tensor, position: int, k_list, horizon: int = 1, noise: float = 0.0,
    generator: torch.Generator | None = None,
):
    """Error change after replacing the observation at ``position``.

    The replacement is the model's decoded prediction of that observation
    from the preceding context, plus optional isotropic Gaussian ``noise`` in
    standardized units (for controlled-noise checks). It is re-encoded and
    fed in place of the true frame. Downstream errors are the k-step errors
    with context length ``position + horizon``. Returns (frame_error (B,) of
    the fed frame, delta (B, len(k_list)), replacement latent (B, D)).
    """
    if position < 1:
        raise ConfigError("probe position must be >= 1 (a prediction needs context)")
    target = model.normalize(obs)
    s_all, _ = model.encode_obs(target)
    state = model.initial_state(obs.shape[0])
    for t in range(position):
        h, state = model.forward_recurrent(state, s_all[:, t], actions[:, t])
    o_fed = model.decode_obs(model.decode_latent(h)[0])
    if noise:
        o_fed = o_fed + noise * torch.randn(o_fed.shape, generator=generator, dtype=o_fed.dtype)
    frame_error = ((o_fed - target[:, position]) ** 2).mean(dim=-1)
    replacement = model.encode_obs(o_fed)[0]
    T = (position + horizon,)
    clean = rollout_errors(model, obs, actions, T, k_list)[:, 0]
    subst = rollout_errors(model, obs, actions, T, k_list, substitute={position: replacement})[:, 0]
    return frame_error, subst - clean, replacement


def predictive_coding_probe(
    model: GsaWorldModel, dataset: Dataset, positions=(10, 50, 100), k_list=(1, 8), horizon: int = 1, batch: int = 256
) -> SubstitutionResult:
    positions = tuple(int(p) for p in positions)
    k_list = tuple(int(k) for k in k_list)
    L = dataset.actions.shape[1]
    for p in positions:
        if p + horizon + max(k_list) - 1 > L:
            raise ConfigError(f"probe position {p} leaves no room for {max(k_list)}-step targets")
    model.eval()
    dtype = model.dec.weight.dtype
    obs = torch.as_tensor(dataset.observations).to(dtype)
    actions = torch.as_tensor(dataset.actions.astype(np.int64))
    n = len(dataset)
    frame = np.zeros((n, len(positions)))
    delta = np.zeros((n, len(positions), len(k_list)))
    for i in range(0, n, batch):
        sl = slice(i, i + batch)
        for j, p in enumerate(positions):
            fe, d, _ = substitution_deltas(model, obs[sl], actions[sl], p, k_list, horizon)
            frame[sl, j] = fe.double().numpy()
            delta[sl, j] = d.double().numpy()
    return SubstitutionResult(positions, k_list, frame, delta, dataset.env_index.copy())


def rank_correlation(result: SubstitutionResult, n_boot: int = 1000, seed: int = 0, confidence: float = 0.95) -> CorrelationReport:
    """Spearman rho between substituted-frame error and the k-averaged error delta,
    with a percentile bootstrap interval over (trajectory, position) pairs."""
    x = result.frame_error.ravel()
    y = result.delta.mean(axis=-1).ravel()
    if len(x) < 3:
        raise InsufficientDataError("need at least 3 probe points")
    rho = float(stats.spearmanr(x, y).statistic)
    boot = stats.bootstrap(
        (x, y),
        lambda a, b: stats.spearmanr(a, b).statistic,
        paired=True,
        vectorized=False,
        n_resamples=n_boot,
        confidence_level=confidence,
        method="percentile",
        random_state=np.random.default_rng(seed),
    )
    per_k = {
        k: float(stats.spearmanr(x, result.delta[..., j].ravel()).statistic) for j, k in enumerate(result.k_list)
    }
    ci = boot.confidence_interval
    return CorrelationReport(rho, float(ci.low), float(ci.high), len(x), per_k)


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient, Euclidean metric; singleton classes score 0."""
    points = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    labels = np.asarray(labels)
    n_classes = len(np.unique(labels))
    if n_classes < 2:
        raise InsufficientDataError("silhouette needs at least two classes")
    if n_classes >= len(points):
        return 0.0
    return float(silhouette_score(points, labels, metric="euclidean"))


def silhouette_probe(model: GsaWorldModel, dataset: Dataset, layers=None, steps=None):
    """Per-layer silhouette of memory states grouped by environment.

    ``steps`` picks the time indices whose memories are pooled as points
    (default: the final step). Returns (scores {layer: float}, dump).
    """
    if len(np.unique(dataset.env_index)) < 2:
        raise InsufficientDataError("silhouette probe needs trajectories from >= 2 environments")
    dump = export_memory_states(model, dataset, layers)
    L = dataset.actions.shape[1]
    steps = (L - 1,) if steps is None else tuple(int(s) for s in steps)
    scores = {}
    for layer in dump["layers"]:
        pts = dump["states"][layer][:, steps].reshape(-1, dump["states"][layer].shape[-1])
        labels = np.repeat(dump["env_index"], len(steps))
        scores[layer] = silhouette(pts, labels)
    return scores, dump
