"""k-step autoregressive evaluation and memory-state export (recurrent path only)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from icwm.cartpole import Dataset
from icwm.errors import ContractError
from icwm.seqmodel.model import GsaState, GsaWorldModel

log = logging.getLogger(__name__)


@dataclass
class ErrorTable:
    """Per-trajectory standardized MSE, shape (n_traj, len(T_grid), len(k_list))."""

    T_grid: tuple[int, ...]
    k_list: tuple[int, ...]
    errors: np.ndarray
    env_index: np.ndarray

    def mean(self) -> np.ndarray:
        return self.errors.mean(axis=0)

    def per_env(self) -> np.ndarray:
        """(n_envs, len(T_grid), len(k_list)) mean over each environment's trajectories."""
        envs = np.unique(self.env_index)
        return np.stack([self.errors[self.env_index == e].mean(axis=0) for e in envs])

    def median_over_envs(self) -> np.ndarray:
        return np.median(self.per_env(), axis=0)

    def at(self, T: int, k: int = 1, reduce: str = "mean") -> float:
        i, j = self.T_grid.index(T), self.k_list.index(k)
        if reduce == "median_env":
            return float(self.median_over_envs()[i, j])
        return float(self.mean()[i, j])


def _branch(model, state, h, target, actions, t, k_list, errors, i):
    """k-step predictions after the model has consumed position t."""
    k_max = max(k_list)
    for step in range(1, k_max + 1):
        s_hat = model.decode_latent(h)[0]
        if step in k_list:
            errors[:, i, k_list.index(step)] = ((model.decode_obs(s_hat) - target[:, t + step]) ** 2).mean(dim=-1)
        if step < k_max:
            h, state = model.forward_recurrent(state, s_hat, actions[:, t + step])


@torch.no_grad()
def rollout_errors(model: GsaWorldModel, obs: torch.Tensor, actions: torch.Tensor, T_grid, k_list, substitute=None):
    """Errors of k-step predictions after the first T ground-truth steps.

    Position t consumes (o_t, a_t). With context length T the model has read
    o_0..o_{T-1}; the k-step prediction targets o_{T+k-1}, feeding predicted
    latents back for the intermediate steps with the recorded actions.
    ``substitute`` maps position -> replacement latent (B, D) for that input.
    Returns (B, len(T_grid), len(k_list)) standardized squared errors.
    """
    B = obs.shape[0]
    target = model.normalize(obs)
    s_all, _ = model.encode_obs(target)
    errors = torch.zeros(B, len(T_grid), len(k_list), dtype=obs.dtype)
    stops = {T: i for i, T in enumerate(T_grid)}
    state = model.initial_state(B)
    for t in range(max(T_grid)):
        s_t = s_all[:, t] if substitute is None or t not in substitute else substitute[t]
        h, state = model.forward_recurrent(state, s_t, actions[:, t])
        if t + 1 in stops:
            _branch(model, state, h, target, actions, t, k_list, errors, stops[t + 1])
    return errors


@torch.no_grad()
def window_errors(model: GsaWorldModel, obs: torch.Tensor, actions: torch.Tensor, T_grid, k_list, anchor: int):
    """Errors at a fixed target position with contexts of different lengths.

    For each T the memory starts empty and reads o_{anchor-T}..o_{anchor-1};
    the k-step prediction targets o_{anchor+k-1}. Every T therefore predicts
    the same transitions and differs only in how much history it saw.
    """
    B = obs.shape[0]
    target = model.normalize(obs)
    s_all, _ = model.encode_obs(target)
    errors = torch.zeros(B, len(T_grid), len(k_list), dtype=obs.dtype)
    for i, T in enumerate(T_grid):
        state = model.initial_state(B)
        for t in range(anchor - T, anchor):
            h, state = model.forward_recurrent(state, s_all[:, t], actions[:, t])
        _branch(model, state, h, target, actions, anchor - 1, k_list, errors, i)
    return errors


def default_anchors(length: int, T_max: int, k_max: int, count: int = 4) -> tuple[int, ...]:
    lo, hi = T_max, length - k_max + 1
    if hi < lo:
        return ()
    return tuple(sorted(set(np.linspace(lo, hi, count).round().astype(int).tolist())))


def evaluate_icl(
    model: GsaWorldModel,
    dataset: Dataset,
    T_grid=(1, 10, 100),
    k_list=(1,),
    batch: int = 256,
    anchors=None,
) -> ErrorTable:
    """Mean standardized squared error per (T, k) for every trajectory.

    Errors are averaged over the anchor positions (see :func:`window_errors`).
    Context lengths that do not fit before the first anchor are skipped.
    """
    T_grid = tuple(int(t) for t in T_grid)
    k_list = tuple(int(k) for k in k_list)
    L = dataset.actions.shape[1]
    k_max = max(k_list)
    usable = tuple(T for T in T_grid if 1 <= T <= L - k_max + 1)
    if anchors is None:
        anchors = default_anchors(L, max(usable, default=1), k_max)
    anchors = tuple(int(a) for a in anchors)
    usable = tuple(T for T in usable if anchors and T <= min(anchors))
    if any(a + k_max - 1 > L for a in anchors):
        raise ContractError("anchor leaves no room for the k-step targets")
    for T in sorted(set(T_grid) - set(usable)):
        log.warning("skipping context length T=%d: trajectories too short or T < 1", T)
    if not usable:
        return ErrorTable((), k_list, np.zeros((len(dataset), 0, len(k_list))), dataset.env_index.copy())
    model.eval()
    dtype = model.dec.weight.dtype
    obs = torch.as_tensor(dataset.observations).to(dtype)
    actions = torch.as_tensor(dataset.actions.astype(np.int64))
    chunks = []
    for i in range(0, len(dataset), batch):
        o, a = obs[i : i + batch], actions[i : i + batch]
        per_anchor = [window_errors(model, o, a, usable, k_list, anc) for anc in anchors]
        chunks.append(torch.stack(per_anchor).mean(dim=0))
    errors = torch.cat(chunks).double().numpy()
    return ErrorTable(usable, k_list, errors, dataset.env_index.copy())


@torch.no_grad()
def export_memory_states(model: GsaWorldModel, dataset: Dataset, layers=None, batch: int = 256) -> dict:
    """Flattened slot memories after every step.

    Returns {"layers": [...], "states": {layer: (n_traj, L, width) float32},
    "env_index": (n_traj,), "traj_index": (n_traj,)}.
    """
    layers = list(range(model.cfg.L)) if layers is None else list(layers)
    dtype = model.dec.weight.dtype
    obs = torch.as_tensor(dataset.observations).to(dtype)
    actions = torch.as_tensor(dataset.actions.astype(np.int64))
    n, L = actions.shape
    out = {layer: [] for layer in layers}
    for i in range(0, n, batch):
        o, a = obs[i : i + batch], actions[i : i + batch]
        s, _ = model.encode_obs(model.normalize(o))
        state = model.initial_state(len(o))
        per_step = {layer: [] for layer in layers}
        for t in range(L):
            _, state = model.forward_recurrent(state, s[:, t], a[:, t])
            for layer in layers:
                per_step[layer].append(state.flat(layer))
        for layer in layers:
            out[layer].append(torch.stack(per_step[layer], dim=1))
    return {
        "layers": layers,
        "states": {layer: torch.cat(v).float().numpy() for layer, v in out.items()},
        "env_index": dataset.env_index.copy(),
        "traj_index": np.arange(n),
    }


def state_size(model: GsaWorldModel) -> int:
    return GsaState.initial(model.cfg, 1).numel()
