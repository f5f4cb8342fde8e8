"""Randomized cart-pole physics, a scripted controller, and dataset builders.

Dynamics are the classical frictionless cart-pole (force +-10 N,
dt = 0.02 s, Euler update of position from the pre-step velocity).
Trajectories never terminate: a fallen pole keeps swinging so the world
model sees failure dynamics too.
"""

from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from icwm.errors import ConfigError, ContractError

FORCE_MAG = 10.0
DT = 0.02
FORMAT_VERSION = 1
_MAGIC = b"ICWMCP1\n"

# [x, x_dot, theta, theta_dot]; balances the original pole from small tilts
POLICY_WEIGHTS = np.array([0.1, 0.5, 10.0, 2.0])


class Scope(str, enum.Enum):
    SCOPE1 = "SCOPE1"
    SCOPE1PLUS2_EXCL1 = "SCOPE1PLUS2_EXCL1"
    SCOPE1PLUS2 = "SCOPE1PLUS2"
    ORIGINAL = "ORIGINAL"


# (g, m_c, m_p, l) ranges
SCOPE1_RANGES = np.array([[8.0, 12.0], [0.8, 1.2], [0.08, 0.12], [0.4, 0.6]])
SCOPE12_RANGES = np.array([[2.0, 16.0], [0.5, 2.0], [0.05, 0.20], [0.20, 1.0]])


@dataclass(frozen=True)
class CartPoleParams:
    g: float = 9.8
    m_c: float = 1.0
    m_p: float = 0.1
    l: float = 0.5

    def __post_init__(self):
        if not all(np.isfinite(v) and v > 0 for v in self.as_array()):
            raise ContractError(f"cart-pole parameters must be positive: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.g, self.m_c, self.m_p, self.l])

    @classmethod
    def from_array(cls, arr) -> "CartPoleParams":
        return cls(*(float(v) for v in arr))


ORIGINAL = CartPoleParams()


def in_scope1(p: CartPoleParams) -> bool:
    v = p.as_array()
    return bool(np.all((v >= SCOPE1_RANGES[:, 0]) & (v <= SCOPE1_RANGES[:, 1])))


def sample_params(scope: Scope | str, rng: np.random.Generator) -> CartPoleParams:
    scope = Scope(scope)
    if scope is Scope.ORIGINAL:
        return ORIGINAL
    ranges = SCOPE1_RANGES if scope is Scope.SCOPE1 else SCOPE12_RANGES
    while True:
        p = CartPoleParams.from_array(rng.uniform(ranges[:, 0], ranges[:, 1]))
        if scope is not Scope.SCOPE1PLUS2_EXCL1 or not in_scope1(p):
            return p


def step_dynamics(params, state, action):
    """One Euler step. Works on a single state or batched arrays.

    ``params`` is a CartPoleParams or an (..., 4) array of (g, m_c, m_p, l);
    ``state`` is (..., 4); ``action`` is 0/1 (or an array), or a float force
    via :func:`step_force`.
    """
    force = np.where(np.asarray(action) == 1, FORCE_MAG, -FORCE_MAG)
    return step_force(params, state, force)


def step_force(params, state, force):
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise ContractError("non-finite cart-pole state")
    p = params.as_array() if isinstance(params, CartPoleParams) else np.asarray(params, dtype=np.float64)
    g, m_c, m_p, l = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    x, x_dot, theta, theta_dot = state[..., 0], state[..., 1], state[..., 2], state[..., 3]
    total = m_c + m_p
    cos, sin = np.cos(theta), np.sin(theta)
    temp = (force + m_p * l * theta_dot**2 * sin) / total
    theta_acc = (g * sin - cos * temp) / (l * (4.0 / 3.0 - m_p * cos**2 / total))
    x_acc = temp - m_p * l * theta_acc * cos / total
    return np.stack(
        [x + DT * x_dot, x_dot + DT * x_acc, theta + DT * theta_dot, theta_dot + DT * theta_acc],
        axis=-1,
    )


def scripted_policy(state) -> np.ndarray | int:
    """Linear controller: push right (1) when w . state >= 0."""
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise ContractError("non-finite cart-pole state")
    act = (state @ POLICY_WEIGHTS >= 0).astype(np.int64)
    return int(act) if act.ndim == 0 else act


@dataclass(eq=False)
class Trajectory:
    params: CartPoleParams
    observations: np.ndarray  # (L+1, 4)
    actions: np.ndarray  # (L,)
    noise_level: float

    def __post_init__(self):
        if len(self.actions) != len(self.observations) - 1:
            raise ContractError("need len(actions) == len(observations) - 1")

    @property
    def length(self) -> int:
        return len(self.actions)


def _draw_randomness(rng: np.random.Generator, length: int):
    init = rng.uniform(-0.05, 0.05, size=4)
    explore = rng.random(length)
    random_actions = rng.integers(2, size=length)
    return init, explore, random_actions


def _rollout(params: np.ndarray, init: np.ndarray, noise: np.ndarray, explore: np.ndarray, random_actions: np.ndarray):
    """Vectorized over trajectories: params (N,4), init (N,4), explore (N,L)."""
    n, length = explore.shape
    obs = np.empty((n, length + 1, 4))
    actions = np.empty((n, length), dtype=np.int64)
    obs[:, 0] = init
    state = init
    for t in range(length):
        a = np.where(explore[:, t] < noise, random_actions[:, t], scripted_policy(state))
        actions[:, t] = a
        state = step_dynamics(params, state, a)
        obs[:, t + 1] = state
    return obs, actions


def collect_trajectory(
    params: CartPoleParams,
    noise_level: float,
    length: int,
    rng: np.random.Generator,
    initial_state=None,
) -> Trajectory:
    """Run the scripted controller with per-step random-action probability ``noise_level``."""
    if not 0.0 <= noise_level <= 1.0:
        raise ConfigError("noise_level must lie in [0, 1]")
    init, explore, random_actions = _draw_randomness(rng, length)
    if initial_state is not None:
        init = np.asarray(initial_state, dtype=np.float64)
    obs, actions = _rollout(
        params.as_array()[None], init[None], np.array([noise_level]), explore[None], random_actions[None]
    )
    return Trajectory(params, obs[0], actions[0], float(noise_level))


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    n_envs: int
    scope: Scope
    traj_per_env: int
    length: int = 200
    noise_range: tuple[float, float] = (0.3, 0.7)

    def __post_init__(self):
        object.__setattr__(self, "scope", Scope(self.scope))
        object.__setattr__(self, "noise_range", tuple(float(v) for v in self.noise_range))
        if self.n_envs < 1 or self.traj_per_env < 1 or self.length < 1:
            raise ConfigError(f"dataset {self.name!r} needs positive env, trajectory and length counts")
        lo, hi = self.noise_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError("noise_range must be a sub-interval of [0, 1]")

    @property
    def total_steps(self) -> int:
        return self.n_envs * self.traj_per_env * self.length

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_envs": self.n_envs,
            "scope": self.scope.value,
            "traj_per_env": self.traj_per_env,
            "length": self.length,
            "noise_range": list(self.noise_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(
            d["name"], d["n_envs"], Scope(d["scope"]), d["traj_per_env"],
            d.get("length", 200), tuple(d.get("noise_range", (0.3, 0.7))),
        )


@dataclass(eq=False)
class Dataset:
    spec: DatasetSpec
    seed: int
    params: np.ndarray  # (N, 4) float64
    env_index: np.ndarray  # (N,) int64
    noise: np.ndarray  # (N,) float64
    observations: np.ndarray  # (N, L+1, 4) float32
    actions: np.ndarray  # (N, L) uint8

    def __len__(self) -> int:
        return len(self.params)

    @property
    def total_steps(self) -> int:
        return int(self.actions.size)

    def env_params(self) -> np.ndarray:
        """Distinct environment parameter tuples in env-index order."""
        _, first = np.unique(self.env_index, return_index=True)
        return self.params[first]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            CartPoleParams.from_array(self.params[i]),
            self.observations[i].astype(np.float64),
            self.actions[i].astype(np.int64),
            float(self.noise[i]),
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return Dataset(self.spec, self.seed, self.params[idx], self.env_index[idx], self.noise[idx],
                       self.observations[idx], self.actions[idx])

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "counts": {"trajectories": len(self), "length": self.spec.length, "steps": self.total_steps},
        }


def build_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    """Environment parameters and trajectories; every trajectory has its own
    stream derived from (seed, env index, trajectory index)."""
    env_params = np.stack(
        [sample_params(spec.scope, np.random.default_rng([seed, 0, e])).as_array() for e in range(spec.n_envs)]
    )
    return collect_for_envs(spec, env_params, seed)


def collect_for_envs(spec: DatasetSpec, env_params: np.ndarray, seed: int) -> Dataset:
    """Trajectories for given (n_envs, 4) parameter tuples, e.g. fresh
    held-out trajectories of a training set's environments."""
    env_params = np.asarray(env_params, dtype=np.float64).reshape(-1, 4)
    if len(env_params) != spec.n_envs:
        raise ConfigError(f"spec names {spec.n_envs} environments, got {len(env_params)} parameter tuples")
    n = spec.n_envs * spec.traj_per_env
    env_index = np.repeat(np.arange(spec.n_envs), spec.traj_per_env)
    noise = np.empty(n)
    init = np.empty((n, 4))
    explore = np.empty((n, spec.length))
    random_actions = np.empty((n, spec.length), dtype=np.int64)
    lo, hi = spec.noise_range
    for i in range(n):
        e, j = divmod(i, spec.traj_per_env)
        rng = np.random.default_rng([seed, 1, e, j])
        noise[i] = rng.uniform(lo, hi)
        init[i], explore[i], random_actions[i] = _draw_randomness(rng, spec.length)
    params = env_params[env_index]
    obs, actions = _rollout(params, init, noise, explore, random_actions)
    return Dataset(spec, seed, params, env_index, noise, obs.astype(np.float32), actions.astype(np.uint8))


def save_dataset(path, ds: Dataset) -> None:
    header = json.dumps(ds.header(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for i in range(len(ds)):
            f.write(ds.params[i].astype("<f8").tobytes())
            f.write(struct.pack("<qd", int(ds.env_index[i]), float(ds.noise[i])))
            f.write(ds.observations[i].astype("<f4").tobytes())
            f.write(ds.actions[i].astype(np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ConfigError(f"{path} is not a cart-pole dataset container")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off : off + hlen])
    off += hlen
    if header["format_version"] != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset format_version {header['format_version']}")
    spec = DatasetSpec.from_dict(header["spec"])
    n, L = header["counts"]["trajectories"], header["counts"]["length"]
    rec = np.dtype([("params", "<f8", 4), ("env", "<i8"), ("noise", "<f8"),
                    ("obs", "<f4", (L + 1, 4)), ("act", "u1", L)])
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=off)
    return Dataset(spec, header["seed"], arr["params"].copy(), arr["env"].copy(), arr["noise"].copy(),
                   arr["obs"].copy(), arr["act"].copy())


def dataset_to_json(ds: Dataset) -> str:
    doc = ds.header()
    doc["trajectories"] = [
        {
            "params": ds.params[i].tolist(),
            "env_index": int(ds.env_index[i]),
            "noise_level": float(ds.noise[i]),
            "observations": ds.observations[i].astype(np.float64).ravel().tolist(),
            "actions": ds.actions[i].tolist(),
        }
        for i in range(len(ds))
    ]
    return json.dumps(doc)


def dataset_from_json(text: str) -> Dataset:
    doc = json.loads(text)
    spec = DatasetSpec.from_dict(doc["spec"])
    trajs = doc["trajectories"]
    L = spec.length
    return Dataset(
        spec,
        doc["seed"],
        np.array([t["params"] for t in trajs], dtype=np.float64).reshape(-1, 4),
        np.array([t["env_index"] for t in trajs], dtype=np.int64),
        np.array([t["noise_level"] for t in trajs], dtype=np.float64),
        np.array([t["observations"] for t in trajs], dtype=np.float32).reshape(-1, L + 1, 4),
        np.array([t["actions"] for t in trajs], dtype=np.uint8).reshape(-1, L),
    )
