"""Procedurally generated tabular MDP / POMDP families.

Environments are immutable numpy tables. All randomness comes from a
caller-owned ``numpy.random.Generator``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from icwm.errors import ConfigError, ContractError

FORMAT_VERSION = 1
PROB_ATOL = 1e-12


class EnvKind(str, enum.Enum):
    MDP = "MDP"
    POMDP = "POMDP"


class ContextMode(str, enum.Enum):
    UNIFORM_QUERY = "UNIFORM_QUERY"
    ROLLOUT = "ROLLOUT"


def _check_distribution_table(table: np.ndarray, name: str) -> None:
    if np.any(table < 0) or not np.all(np.isfinite(table)):
        raise ContractError(f"{name} has negative or non-finite entries")
    if np.max(np.abs(table.sum(axis=-1) - 1.0)) > PROB_ATOL:
        raise ContractError(f"{name} rows do not sum to 1")


@dataclass(frozen=True, eq=False)
class DiscreteEnv:
    transition: np.ndarray  # (S, A, S)
    observation: np.ndarray  # (S, O)
    kind: EnvKind = EnvKind.MDP
    env_id: int = 0

    def __post_init__(self):
        transition = np.array(self.transition, dtype=np.float64)
        observation = np.array(self.observation, dtype=np.float64)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise ContractError(f"transition must be (S, A, S), got {transition.shape}")
        if observation.ndim != 2 or observation.shape[0] != transition.shape[0]:
            raise ContractError(f"observation must be (S, O), got {observation.shape}")
        _check_distribution_table(transition, "transition")
        _check_distribution_table(observation, "observation")
        kind = EnvKind(self.kind)
        if kind is EnvKind.MDP:
            if observation.shape[1] != observation.shape[0] or not np.array_equal(
                observation, np.eye(observation.shape[0])
            ):
                raise ContractError("an MDP requires the identity observation table")
        transition.setflags(write=False)
        observation.setflags(write=False)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "observation", observation)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "env_id", int(self.env_id))

    @classmethod
    def mdp(cls, transition, env_id: int = 0) -> "DiscreteEnv":
        transition = np.asarray(transition, dtype=np.float64)
        return cls(transition, np.eye(transition.shape[0]), EnvKind.MDP, env_id)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def num_obs(self) -> int:
        return self.observation.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.num_states, self.num_actions, self.num_obs

    def check_query(self, s: int, a: int) -> None:
        if not (0 <= s < self.num_states and 0 <= a < self.num_actions):
            raise ContractError(f"query (s={s}, a={a}) outside dims {self.dims}")

    def marginal_table(self) -> np.ndarray:
        """p(o' | s, a) for every query, shape (S, A, O)."""
        return self.transition @ self.observation

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "kind": self.kind.value,
            "dims": list(self.dims),
            "transition": self.transition.ravel().tolist(),
            "observation": self.observation.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteEnv":
        S, A, O = d["dims"]
        return cls(
            np.asarray(d["transition"], dtype=np.float64).reshape(S, A, S),
            np.asarray(d["observation"], dtype=np.float64).reshape(S, O),
            EnvKind(d["kind"]),
            d["env_id"],
        )


@dataclass(frozen=True)
class EnvFamilyConfig:
    count: int
    dims: tuple[int, int, int]
    concentration: float = 1.0
    determinism_fraction: float = 0.0
    kind: EnvKind = EnvKind.MDP
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(x) for x in self.dims))
        object.__setattr__(self, "kind", EnvKind(self.kind))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"every dimension must be positive, got {self.dims}")
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if not self.concentration > 0:
            raise ConfigError("concentration must be > 0")
        if not 0.0 <= self.determinism_fraction <= 1.0:
            raise ConfigError("determinism_fraction must lie in [0, 1]")
        S, _, O = self.dims
        if self.kind is EnvKind.MDP and O != S:
            raise ConfigError("an MDP family needs |O| == |S|")

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "dims": list(self.dims),
            "concentration": self.concentration,
            "determinism_fraction": self.determinism_fraction,
            "kind": self.kind.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvFamilyConfig":
        return cls(
            count=d["count"],
            dims=tuple(d["dims"]),
            concentration=d.get("concentration", 1.0),
            determinism_fraction=d.get("determinism_fraction", 0.0),
            kind=EnvKind(d.get("kind", "MDP")),
            seed=d.get("seed", 0),
        )


def _sample_rows(rng, n_rows, width, concentration, determinism_fraction):
    rows = rng.dirichlet(np.full(width, concentration), size=n_rows)
    n_det = int(round(determinism_fraction * n_rows))
    if n_det:
        picked = rng.choice(n_rows, size=n_det, replace=False)
        targets = rng.integers(width, size=n_det)
        rows[picked] = 0.0
        rows[picked, targets] = 1.0
    # dirichlet draws can be off by an ulp or two
    return rows / rows.sum(axis=1, keepdims=True)


def sample_env(config: EnvFamilyConfig, rng: np.random.Generator) -> DiscreteEnv:
    S, A, O = config.dims
    env_id = int(rng.integers(0, 2**63 - 1))
    transition = _sample_rows(
        rng, S * A, S, config.concentration, config.determinism_fraction
    ).reshape(S, A, S)
    if config.kind is EnvKind.MDP:
        observation = np.eye(S)
    else:
        observation = _sample_rows(
            rng, S, O, config.concentration, config.determinism_fraction
        )
    return DiscreteEnv(transition, observation, config.kind, env_id)


def sample_env_family(config: EnvFamilyConfig) -> list[DiscreteEnv]:
    rng = np.random.default_rng(config.seed)
    return [sample_env(config, rng) for _ in range(config.count)]


def _draw(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling, one uniform per row."""
    idx = (np.asarray(u)[..., None] >= cdf_rows).sum(axis=-1)
    return np.minimum(idx, cdf_rows.shape[-1] - 1)


def step(env: DiscreteEnv, s: int, a: int, rng: np.random.Generator) -> tuple[int, int]:
    env.check_query(s, a)
    s_next = int(_draw(np.cumsum(env.transition[s, a]), rng.random()))
    if env.kind is EnvKind.MDP:
        return s_next, s_next
    o_next = int(_draw(np.cumsum(env.observation[s_next]), rng.random()))
    return s_next, o_next


def true_transition_dist(env: DiscreteEnv, s: int, a: int) -> np.ndarray:
    """Exact p(o' | s, a) = sum_s' T(s, a, s') Z(s', o')."""
    env.check_query(s, a)
    if env.kind is EnvKind.MDP:
        return env.transition[s, a].copy()
    return env.transition[s, a] @ env.observation


def belief_update(env: DiscreteEnv, belief: np.ndarray, a: int, o: int) -> np.ndarray:
    """Exact Bayes filter: b'(s') ∝ Z(s', o) sum_s b(s) T(s, a, s')."""
    predicted = belief @ env.transition[:, a, :]
    posterior = predicted * env.observation[:, o]
    total = posterior.sum()
    if total <= 0:
        raise ContractError("observation has zero probability under the belief")
    return posterior / total


@dataclass(eq=False)
class DiscreteContext:
    """Ordered (s, a, o') records.

    ``states`` are true hidden-state indices; ``beliefs`` optionally carries
    the filtered belief over S the state index was drawn against.
    """

    states: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    mode: ContextMode = ContextMode.UNIFORM_QUERY
    beliefs: np.ndarray | None = None
    next_states: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64).reshape(-1)
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        self.next_obs = np.asarray(self.next_obs, dtype=np.int64).reshape(-1)
        if not (len(self.states) == len(self.actions) == len(self.next_obs)):
            raise ContractError("record fields have different lengths")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def length(self) -> int:
        return len(self.states)

    @classmethod
    def from_records(cls, records, mode=ContextMode.UNIFORM_QUERY) -> "DiscreteContext":
        records = list(records)
        if not records:
            return cls.empty(mode)
        s, a, o = zip(*records)
        return cls(np.array(s), np.array(a), np.array(o), mode)

    @classmethod
    def empty(cls, mode=ContextMode.UNIFORM_QUERY) -> "DiscreteContext":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), mode)

    def records(self) -> list[tuple[int, int, int]]:
        return list(zip(self.states.tolist(), self.actions.tolist(), self.next_obs.tolist()))

    def concat(self, other: "DiscreteContext") -> "DiscreteContext":
        return DiscreteContext(
            np.concatenate([self.states, other.states]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.next_obs, other.next_obs]),
            self.mode,
        )

    def check_dims(self, dims: tuple[int, int, int]) -> None:
        S, A, O = dims
        for arr, hi, name in ((self.states, S, "state"), (self.actions, A, "action"), (self.next_obs, O, "observation")):
            if len(arr) and (arr.min() < 0 or arr.max() >= hi):
                raise ContractError(f"{name} index outside [0, {hi})")


def sample_context(
    env: DiscreteEnv, T: int, mode: ContextMode | str, rng: np.random.Generator
) -> DiscreteContext:
    mode = ContextMode(mode)
    if T < 0:
        raise ConfigError("context length must be >= 0")
    S, A, _ = env.dims
    if mode is ContextMode.UNIFORM_QUERY:
        s = rng.integers(S, size=T)
        a = rng.integers(A, size=T)
        s_next = _draw(np.cumsum(env.transition, axis=-1)[s, a], rng.random(T))
    else:
        s = np.zeros(T, dtype=np.int64)
        a = rng.integers(A, size=T)
        s_next = np.zeros(T, dtype=np.int64)
        cdf = np.cumsum(env.transition, axis=-1)
        u = rng.random(T)
        cur = 0
        for t in range(T):
            s[t] = cur
            cur = int(_draw(cdf[cur, a[t]], u[t]))
            s_next[t] = cur
    if env.kind is EnvKind.MDP:
        o_next = s_next.copy()
    else:
        o_next = _draw(np.cumsum(env.observation, axis=-1)[s_next], rng.random(T))
    return DiscreteContext(s, a, o_next, mode, next_states=s_next)


def sample_counts(env: DiscreteEnv, T: int, rng: np.random.Generator) -> np.ndarray:
    """n(s, a, o') of a UNIFORM_QUERY context of length T, drawn directly.

    Same law as accumulating ``sample_context(env, T, UNIFORM_QUERY)``, but
    via multinomials so long contexts cost O(|S||A|) draws.
    """
    S, A, O = env.dims
    n_sa = rng.multinomial(T, np.full(S * A, 1.0 / (S * A)))
    table = env.marginal_table().reshape(S * A, O)
    return rng.multinomial(n_sa, table).reshape(S, A, O)


def frequency_threshold(num_states: int, num_actions: int, delta: float) -> float:
    """T above which min n(s,a) > T/(2|S||A|) holds w.p. >= 1 - delta/2."""
    SA = num_states * num_actions
    return 4.0 * SA**2 * np.log(4.0 * SA / delta)


def family_to_json(config: EnvFamilyConfig, envs: list[DiscreteEnv]) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "envs": [e.to_dict() for e in envs],
    }
    return json.dumps(doc, indent=1)


def family_from_json(text: str) -> tuple[EnvFamilyConfig, list[DiscreteEnv]]:
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported format_version {doc.get('format_version')}")
    return EnvFamilyConfig.from_dict(doc["config"]), [DiscreteEnv.from_dict(d) for d in doc["envs"]]


def save_family(path, config: EnvFamilyConfig, envs: list[DiscreteEnv]) -> None:
    Path(path).write_text(family_to_json(config, envs))


def load_family(path) -> tuple[EnvFamilyConfig, list[DiscreteEnv]]:
    return family_from_json(Path(path).read_text())
