"""Gated slot-attention (GSA) world model for low-dimensional observations.

Each attention head keeps ``mem_len`` key/value slots. At every step a
sigmoid forget gate ``alpha`` (one per slot) decays the slots and writes the
new key/value with weight ``1 - alpha``; the output is a softmax readout over
slots scored against the query:

    K_t = diag(alpha_t) K_{t-1} + (1 - alpha_t) k_t^T
    V_t = diag(alpha_t) V_{t-1} + (1 - alpha_t) v_t^T
    m_t = alpha_t * m_{t-1} + (1 - alpha_t)
    o_t = (V_t / m_t)^T softmax((K_t / m_t) q_t)

Dividing each slot by its accumulated write mass m_t makes a slot an
exponential moving average from its first write on, so a fresh memory is
read at full scale (``normalize_slots=False`` reads K_t, V_t directly).

Training runs the exact chunkwise form of this recurrence; inference runs
it step by step with constant memory.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from icwm.errors import ConfigError, ContractError

SIGMA_FLOOR = 1e-4
# largest total log-decay a chunkwise block may span before exp(-G) overflows
_SPAN_LIMIT = {torch.float32: 60.0, torch.float64: 600.0}


@dataclass(frozen=True)
class GsaConfig:
    D: int = 64
    L: int = 2
    heads: int = 4
    mem_len: int = 32
    chunk: int = 64
    obs_dim: int = 4
    n_actions: int = 2
    gate_floor: float = 3.0  # per-step forget gates satisfy log(alpha) >= -gate_floor
    learn_sigma_hat: bool = True
    sigma_hat_fixed: float = 1.0
    normalize_slots: bool = True
    ffn_mult: int = 1  # feed-forward hidden width is ffn_mult * D

    def __post_init__(self):
        for name in ("D", "L", "heads", "mem_len", "chunk", "obs_dim", "n_actions", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.gate_floor > 0:
            raise ConfigError("gate_floor must be positive")
        if self.D % self.heads:
            raise ConfigError("D must be divisible by heads")

    @property
    def head_dim(self) -> int:
        return self.D // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GsaConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


PAPER_CARTPOLE = GsaConfig(D=128, L=4, heads=4, mem_len=64)


@dataclass
class GsaState:
    """Per-layer slot memories: keys and values, each (B, heads, mem_len,
    head_dim), and the accumulated write mass per slot (B, heads, mem_len)."""

    keys: list[torch.Tensor]
    values: list[torch.Tensor]
    mass: list[torch.Tensor]

    @classmethod
    def initial(cls, cfg: GsaConfig, batch: int, dtype=torch.float32) -> "GsaState":
        shape = (batch, cfg.heads, cfg.mem_len, cfg.head_dim)
        return cls(
            [torch.zeros(shape, dtype=dtype) for _ in range(cfg.L)],
            [torch.zeros(shape, dtype=dtype) for _ in range(cfg.L)],
            [torch.zeros(shape[:3], dtype=dtype) for _ in range(cfg.L)],
        )

    def layer(self, i: int):
        return self.keys[i], self.values[i], self.mass[i]

    def flat(self, layer: int) -> torch.Tensor:
        """(B, heads * mem_len * (2 * head_dim + 1)) memory vector of one layer."""
        b = self.keys[layer].shape[0]
        return torch.cat(
            [self.keys[layer].reshape(b, -1), self.values[layer].reshape(b, -1), self.mass[layer].reshape(b, -1)], dim=1
        )

    def numel(self) -> int:
        return sum(k.numel() + v.numel() + m.numel() for k, v, m in zip(self.keys, self.values, self.mass))

    def detach(self) -> "GsaState":
        return GsaState([k.detach() for k in self.keys], [v.detach() for v in self.values], [m.detach() for m in self.mass])


def _kl_normal(mu1, sigma1, mu2, sigma2):
    """Elementwise KL(N(mu1, sigma1^2) || N(mu2, sigma2^2))."""
    return torch.log(sigma2 / sigma1) + (sigma1**2 + (mu1 - mu2) ** 2) / (2 * sigma2**2) - 0.5


class GsaLayer(nn.Module):
    def __init__(self, cfg: GsaConfig):
        super().__init__()
        D, H, M = cfg.D, cfg.heads, cfg.mem_len
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(D)
        self.q_proj = nn.Linear(D, D, bias=False)
        self.k_proj = nn.Linear(D, D, bias=False)
        self.v_proj = nn.Linear(D, D, bias=False)
        self.gate_proj = nn.Linear(D, H * M)
        self.out_proj = nn.Linear(D, D)
        self.norm2 = nn.LayerNorm(D)
        self.ff_in = nn.Linear(D, cfg.ffn_mult * D)
        self.ff_out = nn.Linear(cfg.ffn_mult * D, D)
        with torch.no_grad():
            # slot time constants spread geometrically from 2 to 512 steps
            tau = torch.logspace(math.log10(2.0), math.log10(512.0), M)
            self.gate_proj.weight.mul_(0.1)
            self.gate_proj.bias.copy_(torch.log(tau - 1.0).repeat(H))

    def _project(self, x):
        B, T, _ = x.shape
        H, M, dh = self.cfg.heads, self.cfg.mem_len, self.cfg.head_dim
        u = self.norm1(x)
        q = self.q_proj(u).view(B, T, H, dh) / math.sqrt(dh)
        k = self.k_proj(u).view(B, T, H, dh)
        v = self.v_proj(u).view(B, T, H, dh)
        # the upper cap keeps every write's mass positive (time constants <= 1e6 steps)
        log_alpha = F.logsigmoid(self.gate_proj(u)).clamp(min=-self.cfg.gate_floor, max=-1e-6).view(B, T, H, M)
        return q, k, v, log_alpha

    def _finish(self, x, attn):
        B, T = attn.shape[:2]
        x = x + self.out_proj(attn.reshape(B, T, -1))
        return x + self.ff_out(F.silu(self.ff_in(self.norm2(x))))

    def forward_chunkwise(self, x, mem, chunk: int):
        """mem = (keys, values, mass). Returns (y, (keys, values, mass))."""
        q, k, v, log_alpha = self._project(x)
        T = x.shape[1]
        block = max(1, min(chunk, int(_SPAN_LIMIT[x.dtype] / self.cfg.gate_floor)))
        outs = []
        for c0 in range(0, T, block):
            c1 = min(c0 + block, T)
            out, mem = self._chunk(q[:, c0:c1], k[:, c0:c1], v[:, c0:c1], log_alpha[:, c0:c1], mem)
            outs.append(out)
        attn = torch.cat(outs, dim=1)
        return self._finish(x, attn), mem

    def _chunk(self, q, k, v, log_alpha, mem):
        keys, values, mass = mem
        # heads first: (B, H, C, .)
        q, k, v, log_alpha = (t.transpose(1, 2) for t in (q, k, v, log_alpha))
        C = q.shape[2]
        G = torch.cumsum(log_alpha, dim=2)  # (B, H, C, M), nonincreasing in C
        carry = torch.exp(G)
        # exp(G_t) * exp(-G_i) = decay from write i to step t; the gate floor
        # keeps exp(-G_i) finite within a block
        write = torch.exp(-G) * -torch.expm1(log_alpha)  # (B, H, C, M)
        # slot mass at step t is carry_t * (mass + cumsum(write)_t); carry cancels in the ratio
        inner = mass[:, :, None, :] + torch.cumsum(write, dim=2)
        scale = 1.0 / inner if self.cfg.normalize_slots else carry
        causal = torch.ones(C, C, dtype=torch.bool, device=q.device).tril()
        qk = (q @ k.transpose(-1, -2)).masked_fill(~causal, 0.0)  # (B, H, t, i)
        scores = scale * (q @ keys.transpose(-1, -2) + qk @ write)
        p = torch.softmax(scores, dim=-1) * scale
        mix = (p @ write.transpose(-1, -2)).masked_fill(~causal, 0.0)  # (B, H, t, i)
        out = p @ values + mix @ v
        end = carry[:, :, -1, :]  # (B, H, M)
        keys = end[..., None] * (keys + write.transpose(-1, -2) @ k)
        values = end[..., None] * (values + write.transpose(-1, -2) @ v)
        mass = end * inner[:, :, -1, :]
        return out.transpose(1, 2), (keys, values, mass)

    def forward_step(self, x_t, mem):
        """x_t: (B, D). Returns (y_t, (keys, values, mass))."""
        keys, values, mass = mem
        q, k, v, log_alpha = self._project(x_t[:, None])
        q, k, v, log_alpha = q[:, 0], k[:, 0], v[:, 0], log_alpha[:, 0]
        alpha = torch.exp(log_alpha)  # (B, H, M)
        write = -torch.expm1(log_alpha)
        keys = alpha[..., None] * keys + write[..., None] * k[:, :, None, :]
        values = alpha[..., None] * values + write[..., None] * v[:, :, None, :]
        mass = alpha * mass + write
        scale = 1.0 / mass if self.cfg.normalize_slots else torch.ones_like(mass)
        p = torch.softmax(scale * torch.einsum("bhmd,bhd->bhm", keys, q), dim=-1)
        attn = torch.einsum("bhm,bhmd->bhd", p * scale, values)
        return self._finish(x_t[:, None], attn[:, None])[:, 0], (keys, values, mass)


class GsaWorldModel(nn.Module):
    """Encoders, GSA temporal core, latent decoder and observation decoder."""

    def __init__(self, cfg: GsaConfig | None = None):
        super().__init__()
        cfg = cfg or GsaConfig()
        self.cfg = cfg
        D = cfg.D
        self.enc_mean = nn.Linear(cfg.obs_dim, D)
        self.enc_scale = nn.Linear(cfg.obs_dim, D)
        self.act_embed = nn.Embedding(cfg.n_actions, D)
        self.act_mlp = nn.Linear(D, D)
        self.layers = nn.ModuleList([GsaLayer(cfg) for _ in range(cfg.L)])
        self.lat_norm = nn.LayerNorm(D)
        self.lat_fc1 = nn.Linear(D, D)
        self.lat_fc2 = nn.Linear(D, D)
        self.lat_scale = nn.Linear(D, D)
        self.dec = nn.Linear(D, cfg.obs_dim)
        self.register_buffer("obs_mean", torch.zeros(cfg.obs_dim))
        self.register_buffer("obs_std", torch.ones(cfg.obs_dim))
        with torch.no_grad():
            self.act_embed.weight.mul_(0.1)

    # -- components -------------------------------------------------------

    def set_normalizer(self, mean, std) -> None:
        with torch.no_grad():
            self.obs_mean.copy_(torch.as_tensor(mean, dtype=self.obs_mean.dtype))
            self.obs_std.copy_(torch.as_tensor(std, dtype=self.obs_std.dtype))

    def normalize(self, o):
        return (o - self.obs_mean) / self.obs_std

    def encode_obs(self, o):
        if o.shape[-1] != self.cfg.obs_dim:
            raise ContractError(f"observation width {o.shape[-1]} != {self.cfg.obs_dim}")
        return self.enc_mean(o), F.softplus(self.enc_scale(o)) + SIGMA_FLOOR

    def decode_obs(self, s_hat):
        if s_hat.shape[-1] != self.cfg.D:
            raise ContractError(f"latent width {s_hat.shape[-1]} != {self.cfg.D}")
        return self.dec(s_hat)

    def encode_action(self, a):
        a = torch.as_tensor(a, dtype=torch.long)
        if a.numel() and (a.min() < 0 or a.max() >= self.cfg.n_actions):
            raise ContractError(f"action outside [0, {self.cfg.n_actions})")
        return F.silu(self.act_mlp(self.act_embed(a)))

    def decode_latent(self, h):
        u = h + self.lat_fc2(F.silu(self.lat_fc1(self.lat_norm(h))))
        if self.cfg.learn_sigma_hat:
            sigma = F.softplus(self.lat_scale(u)) + SIGMA_FLOOR
        else:
            sigma = torch.full_like(u, self.cfg.sigma_hat_fixed)
        return u, sigma

    def initial_state(self, batch: int) -> GsaState:
        return GsaState.initial(self.cfg, batch, dtype=self.dec.weight.dtype)

    # -- temporal core ----------------------------------------------------

    def _core_chunkwise(self, x, state: GsaState, chunk: int):
        mems = []
        for i, layer in enumerate(self.layers):
            x, mem = layer.forward_chunkwise(x, state.layer(i), chunk)
            mems.append(mem)
        return x, GsaState(*map(list, zip(*mems)))

    def forward_chunkwise(self, s, a, mask=None, state: GsaState | None = None, chunk: int | None = None):
        """Parallel-in-chunks pass over latents s (B, T, D) and actions a (B, T).

        Masked positions (bool (B, T)) take the model's own previous-step
        prediction instead of s_t. Returns (h (B, T, D), final state).
        """
        if not torch.all(torch.isfinite(s)):
            raise ContractError("non-finite latent input")
        B, T, _ = s.shape
        chunk = chunk or self.cfg.chunk
        state = state or self.initial_state(B)
        if T == 0:
            return s.new_zeros(B, 0, self.cfg.D), state
        act = self.encode_action(a)
        if mask is not None and bool(mask.any()):
            with torch.no_grad():
                h0, _ = self._core_chunkwise(s + act, state, chunk)
                s_prev = self.decode_latent(h0)[0]
            fed = torch.cat([s[:, :1], s_prev[:, :-1]], dim=1)
            mask = mask.clone()
            mask[:, 0] = False
            s = torch.where(mask[..., None], fed, s)
        return self._core_chunkwise(s + act, state, chunk)

    def forward_recurrent(self, state: GsaState, s_t, a_t):
        """Single step: s_t (B, D), a_t (B,). Returns (h_t, next state)."""
        if len(state.keys) != self.cfg.L or state.keys[0].shape[1:] != (self.cfg.heads, self.cfg.mem_len, self.cfg.head_dim):
            raise ContractError("memory state shape does not match the model config")
        x = s_t + self.encode_action(a_t)
        mems = []
        for i, layer in enumerate(self.layers):
            x, mem = layer.forward_step(x, state.layer(i))
            mems.append(mem)
        return x, GsaState(*map(list, zip(*mems)))

    # -- full sequence ----------------------------------------------------

    def forward(self, obs, actions, mask=None, chunk: int | None = None):
        """obs (B, T+1, obs_dim) raw, actions (B, T).

        ``o_hat[:, t]`` predicts ``obs[:, t + 1]`` (normalized units).
        """
        o = self.normalize(obs)
        s, sigma = self.encode_obs(o)
        h, state = self.forward_chunkwise(s[:, :-1], actions, mask=mask, chunk=chunk)
        s_hat, sigma_hat = self.decode_latent(h)
        return {
            "target": o,
            "s": s,
            "sigma": sigma,
            "h": h,
            "s_hat": s_hat,
            "sigma_hat": sigma_hat,
            "o_hat": self.decode_obs(s_hat),
            "o_rec": self.decode_obs(s),
            "state": state,
        }


@dataclass(frozen=True)
class LossConfig:
    lambda_kl: float = 1e-3
    transition_weight: float = 0.01
    recon_weight: float = 1.0

    def __post_init__(self):
        if min(self.lambda_kl, self.transition_weight, self.recon_weight) < 0:
            raise ConfigError("loss weights must be nonnegative")


def world_model_loss(out: dict, cfg: LossConfig = LossConfig()):
    """Total loss and its terms.

    prediction: mean squared error of decoded next-step predictions;
    reconstruction: mean squared error of decode(encode(o));
    prior_kl: KL(N(s, sigma) || N(0, 1)) summed over latent dims;
    transition_kl: KL(N(s_{t+1}, sigma_{t+1}) || N(s_hat_t, sigma_hat_t)).
    """
    if torch.any(out["sigma"] <= 0) or torch.any(out["sigma_hat"] <= 0):
        raise ContractError("latent scales must be positive")
    target = out["target"]
    pred = ((out["o_hat"] - target[:, 1:]) ** 2).mean()
    recon = ((out["o_rec"] - target) ** 2).mean()
    s, sigma = out["s"], out["sigma"]
    prior = _kl_normal(s, sigma, torch.zeros_like(s), torch.ones_like(sigma)).sum(-1).mean()
    trans = _kl_normal(s[:, 1:], sigma[:, 1:], out["s_hat"], out["sigma_hat"]).sum(-1).mean()
    total = pred + cfg.recon_weight * recon + cfg.lambda_kl * prior + cfg.transition_weight * trans
    terms = {"prediction": pred, "reconstruction": recon, "prior_kl": prior, "transition_kl": trans}
    return total, terms
