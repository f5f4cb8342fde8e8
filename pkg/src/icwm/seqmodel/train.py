"""AdamW training with cosine learning-rate decay and overshooting masks."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from icwm.cartpole import Dataset
from icwm.errors import ConfigError, NumericalError
from icwm.seqmodel.model import GsaConfig, GsaWorldModel, LossConfig, world_model_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_final: float = 2.04e-4
    batch: int = 32
    epochs: int = 20
    mask_prob: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    # train on windows starting at a random offset so an empty memory at any
    # state is in-distribution; windows are at least min_window steps long
    random_start: bool = True
    min_window: int = 16
    # fraction of batches trained on min_window-step windows only, so short
    # contexts get a useful share of the loss
    short_window_prob: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr < 0 or self.lr_final < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.batch < 1 or self.epochs < 0:
            raise ConfigError("batch must be positive and epochs nonnegative")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ConfigError("mask_prob must lie in [0, 1)")
        if self.min_window < 1:
            raise ConfigError("min_window must be positive")
        if not 0.0 <= self.short_window_prob <= 1.0:
            raise ConfigError("short_window_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        return cls(loss=loss, **{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainResult:
    model: GsaWorldModel
    epoch_loss: list[float]
    epoch_terms: list[dict]
    steps: int
    checkpoints: dict[int, dict] = field(default_factory=dict)


def cosine_lr(step: int, total: int, lr: float, lr_final: float) -> float:
    if total <= 1:
        return lr
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * step / (total - 1)))


def normalizer_from(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    flat = ds.observations.reshape(-1, ds.observations.shape[-1]).astype(np.float64)
    std = flat.std(axis=0)
    return flat.mean(axis=0), np.where(std > 0, std, 1.0)


def new_model(cfg: GsaConfig, ds: Dataset | None, seed: int, dtype=torch.float32) -> GsaWorldModel:
    torch.manual_seed(seed)
    model = GsaWorldModel(cfg).to(dtype)
    if ds is not None:
        model.set_normalizer(*normalizer_from(ds))
    return model


def train(
    model: GsaWorldModel,
    dataset: Dataset,
    cfg: TrainConfig,
    snapshot_epochs: tuple[int, ...] = (),
    progress=None,
) -> TrainResult:
    """Train in place. Deterministic under ``cfg.seed``.

    ``snapshot_epochs`` lists epochs (1-based) after which a copy of the
    parameters is kept, e.g. for early-checkpoint evaluations.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    dtype = model.dec.weight.dtype
    obs = torch.as_tensor(dataset.observations).to(dtype)
    actions = torch.as_tensor(dataset.actions.astype(np.int64))
    n, L = actions.shape
    per_epoch = math.ceil(n / cfg.batch)
    total = per_epoch * cfg.epochs
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.train()
    epoch_loss, epoch_terms, snaps = [], [], {}
    step = 0
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        sums, terms_sum = 0.0, {}
        for b in range(per_epoch):
            idx = order[b * cfg.batch : (b + 1) * cfg.batch]
            start, stop = 0, L
            if cfg.random_start and L > cfg.min_window:
                start = int(torch.randint(0, L - cfg.min_window + 1, (1,), generator=gen))
            if cfg.short_window_prob > 0 and float(torch.rand(1, generator=gen)) < cfg.short_window_prob:
                stop = min(L, start + cfg.min_window)
            mask = None
            if cfg.mask_prob > 0:
                mask = torch.rand(len(idx), stop - start, generator=gen) < cfg.mask_prob
            for group in opt.param_groups:
                group["lr"] = cosine_lr(step, total, cfg.lr, cfg.lr_final)
            out = model(obs[idx, start : stop + 1], actions[idx, start:stop], mask=mask)
            loss, terms = world_model_loss(out, cfg.loss)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            w = len(idx) / n
            sums += loss.item() * w
            for k, v in terms.items():
                terms_sum[k] = terms_sum.get(k, 0.0) + float(v.detach()) * w
        epoch_loss.append(sums)
        epoch_terms.append(terms_sum)
        log.info("epoch %d/%d loss %.6g", epoch + 1, cfg.epochs, sums)
        if progress:
            progress(epoch + 1, sums)
        if epoch + 1 in snapshot_epochs:
            snaps[epoch + 1] = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.eval()
    return TrainResult(model, epoch_loss, epoch_terms, step, snaps)


def gradients(model: GsaWorldModel, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every named parameter.

    Parameters outside the loss graph get an exact zero gradient.
    """
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        name: torch.zeros_like(p) if g is None else g
        for (name, p), g in zip(params.items(), grads)
    }
