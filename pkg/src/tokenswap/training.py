"""Flow-matching objective and a resumable, deterministic training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .dit import ToyDiT, image_to_tokens
from .errors import DivergenceError
from .sprites import NULL_ID, generate_sprite_dataset, stack_samples

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetConfig:
    count: int = 4096
    seed: int = 0


@dataclass(frozen=True)
class OptimizerConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 2e-3
    warmup: int = 100
    final_lr_fraction: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    dropout_prob: float = 0.1
    seed: int = 0

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to ``final_lr_fraction``."""
        if self.warmup and step < self.warmup:
            return self.learning_rate * (step + 1) / self.warmup
        span = max(1, self.steps - self.warmup)
        progress = min(1.0, (step - self.warmup) / span)
        floor = self.final_lr_fraction
        return self.learning_rate * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress)))


def _as_batch(batch, dtype):
    if isinstance(batch, (list, tuple)) and batch and hasattr(batch[0], "image"):
        images, prompts, _ = stack_samples(batch)
        return image_to_tokens(images).to(dtype), torch.as_tensor(prompts)
    tokens, prompts = batch
    return torch.as_tensor(tokens, dtype=dtype), torch.as_tensor(prompts, dtype=torch.long)


def draw_flow_inputs(data: torch.Tensor, noise_seed: int, dropout_prob: float = 0.1):
    """``(t, noise, drop)`` for one batch from a generator keyed by ``noise_seed``."""
    gen = torch.Generator().manual_seed(int(noise_seed))
    B = data.shape[0]
    t = torch.rand(B, generator=gen, dtype=data.dtype)
    noise = torch.randn(data.shape, generator=gen, dtype=data.dtype)
    drop = torch.rand(B, generator=gen) < dropout_prob
    return t, noise, drop


def flow_matching_loss(params: ToyDiT, batch, noise_seed: int, dropout_prob: float = 0.1) -> torch.Tensor:
    """Mean squared velocity error on the linear path ``x_t = (1-t) data + t noise``.

    ``batch`` is a list of :class:`SpriteSample` or a ``(tokens, prompts)`` pair.
    Prompts are replaced by the null token with probability ``dropout_prob``.
    """
    dtype = next(params.parameters()).dtype
    data, prompts = _as_batch(batch, dtype)
    t, noise, drop = draw_flow_inputs(data, noise_seed, dropout_prob)
    prompts = torch.where(drop[:, None], torch.full_like(prompts, NULL_ID), prompts)
    tt = t[:, None, None, None]
    x_t = (1 - tt) * data + tt * noise
    pred = params(x_t, t, prompts)
    return ((pred - (noise - data)) ** 2).mean()


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""

    step: int = 0
    optimizer: dict | None = None
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def make_optimizer(params: ToyDiT, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        params.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.99), weight_decay=cfg.weight_decay, foreach=False
    )


def dataset_tokens(cfg: DatasetConfig, dtype=torch.float32):
    images, prompts, _ = stack_samples(generate_sprite_dataset(cfg.count, cfg.seed))
    return image_to_tokens(images).to(dtype), torch.as_tensor(prompts)


def batch_plan(cfg: OptimizerConfig, step: int, n_data: int) -> tuple[np.ndarray, int]:
    """Sample indices and noise seed for ``step``; independent of every other step."""
    rng = np.random.default_rng([cfg.seed, step])
    idx = rng.integers(0, n_data, size=cfg.batch_size)
    return idx, int(rng.integers(0, 2**62))


def train(
    params: ToyDiT,
    dataset: DatasetConfig | tuple = DatasetConfig(),
    optim: OptimizerConfig = OptimizerConfig(),
    state: TrainState | None = None,
    log_every: int = 100,
    until: int | None = None,
) -> tuple[ToyDiT, TrainState]:
    """Train ``params`` in place up to ``optim.steps`` and return ``(params, state)``.

    ``until`` stops early (the schedule still spans ``optim.steps``). Passing
    the returned ``state`` back with the same configs resumes the run.
    """
    if isinstance(dataset, DatasetConfig):
        tokens, prompts = dataset_tokens(dataset, next(params.parameters()).dtype)
    else:
        tokens, prompts = dataset
    state = state or TrainState()
    opt = make_optimizer(params, optim)
    if state.optimizer is not None:
        restored = opt.state_dict()
        restored["state"] = state.optimizer["state"]
        opt.load_state_dict(restored)
    params.train()
    started = time.perf_counter()
    stop = optim.steps if until is None else min(until, optim.steps)
    for step in range(state.step, stop):
        idx, noise_seed = batch_plan(optim, step, tokens.shape[0])
        idx = torch.from_numpy(idx)
        for group in opt.param_groups:
            group["lr"] = optim.lr_at(step)
        loss = flow_matching_loss(params, (tokens[idx], prompts[idx]), noise_seed, optim.dropout_prob)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite training loss {value}", step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if optim.grad_clip:
            torch.nn.utils.clip_grad_norm_(params.parameters(), optim.grad_clip)
        opt.step()
        state.losses.append(value)
        state.step = step + 1
        if log_every and state.step % log_every == 0:
            log.info("step %d loss %.4f (smoothed %.4f)", state.step, value, smoothed(state.losses)[-1])
    params.eval()
    state.seconds += time.perf_counter() - started
    state.optimizer = opt.state_dict()
    return params, state


def smoothed(losses, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    if x.size == 0:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)
