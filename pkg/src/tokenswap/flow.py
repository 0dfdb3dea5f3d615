"""Rectified-flow Euler sampling, inversion and a closed-form mixture oracle.

Time convention: ``x_t = (1 - t) * data + t * noise`` so ``t = 1`` is pure
noise and the velocity target is ``noise - data``. Sampling integrates
``t: 1 -> 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .errors import DimensionError, DivergenceError, ParameterError


class VelocityModel(Protocol):
    def velocity(self, x: torch.Tensor, t: float, prompt=None, extra_refs=None) -> torch.Tensor: ...


# hook(step, t, t_next, x) -> replacement grid or None
StepHook = Callable[[int, float, float, torch.Tensor], "torch.Tensor | None"]
# refs(step, t) -> extra attention segments for this step or None
SegmentProvider = Callable[[int, float], "Sequence | None"]


@dataclass(frozen=True)
class FlowSchedule:
    steps: int = 50
    guidance: float = 3.5

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ParameterError(f"steps must be an integer >= 1, got {self.steps}")
        if not self.guidance >= 0:
            raise ParameterError(f"guidance must be >= 0, got {self.guidance}")

    @property
    def timesteps(self) -> tuple[float, ...]:
        """Step times ``t_k = 1 - (k-1)/S`` for ``k = 1..S``."""
        return self.grid[:-1]

    @property
    def grid(self) -> tuple[float, ...]:
        """Step times plus the endpoint 0."""
        S = self.steps
        return tuple(1.0 - k / S for k in range(S + 1))


@dataclass(frozen=True)
class Trajectory:
    times: tuple[float, ...]
    states: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise DimensionError(f"{len(self.times)} times for {len(self.states)} states")

    def __len__(self):
        return len(self.states)

    @property
    def endpoint(self) -> torch.Tensor:
        return self.states[-1]

    def map(self, fn) -> "Trajectory":
        return Trajectory(self.times, tuple(fn(s) for s in self.states))


def cfg_velocity(v_cond, v_uncond, guidance: float) -> torch.Tensor:
    if v_cond.shape != v_uncond.shape:
        raise DimensionError(f"v_cond {tuple(v_cond.shape)} != v_uncond {tuple(v_uncond.shape)}")
    # exact at the endpoints; the blend would round
    if guidance == 1.0:
        return v_cond
    if guidance == 0.0:
        return v_uncond
    return v_uncond + guidance * (v_cond - v_uncond)


def guided_velocity(model: VelocityModel, x, t, prompt, guidance: float, extra_refs=None) -> torch.Tensor:
    v_cond = model.velocity(x, t, prompt, extra_refs)
    if guidance == 1.0 or prompt is None:
        return v_cond
    v_uncond = model.velocity(x, t, None, extra_refs)
    return cfg_velocity(v_cond, v_uncond, guidance)


def _check_finite(x: torch.Tensor, step: int) -> None:
    if not torch.isfinite(x).all():
        raise DivergenceError("non-finite sampler state", step=step)


@torch.no_grad()
def sample(
    model: VelocityModel,
    z_init,
    prompt=None,
    schedule: FlowSchedule = FlowSchedule(),
    hook: StepHook | None = None,
    extra_refs: SegmentProvider | None = None,
) -> Trajectory:
    """Euler-integrate from ``z_init`` at ``t = 1`` down to ``t = 0``.

    After every update the ``hook`` sees ``(step, t_k, t_{k+1}, x_{t_{k+1}})``
    and may return a replacement grid; the trajectory stores post-hook states.
    ``extra_refs(step, t_k)`` supplies additional attention segments.
    """
    x = torch.as_tensor(z_init)
    times = schedule.grid
    states = [x]
    for k in range(schedule.steps):
        t, t_next = times[k], times[k + 1]
        refs = extra_refs(k, t) if extra_refs is not None else None
        v = guided_velocity(model, x, t, prompt, schedule.guidance, refs)
        x = x - (t - t_next) * v
        if hook is not None:
            out = hook(k, t, t_next, x)
            if out is not None:
                x = out
        _check_finite(x, k)
        states.append(x)
    return Trajectory(times, tuple(states))


@torch.no_grad()
def invert(model: VelocityModel, clean, prompt=None, schedule: FlowSchedule = FlowSchedule()) -> Trajectory:
    """Integrate the same field forward in time ``t: 0 -> 1`` without guidance.

    ``times`` are the schedule grid reversed, so ``states[j]`` pairs with the
    sampler's state ``S - j``.
    """
    x = torch.as_tensor(clean)
    times = tuple(reversed(schedule.grid))
    states = [x]
    for k in range(schedule.steps):
        t, t_next = times[k], times[k + 1]
        x = x + (t_next - t) * model.velocity(x, t, prompt, None)
        _check_finite(x, k)
        states.append(x)
    return Trajectory(times, tuple(states))


@dataclass(frozen=True)
class GaussianMixtureOracle:
    """Data distribution ``sum_c w_c N(mean_c, var_c I)`` over token grids."""

    weights: torch.Tensor
    means: torch.Tensor  # (C, *grid_shape)
    variances: torch.Tensor  # (C,)

    def __post_init__(self):
        w = torch.as_tensor(self.weights, dtype=torch.float64)
        v = torch.as_tensor(self.variances, dtype=torch.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "means", torch.as_tensor(self.means, dtype=torch.float64))
        if (w < 0).any() or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ParameterError("mixture weights must be nonnegative and sum to 1")
        if (v <= 0).any():
            raise ParameterError("mixture variances must be positive")
        if self.means.shape[0] != w.shape[0] or v.shape[0] != w.shape[0]:
            raise DimensionError("weights, means and variances disagree on component count")

    @classmethod
    def single(cls, mean, variance: float) -> "GaussianMixtureOracle":
        mean = torch.as_tensor(mean, dtype=torch.float64)
        return cls(torch.ones(1), mean[None], torch.tensor([float(variance)]))

    def velocity(self, x, t, prompt=None, extra_refs=None) -> torch.Tensor:
        return oracle_velocity(self, x, t)

    def sample_data(self, n: int, generator: torch.Generator) -> torch.Tensor:
        comp = torch.multinomial(self.weights, n, replacement=True, generator=generator)
        eps = torch.randn((n, *self.means.shape[1:]), generator=generator, dtype=torch.float64)
        sd = self.variances.sqrt()[comp].view(n, *([1] * (self.means.ndim - 1)))
        return self.means[comp] + sd * eps

    def transport(self, z_init) -> torch.Tensor:
        """Exact flow map ``t = 1 -> 0`` for a single component: ``mean + sigma * z``."""
        if self.weights.numel() != 1:
            raise ParameterError("closed-form transport exists only for one component")
        return self.means[0] + self.variances[0].sqrt() * torch.as_tensor(z_init, dtype=torch.float64)

    def noise_at(self, clean, t: float, z) -> torch.Tensor:
        """Single-component flow state at time ``t`` of the trajectory through ``z``."""
        s = math.sqrt(((1 - t) ** 2) * float(self.variances[0]) + t * t)
        return (1 - t) * self.means[0] + s * torch.as_tensor(z, dtype=torch.float64)


def oracle_velocity(oracle: GaussianMixtureOracle, x, t: float) -> torch.Tensor:
    """Exact marginal velocity ``E[noise - data | x_t = x]`` of the mixture.

    Each component contributes ``((t - (1-t) var) / s^2) (x - (1-t) mean) - mean``
    with ``s^2 = (1-t)^2 var + t^2``, weighted by its posterior responsibility.
    """
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"t must lie in [0, 1], got {t}")
    x = torch.as_tensor(x)
    out_dtype = x.dtype
    x = x.to(torch.float64)
    event = oracle.means.shape[1:]
    if tuple(x.shape[x.ndim - len(event):]) != tuple(event):
        raise DimensionError(f"x shape {tuple(x.shape)} does not end with the mixture event shape {tuple(event)}")
    lead = x.shape[: x.ndim - len(event)]
    xf = x.reshape(-1, 1, int(np.prod(event)))  # (N, 1, D)
    mu = oracle.means.reshape(1, -1, xf.shape[-1])  # (1, C, D)
    var = oracle.variances.view(1, -1, 1)
    s2 = ((1 - t) ** 2) * var + t * t
    resid = xf - (1 - t) * mu
    D = xf.shape[-1]
    logp = (
        torch.log(oracle.weights.clamp_min(1e-300)).view(1, -1)
        - 0.5 * (resid**2).sum(-1) / s2[..., 0]
        - 0.5 * D * torch.log(2 * math.pi * s2[..., 0])
    )
    resp = torch.softmax(logp, dim=-1)[..., None]  # (N, C, 1)
    v_comp = (t - (1 - t) * var) / s2 * resid - mu
    v = (resp * v_comp).sum(1)
    return v.reshape(*lead, *event).to(out_dtype)
