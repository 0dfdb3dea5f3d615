"""Training-free personalization by timestep-adaptive token replacement.

Early steps (``t_k > tau``) overwrite the denoising tokens inside each target
mask with the time-matched inverted reference tokens; later steps drop the
replacement and append the reference tokens, pinned to position ``(0, 0)``, as
extra attention segments. The same machinery covers layout control,
multi-subject composition and masked editing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from ._validation import as_mask, check_image
from .dit import image_to_tokens, tokens_to_image
from .errors import DimensionError, DisjointnessError, ParameterError
from .flow import FlowSchedule, Trajectory, VelocityModel, invert, sample
from .grid import (
    check_disjoint,
    dilate,
    erode,
    mask_from_sprite,
    replace_tokens,
    translate_mask,
    translate_tokens,
    window_permutation,
)
from .rope import PositionAssignment
from .sprites import BACKGROUNDS, estimate_background

MODES = ("personalize", "inpaint", "outpaint")
MORPHOLOGY = ("none", "dilate", "erode")
EDIT_TAU = 0.1
DEFAULT_TAU = 0.8


@dataclass(frozen=True)
class ReferenceBundle:
    """Inverted reference: trajectory ``t: 0 -> 1``, subject mask, prompt and clean tokens."""

    trajectory: Trajectory
    mask: torch.Tensor
    prompt: torch.Tensor | None
    tokens: torch.Tensor

    def __post_init__(self):
        if not bool(self.mask.any()):
            raise ParameterError("reference mask is empty")
        if tuple(self.mask.shape) != tuple(self.tokens.shape[-3:-1]):
            raise DimensionError(f"mask {tuple(self.mask.shape)} does not fit tokens {tuple(self.tokens.shape)}")

    @property
    def steps(self) -> int:
        return len(self.trajectory) - 1

    def check_schedule(self, schedule: FlowSchedule) -> None:
        expected = tuple(reversed(schedule.grid))
        times = self.trajectory.times
        if len(times) != len(expected) or max(abs(a - b) for a, b in zip(times, expected)) > 1e-9:
            raise DimensionError(
                f"reference trajectory has {len(times) - 1} steps; schedule expects {schedule.steps}"
            )

    def state_for(self, sampler_index: int) -> torch.Tensor:
        """Reference tokens at the time of the sampler's state ``sampler_index``."""
        return self.trajectory.states[self.steps - sampler_index]


@dataclass(frozen=True)
class Perturbation:
    shuffle: bool = False
    window: int = 3
    morphology: str = "none"
    kernel: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.morphology not in MORPHOLOGY:
            raise ParameterError(f"morphology must be one of {MORPHOLOGY}, got {self.morphology!r}")

    @property
    def active(self) -> bool:
        return self.shuffle or self.morphology != "none"


@dataclass(frozen=True)
class PersonalizeRequest:
    """References paired with target masks, plus the generation settings.

    ``tau=None`` picks 0.8 for personalization and 0.1 for editing; editing
    modes also refuse perturbation.
    """

    references: Sequence[tuple[ReferenceBundle, torch.Tensor]]
    prompt: object = None
    tau: float | None = None
    perturbation: Perturbation = field(default_factory=Perturbation)
    schedule: FlowSchedule = field(default_factory=FlowSchedule)
    mode: str = "personalize"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.tau is None:
            object.__setattr__(self, "tau", EDIT_TAU if self.mode != "personalize" else DEFAULT_TAU)
        if not 0.0 <= float(self.tau) <= 1.0:
            raise ParameterError(f"tau must lie in [0, 1], got {self.tau}")
        if self.mode != "personalize" and self.perturbation.active:
            raise ParameterError(f"perturbation must be off in {self.mode} mode")


def prepare_reference(
    model: VelocityModel,
    image,
    mask=None,
    prompt=None,
    schedule: FlowSchedule = FlowSchedule(),
    patch: int = 2,
) -> ReferenceBundle:
    """Invert ``image`` and package it with its subject mask.

    Without an explicit ``mask`` the subject is segmented against the image's
    border color. Tokens carry no position; positions are applied in attention.
    """
    img = check_image(image)
    if mask is None:
        bg = list(BACKGROUNDS.values())[estimate_background(img)]
        mask = mask_from_sprite(img, bg, patch)
    mask = as_mask(mask)
    if not bool(mask.any()):
        raise ParameterError("reference mask is empty")
    clean = image_to_tokens(img, patch)
    traj = invert(model, clean, prompt, replace(schedule, guidance=1.0))
    p = None if prompt is None else torch.as_tensor(prompt, dtype=torch.long)
    return ReferenceBundle(traj, mask, p, clean)


def perturb_reference(tokens, m_ref, config: Perturbation) -> tuple[torch.Tensor, torch.Tensor]:
    """Windowed shuffle of the subject tokens plus mask dilation/erosion."""
    m_ref = as_mask(m_ref)
    tokens = torch.as_tensor(tokens)
    if tuple(m_ref.shape) != tuple(tokens.shape[-3:-1]):
        raise DimensionError(f"mask {tuple(m_ref.shape)} does not fit tokens {tuple(tokens.shape)}")
    if config.shuffle:
        src = window_permutation(m_ref, config.window, config.seed)
        h, w, d = tokens.shape[-3:]
        tokens = tokens.reshape(*tokens.shape[:-3], h * w, d)[..., src, :].reshape(tokens.shape)
    mask = _morph(m_ref, config)
    return tokens, mask


def _morph(mask, config: Perturbation) -> torch.Tensor:
    if config.morphology == "dilate":
        return dilate(mask, config.kernel)
    if config.morphology == "erode":
        return erode(mask, config.kernel)
    return mask


@dataclass(frozen=True)
class _Injection:
    """One reference, perturbed once per run and reused at every step."""

    bundle: ReferenceBundle
    target: torch.Tensor  # replacement region after morphology
    source: torch.Tensor  # subject cells feeding attention
    permutation: torch.Tensor | None

    def tokens_at(self, sampler_index: int) -> torch.Tensor:
        x = self.bundle.state_for(sampler_index)
        if self.permutation is None:
            return x
        h, w, d = x.shape[-3:]
        return x.reshape(h * w, d)[self.permutation].reshape(x.shape)

    def segment_at(self, sampler_index: int) -> tuple[torch.Tensor, PositionAssignment]:
        x = self.tokens_at(sampler_index)
        cells = x[self.source]
        return cells, PositionAssignment(torch.zeros(cells.shape[0], 2, dtype=torch.long), "zero")


def _prepare_injections(request: PersonalizeRequest) -> list[_Injection]:
    targets = [as_mask(m, f"references[{i}] mask") for i, (_, m) in enumerate(request.references)]
    if not check_disjoint(targets):
        raise DisjointnessError("target masks of the references overlap")
    injections = []
    cfg = request.perturbation
    for (bundle, _), target in zip(request.references, targets):
        bundle.check_schedule(request.schedule)
        if tuple(target.shape) != tuple(bundle.mask.shape):
            raise DimensionError(f"target mask {tuple(target.shape)} != reference grid {tuple(bundle.mask.shape)}")
        bundle = _align(bundle, target)
        perm = window_permutation(target, cfg.window, cfg.seed) if cfg.shuffle else None
        injections.append(_Injection(bundle, _morph(target, cfg), target, perm))
    if cfg.morphology == "dilate" and not check_disjoint([inj.target for inj in injections]):
        raise DisjointnessError("dilated target masks overlap")
    # Writes are disjoint, so order carries no meaning; a canonical order makes
    # the attention concatenation independent of request order as well.
    injections.sort(key=lambda inj: int(torch.nonzero(inj.source.reshape(-1))[0]))
    return injections


def _align(bundle: ReferenceBundle, target: torch.Tensor) -> ReferenceBundle:
    """Move the bundle onto ``target`` when it is a pure translation of the subject mask.

    Any other target (e.g. a hand-picked sub-region) is used in place.
    """
    if torch.equal(target, bundle.mask) or int(target.sum()) != int(bundle.mask.sum()):
        return bundle
    a = torch.nonzero(bundle.mask)[0]
    b = torch.nonzero(target)[0]
    delta = (int(b[0] - a[0]), int(b[1] - a[1]))
    try:
        moved = translate_mask(bundle.mask, delta)
    except ValueError:
        return bundle
    return compose_layout(bundle, delta)[0] if torch.equal(moved, target) else bundle


def _initial_noise(shape, seed) -> torch.Tensor:
    seeds = [seed] if np.isscalar(seed) else list(seed)
    z = torch.stack([torch.randn(shape, generator=torch.Generator().manual_seed(int(s))) for s in seeds])
    return z[0] if np.isscalar(seed) else z


def personalize(model: VelocityModel, request: PersonalizeRequest, seed=0, z_init=None):
    """Generate with the reference subjects injected.

    Returns ``(image, trajectory)``; ``seed`` may be a list for a batch.
    """
    injections = _prepare_injections(request)
    schedule = request.schedule
    tau = float(request.tau)
    if z_init is None:
        if not injections:
            raise ParameterError("z_init is required when no reference fixes the grid shape")
        z_init = _initial_noise(tuple(injections[0].bundle.tokens.shape), seed)
    x0 = torch.as_tensor(z_init)
    if injections and schedule.timesteps[0] > tau:
        for inj in injections:
            x0 = replace_tokens(x0, inj.tokens_at(0), inj.target)

    def hook(k, t, t_next, x):
        if t <= tau:
            return None
        for inj in injections:
            x = replace_tokens(x, inj.tokens_at(k + 1), inj.target)
        return x

    def late_refs(k, t):
        if t > tau:
            return None
        return [inj.segment_at(k) for inj in injections]

    prompt = None if request.prompt is None else torch.as_tensor(request.prompt, dtype=torch.long)
    traj = sample(
        model,
        x0,
        prompt,
        schedule,
        hook=hook if injections else None,
        extra_refs=late_refs if injections else None,
    )
    return tokens_to_image(traj.endpoint), traj


def replacement_steps(schedule: FlowSchedule, tau: float) -> int:
    """Number of sampler steps whose time exceeds ``tau``."""
    return sum(1 for t in schedule.timesteps if t > tau)


def compose_layout(bundle: ReferenceBundle, delta) -> tuple[ReferenceBundle, torch.Tensor]:
    """Move the subject by ``delta = (drow, dcol)``; returns the moved bundle and target mask."""
    target = translate_mask(bundle.mask, delta)
    traj = bundle.trajectory.map(lambda s: translate_tokens(s, bundle.mask, delta))
    moved = ReferenceBundle(traj, target, bundle.prompt, translate_tokens(bundle.tokens, bundle.mask, delta))
    return moved, target


def edit(
    model: VelocityModel,
    image,
    keep_mask,
    prompt=None,
    schedule: FlowSchedule = FlowSchedule(),
    seed=0,
    tau: float = EDIT_TAU,
    mode: str = "inpaint",
) -> np.ndarray:
    """Inpaint or outpaint: regenerate everything outside ``keep_mask``.

    The kept region is inverted and injected while ``t > tau`` (default 10% of
    the trajectory left), with perturbation off and denoising positions intact.
    """
    keep = as_mask(keep_mask, "keep_mask")
    if not bool(keep.any()):
        raise ParameterError("keep_mask is empty")
    bundle = prepare_reference(model, image, keep, prompt, schedule)
    request = PersonalizeRequest([(bundle, keep)], prompt, tau, Perturbation(), schedule, mode)
    out, _ = personalize(model, request, seed)
    return out
