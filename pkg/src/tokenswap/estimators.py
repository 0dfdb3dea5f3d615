"""scikit-learn style wrappers around the toy model and the personalization sampler.

``FlowDiT`` fits the velocity network on sprites and predicts images from
prompts. ``SubjectPersonalizer`` fits on one reference (inversion, no weight
updates) and predicts images that carry the reference subject.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_mask, check_image
from .dit import DiTConfig, ToyDiT, image_to_tokens, tokens_to_image
from .errors import DimensionError, ParameterError
from .evaluation import prompt_consistency
from .flow import FlowSchedule, invert, sample
from .personalize import (
    DEFAULT_TAU,
    Perturbation,
    PersonalizeRequest,
    compose_layout,
    personalize,
    prepare_reference,
)
from .sprites import PROMPT_LEN, generate_sprite_dataset, stack_samples
from .training import DatasetConfig, OptimizerConfig, TrainState, train


def _check_prompts(prompts) -> torch.Tensor:
    p = torch.as_tensor(np.asarray(prompts), dtype=torch.long)
    if p.ndim == 1:
        p = p[None]
    if p.ndim != 2 or p.shape[1] != PROMPT_LEN:
        raise DimensionError(f"prompts must be (n, {PROMPT_LEN}) token ids, got {tuple(p.shape)}")
    return p


def _check_images(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise DimensionError(f"images must be (n, H, W, 3), got {X.shape}")
    return np.stack([check_image(x) for x in X])


def _noise(shape, seed: int, n: int) -> torch.Tensor:
    gens = [torch.Generator().manual_seed(int(seed) + i) for i in range(n)]
    return torch.stack([torch.randn(shape, generator=g) for g in gens])


class FlowDiT(BaseEstimator):
    """Rectified-flow diffusion transformer on the sprite vocabulary.

    Parameters
    ----------
    depth, dim, heads : int
        Transformer size.
    train_steps, batch_size, learning_rate : training budget.
    sampling_steps : int
        Euler steps for ``predict`` and ``transform``.
    guidance : float
        Classifier-free guidance scale.
    random_state : int
        Seeds initialization, batches and sampling noise.
    """

    def __init__(
        self,
        depth=6,
        dim=64,
        heads=4,
        train_steps=2000,
        batch_size=16,
        learning_rate=2e-3,
        dataset_size=4096,
        sampling_steps=50,
        guidance=3.5,
        random_state=0,
    ):
        self.depth = depth
        self.dim = dim
        self.heads = heads
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dataset_size = dataset_size
        self.sampling_steps = sampling_steps
        self.guidance = guidance
        self.random_state = random_state

    def _schedule(self) -> FlowSchedule:
        return FlowSchedule(int(self.sampling_steps), float(self.guidance))

    def _new_model(self) -> ToyDiT:
        model = ToyDiT(DiTConfig(depth=self.depth, dim=self.dim, heads=self.heads))
        model.reset_parameters(torch.Generator().manual_seed(int(self.random_state)))
        return model

    def fit(self, X=None, y=None):
        """Train on images ``X`` with prompt ids ``y``; both ``None`` uses the generated sprite set."""
        if X is None:
            if y is not None:
                raise ParameterError("prompts given without images")
            images, prompts, _ = stack_samples(generate_sprite_dataset(self.dataset_size, self.random_state))
        else:
            if y is None:
                raise ParameterError("images need prompt ids y")
            images, prompts = _check_images(X), _check_prompts(y).numpy()
            if len(images) != len(prompts):
                raise DimensionError(f"{len(images)} images for {len(prompts)} prompts")
        data = (image_to_tokens(images), torch.as_tensor(prompts))
        optim = OptimizerConfig(
            steps=int(self.train_steps),
            batch_size=int(self.batch_size),
            learning_rate=float(self.learning_rate),
            seed=int(self.random_state),
        )
        self.model_, self.train_state_ = train(self._new_model(), data, optim)
        self.loss_curve_ = np.asarray(self.train_state_.losses)
        return self

    def partial_fit(self, state: TrainState, X=None, y=None):
        """Resume an interrupted ``fit`` from ``state`` with the same settings."""
        check_is_fitted(self, "model_")
        optim = OptimizerConfig(
            steps=int(self.train_steps),
            batch_size=int(self.batch_size),
            learning_rate=float(self.learning_rate),
            seed=int(self.random_state),
        )
        data = DatasetConfig(self.dataset_size, self.random_state) if X is None else (
            image_to_tokens(_check_images(X)),
            _check_prompts(y),
        )
        self.model_, self.train_state_ = train(self.model_, data, optim, state)
        self.loss_curve_ = np.asarray(self.train_state_.losses)
        return self

    def predict(self, prompts, seed=None) -> np.ndarray:
        """Sample one ``(32, 32, 3)`` image per prompt row."""
        check_is_fitted(self, "model_")
        p = _check_prompts(prompts)
        seed = self.random_state if seed is None else seed
        z = _noise((16, 16, self.model_.config.token_dim), seed, p.shape[0])
        traj = sample(self.model_, z, p, self._schedule())
        return tokens_to_image(traj.endpoint)

    def transform(self, X, prompts=None) -> torch.Tensor:
        """Invert images to their noise-time tokens."""
        check_is_fitted(self, "model_")
        tokens = image_to_tokens(_check_images(X))
        p = None if prompts is None else _check_prompts(prompts)
        sched = FlowSchedule(int(self.sampling_steps), 1.0)
        return invert(self.model_, tokens, p, sched).endpoint

    def score(self, prompts, y=None, seed=None) -> float:
        """Mean rule-based prompt consistency of sampled images."""
        images = self.predict(prompts, seed)
        return float(np.mean(prompt_consistency(images, _check_prompts(prompts).numpy())))


class SubjectPersonalizer(BaseEstimator):
    """Training-free subject injection into a fitted :class:`FlowDiT` or :class:`ToyDiT`.

    ``fit(image, mask, prompt)`` inverts the reference; ``predict(prompts)``
    generates with the subject placed at ``offset`` (rows, cols).
    """

    def __init__(
        self,
        model=None,
        tau=DEFAULT_TAU,
        steps=50,
        guidance=3.5,
        shuffle=False,
        morphology="none",
        offset=(0, 0),
        random_state=0,
    ):
        self.model = model
        self.tau = tau
        self.steps = steps
        self.guidance = guidance
        self.shuffle = shuffle
        self.morphology = morphology
        self.offset = offset
        self.random_state = random_state

    def _network(self) -> ToyDiT:
        if isinstance(self.model, FlowDiT):
            check_is_fitted(self.model, "model_")
            return self.model.model_
        if isinstance(self.model, ToyDiT):
            return self.model
        raise ParameterError("model must be a fitted FlowDiT or a ToyDiT")

    def fit(self, X, mask=None, prompt=None):
        """Invert the reference image ``X``; without ``mask`` the subject is segmented from the background."""
        schedule = FlowSchedule(int(self.steps), float(self.guidance))
        image = check_image(X)
        mask = None if mask is None else as_mask(mask)
        self.reference_ = prepare_reference(self._network(), image, mask, prompt, schedule)
        self.schedule_ = schedule
        return self

    def _request(self, prompt) -> PersonalizeRequest:
        bundle = self.reference_
        target = bundle.mask
        if tuple(self.offset) != (0, 0):
            bundle, target = compose_layout(bundle, self.offset)
        pert = Perturbation(
            shuffle=bool(self.shuffle),
            morphology=self.morphology,
            seed=int(self.random_state),
        )
        return PersonalizeRequest([(bundle, target)], prompt, self.tau, pert, self.schedule_)

    def predict(self, prompts, seed=None) -> np.ndarray:
        check_is_fitted(self, "reference_")
        p = _check_prompts(prompts)
        seed = self.random_state if seed is None else seed
        out = []
        for i, row in enumerate(p):
            image, _ = personalize(self._network(), self._request(row), seed=int(seed) + i)
            out.append(image)
        return np.stack(out)

    def transform(self, X=None) -> torch.Tensor:
        """Subject mask of the fitted reference (``X`` is ignored)."""
        check_is_fitted(self, "reference_")
        return self.reference_.mask.clone()
