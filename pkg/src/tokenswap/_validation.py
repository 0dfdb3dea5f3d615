"""Input validation helpers shared by the functional API and the estimators."""

from __future__ import annotations

import numpy as np
import torch

from .errors import DimensionError, ParameterError


def as_grid(x, name="x", dtype=None) -> torch.Tensor:
    """Return ``x`` as a floating tensor of shape ``(..., h, w, d)``."""
    t = torch.as_tensor(x)
    if not torch.is_floating_point(t):
        t = t.to(torch.get_default_dtype())
    if dtype is not None:
        t = t.to(dtype)
    if t.ndim < 3:
        raise DimensionError(f"{name} must have shape (..., h, w, d), got {tuple(t.shape)}")
    return t


def as_mask(m, name="mask") -> torch.Tensor:
    t = torch.as_tensor(m)
    if t.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D (h, w) mask, got {tuple(t.shape)}")
    if t.dtype != torch.bool:
        if not torch.all((t == 0) | (t == 1)):
            raise ParameterError(f"{name} must contain only 0/1 values")
        t = t.to(torch.bool)
    return t


def check_same_grid(a: torch.Tensor, b: torch.Tensor, names=("x", "x_ref")) -> None:
    if a.shape[-3:-1] != b.shape[-3:-1]:
        raise DimensionError(
            f"{names[0]} grid {tuple(a.shape[-3:-1])} != {names[1]} grid {tuple(b.shape[-3:-1])}"
        )


def check_mask_fits(x: torch.Tensor, m: torch.Tensor, name="mask") -> None:
    if tuple(m.shape) != tuple(x.shape[-3:-1]):
        raise DimensionError(f"{name} shape {tuple(m.shape)} != grid shape {tuple(x.shape[-3:-1])}")


def check_odd_kernel(kernel: int) -> int:
    if int(kernel) != kernel or kernel < 1 or kernel % 2 == 0:
        raise ParameterError(f"kernel must be an odd integer >= 1, got {kernel}")
    return int(kernel)


def check_image(image, name="image") -> np.ndarray:
    """Return an ``(H, W, 3)`` float32 array in [0, 1].

    uint8 input is rescaled; anything else is taken as already in [0, 1].
    """
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise DimensionError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return arr


def check_prompt(prompt, vocab_size: int) -> torch.Tensor:
    p = torch.as_tensor(prompt, dtype=torch.long)
    if p.ndim not in (1, 2):
        raise DimensionError(f"prompt must have shape (n,) or (B, n), got {tuple(p.shape)}")
    if p.numel() and (int(p.min()) < 0 or int(p.max()) >= vocab_size):
        raise ParameterError(f"prompt ids must lie in [0, {vocab_size}), got {p.tolist()}")
    return p


def check_fraction(value: float, name: str, low_open=True) -> float:
    v = float(value)
    ok = (0.0 < v <= 1.0) if low_open else (0.0 <= v <= 1.0)
    if not ok:
        raise ParameterError(f"{name} must lie in {'(0, 1]' if low_open else '[0, 1]'}, got {value}")
    return v
