"""Token-grid and binary-mask algebra.

Token grids are float tensors shaped ``(..., h, w, d)`` (leading batch axes are
allowed everywhere); masks are boolean tensors shaped ``(h, w)``. Cell indices
in this module are array indices ``(row, col)``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import (
    as_grid,
    as_mask,
    check_image,
    check_mask_fits,
    check_odd_kernel,
    check_same_grid,
)
from .errors import DimensionError, OutOfBoundsError, ParameterError


def replace_tokens(x, x_ref, m) -> torch.Tensor:
    """Take ``x_ref``'s token wherever ``m`` is set and ``x``'s token elsewhere."""
    x = as_grid(x, "x")
    x_ref = as_grid(x_ref, "x_ref")
    m = as_mask(m)
    check_same_grid(x, x_ref)
    check_mask_fits(x, m)
    if x.shape[-1] != x_ref.shape[-1]:
        raise DimensionError(f"x has d={x.shape[-1]} but x_ref has d={x_ref.shape[-1]}")
    return torch.where(m[..., None], x_ref.to(x.dtype), x)


def translate_mask(m, delta: Sequence[int]) -> torch.Tensor:
    """Shift every set cell by ``delta = (drow, dcol)``.

    Raises :class:`OutOfBoundsError` instead of clipping when a set cell would
    leave the grid.
    """
    m = as_mask(m)
    dr, dc = (int(v) for v in delta)
    h, w = m.shape
    rows, cols = torch.nonzero(m, as_tuple=True)
    rows, cols = rows + dr, cols + dc
    if rows.numel() and (rows.min() < 0 or cols.min() < 0 or rows.max() >= h or cols.max() >= w):
        raise OutOfBoundsError(f"translation by {(dr, dc)} moves set cells outside the {h}x{w} grid")
    out = torch.zeros_like(m)
    out[rows, cols] = True
    return out


def translate_tokens(x, m, delta: Sequence[int]) -> torch.Tensor:
    """Move the tokens under ``m`` by ``delta``; cells outside the moved mask keep ``x``."""
    x = as_grid(x)
    m = as_mask(m)
    check_mask_fits(x, m)
    target = translate_mask(m, delta)
    dr, dc = (int(v) for v in delta)
    rows, cols = torch.nonzero(m, as_tuple=True)
    out = x.clone()
    out[..., rows + dr, cols + dc, :] = x[..., rows, cols, :]
    return out


def dilate(m, kernel: int = 5) -> torch.Tensor:
    """Square-structuring-element dilation, clipped at the grid border."""
    m = as_mask(m)
    k = check_odd_kernel(kernel)
    if k == 1:
        return m.clone()
    # max_pool2d pads with -inf, so out-of-grid cells never contribute.
    pooled = F.max_pool2d(m[None, None].float(), k, stride=1, padding=k // 2)
    return pooled[0, 0] > 0.5


def erode(m, kernel: int = 5) -> torch.Tensor:
    """Dual of :func:`dilate`; off-grid cells count as set (grid-clipped neighborhood)."""
    m = as_mask(m)
    k = check_odd_kernel(kernel)
    return ~dilate(~m, k)


def window_permutation(m, window: int = 3, seed: int = 0) -> torch.Tensor:
    """Source index for every flattened cell after windowed shuffling.

    Each ``window x window`` tile (anchored at the origin, truncated at the
    border) permutes its masked cells with a generator keyed by
    ``(seed, tile index)``; unmasked cells map to themselves.
    """
    m = as_mask(m)
    if int(window) != window or window < 1:
        raise ParameterError(f"window must be an integer >= 1, got {window}")
    h, w = m.shape
    index = np.arange(h * w).reshape(h, w)
    src = index.copy()
    bits = m.numpy()
    n_tile_cols = -(-w // window)
    for r0 in range(0, h, window):
        for c0 in range(0, w, window):
            cells = index[r0 : r0 + window, c0 : c0 + window][bits[r0 : r0 + window, c0 : c0 + window]]
            if cells.size < 2:
                continue
            tile = (r0 // window) * n_tile_cols + c0 // window
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), tile])))
            src.flat[cells] = cells[rng.permutation(cells.size)]
    return torch.from_numpy(src.reshape(-1))


def shuffle_windows(x, m, window: int = 3, seed: int = 0) -> torch.Tensor:
    """Permute masked tokens among themselves inside each window tile."""
    x = as_grid(x)
    m = as_mask(m)
    check_mask_fits(x, m)
    src = window_permutation(m, window, seed)
    h, w, d = x.shape[-3:]
    flat = x.reshape(*x.shape[:-3], h * w, d)
    return flat[..., src, :].reshape(x.shape)


def check_disjoint(masks: Sequence) -> bool:
    masks = [as_mask(m, f"masks[{i}]") for i, m in enumerate(masks)]
    if not masks:
        return True
    shape = masks[0].shape
    for i, m in enumerate(masks):
        if m.shape != shape:
            raise DimensionError(f"masks[{i}] shape {tuple(m.shape)} != masks[0] shape {tuple(shape)}")
    counts = torch.stack(masks).sum(0)
    return bool(counts.max() <= 1)


def mask_from_sprite(image, background, patch: int = 2, threshold: float = 0.1) -> torch.Tensor:
    """Token-resolution subject mask of an image drawn over a flat background.

    A cell is set when any pixel in its ``patch x patch`` block differs from
    ``background`` by more than ``threshold`` in some channel.
    """
    img = check_image(image)
    bg = np.asarray(background, dtype=np.float32)
    if bg.max() > 1.0:
        bg = bg / 255.0
    H, W, _ = img.shape
    if H % patch or W % patch:
        raise ParameterError(f"image {H}x{W} is not divisible by patch {patch}")
    fg = np.abs(img - bg).max(axis=-1) > threshold
    cells = fg.reshape(H // patch, patch, W // patch, patch).any(axis=(1, 3))
    return torch.from_numpy(cells)
