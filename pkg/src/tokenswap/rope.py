"""2D axial rotary embeddings and multi-modal attention over token segments.

Coordinates here follow the attention convention ``(i, j) = (column, row)``,
so a grid token at array cell ``(r, c)`` sits at ``(i, j) = (c, r)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, ParameterError

ROPE_BASE = 10000.0
STRATEGIES = ("original", "zero", "shifted")


def _axis_frequencies(dim: int, base: float, dtype) -> torch.Tensor:
    pairs = dim // 4
    return base ** (-torch.arange(pairs, dtype=dtype) / pairs)


def rope_table(coords, dim: int, base: float = ROPE_BASE, dtype=torch.float32) -> torch.Tensor:
    """Unit complex rotations ``(..., dim/2)`` for coordinates ``(..., 2)``.

    Pair ``m`` of the i-half turns by ``i * f_m`` and pair ``m`` of the j-half
    by ``j * f_m`` with ``f_m = base**(-m / (dim/4))``.
    """
    if dim % 4:
        raise ParameterError(f"rotary dimension must be divisible by 4, got {dim}")
    coords = torch.as_tensor(coords).to(dtype)
    freqs = _axis_frequencies(dim, base, dtype)
    angles = torch.cat((coords[..., 0:1] * freqs, coords[..., 1:2] * freqs), dim=-1)
    return torch.polar(torch.ones_like(angles), angles)


def apply_rope(x: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive feature pairs of ``x`` by the complex ``table``."""
    pairs = torch.view_as_complex(x.reshape(*x.shape[:-1], -1, 2).contiguous())
    return torch.view_as_real(pairs * table).flatten(-2)


def rope_rotate(x, coords, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotate ``x`` (``(..., d)``) by the 2D rotary matrix of ``coords`` (``(..., 2)``).

    The first ``d/2`` features rotate with the i-coordinate, the second half with
    the j-coordinate; within each half, consecutive pairs ``(2m, 2m+1)`` turn by
    ``coord * base**(-m / (d/4))``. The matrix is block-diagonal in 2x2 rotations.
    """
    x = torch.as_tensor(x)
    if not torch.is_floating_point(x):
        x = x.to(torch.get_default_dtype())
    d = x.shape[-1]
    if d % 4:
        raise ParameterError(f"rotary dimension must be divisible by 4, got {d}")
    return apply_rope(x, rope_table(coords, d, base, x.dtype))


@dataclass(frozen=True)
class PositionAssignment:
    """Per-token ``(i, j)`` coordinates plus the strategy that produced them."""

    coords: torch.Tensor
    strategy: str = "original"
    offset: tuple[int, int] = (0, 0)

    def __len__(self):
        return self.coords.shape[0]


def grid_coords(h: int, w: int) -> torch.Tensor:
    """Row-major ``(i, j)`` coordinates of an ``h x w`` grid."""
    rows, cols = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    return torch.stack((cols.reshape(-1), rows.reshape(-1)), dim=-1)


def assign_positions(grid_shape, strategy: str = "original", offset=None) -> PositionAssignment:
    """Coordinates for a grid of ``grid_shape = (h, w)`` tokens.

    ``zero`` pins every token to ``(0, 0)`` like the text tokens; ``shifted``
    adds ``offset`` (default ``(w, 0)``, i.e. the next block to the right).
    """
    h, w = (int(v) for v in grid_shape)
    base = grid_coords(h, w)
    if strategy == "original":
        return PositionAssignment(base, "original")
    if strategy == "zero":
        return PositionAssignment(torch.zeros_like(base), "zero")
    if strategy == "shifted":
        di, dj = (w, 0) if offset is None else (int(offset[0]), int(offset[1]))
        return PositionAssignment(base + torch.tensor([di, dj]), "shifted", (di, dj))
    raise ParameterError(f"unknown position strategy {strategy!r}; expected one of {STRATEGIES}")


def text_positions(n: int) -> PositionAssignment:
    return PositionAssignment(torch.zeros(n, 2, dtype=torch.long), "zero")


@dataclass
class Segment:
    """A named run of tokens ``(B, n, d)`` with coordinates ``(n, 2)``."""

    name: str
    tokens: torch.Tensor
    coords: torch.Tensor


@dataclass
class AttentionRecord:
    """Row-stochastic attention maps shaped ``(layers, batch, heads, L, L)``.

    ``segments`` maps a segment name to its ``[start, stop)`` slice of the
    concatenated sequence.
    """

    maps: torch.Tensor
    segments: dict[str, tuple[int, int]] = field(default_factory=dict)

    @classmethod
    def stack(cls, records: Sequence["AttentionRecord"]) -> "AttentionRecord":
        return cls(torch.cat([r.maps for r in records], dim=0), dict(records[0].segments))

    def to_csv(self, path, batch_index: int = 0) -> None:
        maps = self.maps[:, batch_index]
        layers, heads, L, _ = maps.shape
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["layer", "head", "query", "key", "weight"])
            for li in range(layers):
                for hi in range(heads):
                    rows = maps[li, hi].tolist()
                    for q in range(L):
                        for k in range(L):
                            out.writerow([li, hi, q, k, f"{rows[q][k]:.8g}"])


class AttentionWeights(nn.Module):
    """Query/key/value and output projections of one attention layer."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % (4 * heads):
            raise ParameterError(f"dim {dim} must be divisible by 4*heads={4 * heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)


def concat_segments(segments: Sequence[Segment], dim: int):
    """Validate ``segments`` and return ``(tokens, coords, spans)`` of their concatenation."""
    if not segments:
        raise DimensionError("attention needs at least one segment")
    batch = segments[0].tokens.shape[0]
    spans, start = {}, 0
    for seg in segments:
        if seg.tokens.ndim != 3 or seg.tokens.shape[-1] != dim or seg.tokens.shape[0] != batch:
            raise DimensionError(
                f"segment {seg.name!r} has shape {tuple(seg.tokens.shape)}, expected ({batch}, n, {dim})"
            )
        if tuple(seg.coords.shape) != (seg.tokens.shape[1], 2):
            raise DimensionError(
                f"segment {seg.name!r} has {tuple(seg.coords.shape)} coords for {seg.tokens.shape[1]} tokens"
            )
        spans[seg.name] = (start, start + seg.tokens.shape[1])
        start += seg.tokens.shape[1]
    x = torch.cat([s.tokens for s in segments], dim=1)
    coords = torch.cat([s.coords for s in segments], dim=0)
    return x, coords, spans


def attention(x, table, weights: AttentionWeights, record=False, key_mask=None):
    """Rotary self-attention over one concatenated sequence ``(B, L, dim)``.

    ``table`` is the per-head :func:`rope_table` of the sequence coordinates.
    Returns ``(output, maps)`` with ``maps`` ``(B, heads, L, L)`` or ``None``.
    """
    B, L, dim = x.shape
    H = weights.heads
    q, k, v = weights.qkv(x).view(B, L, 3, H, dim // H).permute(2, 0, 3, 1, 4)
    q = apply_rope(q, table)
    k = apply_rope(k, table)
    maps = None
    if record or key_mask is not None:
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(dim // H)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask.view(1, 1, 1, L), float("-inf"))
        maps = torch.softmax(logits, dim=-1)
        y = maps @ v
    else:
        y = F.scaled_dot_product_attention(q, k, v)
    return weights.out(y.transpose(1, 2).reshape(B, L, dim)), maps


def mm_attention(
    segments: Sequence[Segment],
    weights: AttentionWeights,
    record: bool = False,
    key_mask: torch.Tensor | None = None,
):
    """Full bidirectional attention over the concatenation of ``segments``.

    Queries and keys are rotated by each token's coordinates; values are not.
    Returns ``(outputs, record)`` where ``outputs`` is a list matching the
    input segments. ``key_mask`` (bool, ``(L,)``) drops keys from every row;
    it exists for ablation tests only.
    """
    dim = weights.qkv.in_features
    x, coords, spans = concat_segments(segments, dim)
    table = rope_table(coords, dim // weights.heads, dtype=x.dtype)
    y, maps = attention(x, table, weights, record, key_mask)
    outputs = [y[:, a:b] for a, b in spans.values()]
    rec = AttentionRecord(maps.detach()[None], spans) if record else None
    return outputs, rec


def default_pairing(h: int, w: int) -> torch.Tensor:
    """Identity pairing: denoising cell ``c`` with reference cell ``c``."""
    idx = torch.arange(h * w)
    return torch.stack((idx, idx), dim=-1)


def matched_position_score(
    record: AttentionRecord,
    pairing: torch.Tensor,
    query_segment: str = "image",
    key_segment: str = "reference",
) -> float:
    """Mean attention weight from each paired denoising token to its reference partner.

    ``pairing`` holds ``(query cell, reference cell)`` rows, indexed within their
    own segments. The mean runs over layers, batch items, heads and pairs.
    """
    for name in (query_segment, key_segment):
        if name not in record.segments:
            raise KeyError(f"attention record has no {name!r} segment (has {list(record.segments)})")
    q0, _ = record.segments[query_segment]
    k0, _ = record.segments[key_segment]
    pairing = torch.as_tensor(pairing, dtype=torch.long)
    weights = record.maps[..., q0 + pairing[:, 0], k0 + pairing[:, 1]]
    return float(weights.double().mean())
