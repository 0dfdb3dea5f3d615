"""A small multi-modal diffusion transformer over pixel-patch tokens.

Positions enter only through rotary embeddings inside attention, so token
content stays position-free; that is what makes token replacement work.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import check_prompt
from .errors import DimensionError, ParameterError
from .rope import (
    AttentionRecord,
    AttentionWeights,
    PositionAssignment,
    Segment,
    attention,
    concat_segments,
    grid_coords,
    rope_table,
)
from .sprites import NULL_ID, PROMPT_LEN, VOCAB_SIZE


def patchify(image, patch: int = 2) -> torch.Tensor:
    """``(..., H, W, C)`` pixels to ``(..., H/p, W/p, p*p*C)`` raw patch tokens."""
    img = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    if not torch.is_floating_point(img):
        img = img.to(torch.get_default_dtype())
    *lead, H, W, C = img.shape
    if H % patch or W % patch:
        raise ParameterError(f"image {H}x{W} is not divisible by patch {patch}")
    x = img.reshape(*lead, H // patch, patch, W // patch, patch, C)
    x = x.transpose(-4, -3)
    return x.reshape(*lead, H // patch, W // patch, patch * patch * C)


def unpatchify(tokens, patch: int = 2, channels: int = 3) -> torch.Tensor:
    x = torch.as_tensor(tokens)
    *lead, h, w, _ = x.shape
    x = x.reshape(*lead, h, w, patch, patch, channels).transpose(-4, -3)
    return x.reshape(*lead, h * patch, w * patch, channels)


def image_to_tokens(image, patch: int = 2) -> torch.Tensor:
    """Pixels in [0, 1] to model-space tokens in [-1, 1]."""
    return patchify(image, patch) * 2.0 - 1.0


def tokens_to_image(tokens, patch: int = 2) -> np.ndarray:
    img = (unpatchify(tokens, patch) + 1.0) / 2.0
    return img.clamp(0.0, 1.0).detach().cpu().numpy().astype(np.float32)


@dataclass(frozen=True)
class DiTConfig:
    depth: int = 6
    dim: int = 64
    heads: int = 4
    patch: int = 2
    vocab: int = VOCAB_SIZE
    channels: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % (4 * self.heads):
            raise ParameterError(f"dim {self.dim} must be divisible by 4*heads={4 * self.heads}")
        if self.depth < 1:
            raise ParameterError("depth must be >= 1")

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (t * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class DiTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = AttentionWeights(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))
        self.modulation = nn.Linear(dim, 6 * dim)

    def forward(self, x, table, cond, record=False, key_mask=None):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(F.silu(cond)).chunk(6, dim=-1)
        a, maps = attention(_modulate(self.norm1(x), shift1, scale1), table, self.attn, record, key_mask)
        x = x + gate1[:, None] * a
        x = x + gate2[:, None] * self.mlp(_modulate(self.norm2(x), shift2, scale2))
        return x, maps


class ToyDiT(nn.Module):
    """Velocity network over raw patch tokens, text ids and optional reference segments."""

    def __init__(self, config: DiTConfig | None = None):
        super().__init__()
        self.config = config = config or DiTConfig()
        d = config.dim
        self.patch_embed = nn.Linear(config.token_dim, d)
        self.text_embed = nn.Embedding(config.vocab, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(DiTBlock(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_modulation = nn.Linear(d, 2 * d)
        self.unembed = nn.Linear(d, config.token_dim)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        """Xavier projections, N(0, 0.02) embeddings, zeroed modulation and output (adaLN-zero)."""
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = math.sqrt(6.0 / (module.in_features + module.out_features))
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.bias.zero_()
        with torch.no_grad():
            self.text_embed.weight.normal_(0.0, 0.02, generator=generator)
            for block in self.blocks:
                block.modulation.weight.zero_()
                block.modulation.bias.zero_()
            self.final_modulation.weight.zero_()
            self.final_modulation.bias.zero_()
            self.unembed.weight.zero_()
            self.unembed.bias.zero_()

    # -- helpers -------------------------------------------------------------

    def _prompt_ids(self, prompt, batch: int) -> torch.Tensor:
        if prompt is None:
            return torch.full((batch, PROMPT_LEN), NULL_ID, dtype=torch.long)
        ids = check_prompt(prompt, self.config.vocab)
        if ids.ndim == 1:
            ids = ids.expand(batch, -1)
        if ids.shape[0] != batch:
            raise DimensionError(f"prompt batch {ids.shape[0]} != token batch {batch}")
        return ids

    def _reference_segments(self, extra_refs, batch, dtype) -> list[Segment]:
        segments = []
        for k, ref in enumerate(extra_refs or ()):
            tokens, positions = ref
            tokens = torch.as_tensor(tokens, dtype=dtype)
            coords = positions.coords if isinstance(positions, PositionAssignment) else torch.as_tensor(positions)
            if tokens.shape[-1] != self.config.token_dim:
                raise DimensionError(f"reference {k} has token dim {tokens.shape[-1]}, expected {self.config.token_dim}")
            n = coords.shape[0]
            is_sequence = tokens.ndim in (2, 3) and tokens.shape[-2] == n
            if not is_sequence and tokens.ndim >= 3 and tokens.shape[-3] * tokens.shape[-2] == n:
                tokens = tokens.reshape(*tokens.shape[:-3], n, tokens.shape[-1])
            if tokens.ndim == 2:
                tokens = tokens.expand(batch, -1, -1)
            if tokens.shape[0] != batch or tokens.shape[1] != coords.shape[0]:
                raise DimensionError(
                    f"reference {k} tokens {tuple(tokens.shape)} do not match {coords.shape[0]} positions / batch {batch}"
                )
            name = "reference" if k == 0 else f"reference{k}"
            segments.append(Segment(name, self.patch_embed(tokens), coords.long()))
        return segments

    def conditioning(self, t: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.config.dim)) + text.mean(dim=1)

    # -- forward ---------------------------------------------------------------

    def forward_sequence(
        self,
        tokens: torch.Tensor,
        coords: torch.Tensor,
        t,
        prompt=None,
        extra_refs: Sequence | None = None,
        record: bool = False,
        mask_reference_keys: bool = False,
        return_hidden: bool = False,
    ):
        """Run on an arbitrary image-token sequence ``(B, n, token_dim)`` placed at ``coords``.

        Returns the velocity ``(B, n, token_dim)``; with ``record`` also an
        :class:`AttentionRecord`; with ``return_hidden`` the per-block image
        hidden states instead of the velocity.
        """
        B = tokens.shape[0]
        t = torch.as_tensor(t, dtype=tokens.dtype)
        if t.ndim == 0:
            t = t.expand(B)
        text = self.text_embed(self._prompt_ids(prompt, B))
        segments = [Segment("image", self.patch_embed(tokens), coords.long())]
        segments += self._reference_segments(extra_refs, B, tokens.dtype)
        segments.append(Segment("text", text, torch.zeros(text.shape[1], 2, dtype=torch.long)))

        key_mask = None
        if mask_reference_keys and len(segments) > 2:
            sizes = [s.tokens.shape[1] for s in segments]
            key_mask = torch.ones(sum(sizes), dtype=torch.bool)
            key_mask[sizes[0] : sum(sizes[:-1])] = False

        x, all_coords, spans = concat_segments(segments, self.config.dim)
        table = rope_table(all_coords, self.config.dim // self.config.heads, dtype=x.dtype)
        n = tokens.shape[1]
        cond = self.conditioning(t, text)
        maps, hidden = [], []
        for block in self.blocks:
            x, m = block(x, table, cond, record=record, key_mask=key_mask)
            if record:
                maps.append(m.detach())
            hidden.append(x[:, :n])
        if return_hidden:
            return hidden
        shift, scale = self.final_modulation(F.silu(cond)).chunk(2, dim=-1)
        out = self.unembed(_modulate(self.final_norm(x[:, :n]), shift, scale))
        if record:
            return out, AttentionRecord(torch.stack(maps), spans)
        return out

    def forward(self, x_t, t, prompt=None, extra_refs=None, record=False, mask_reference_keys=False):
        """Predict the velocity for grid tokens ``x_t`` shaped ``(B, h, w, token_dim)``."""
        if x_t.ndim != 4 or x_t.shape[-1] != self.config.token_dim:
            raise DimensionError(f"x_t must be (B, h, w, {self.config.token_dim}), got {tuple(x_t.shape)}")
        B, h, w, c = x_t.shape
        result = self.forward_sequence(
            x_t.reshape(B, h * w, c), grid_coords(h, w), t, prompt, extra_refs, record, mask_reference_keys
        )
        if record:
            out, rec = result
            return out.reshape(B, h, w, c), rec
        return result.reshape(B, h, w, c)

    def velocity(self, x, t, prompt=None, extra_refs=None):
        """Flow-engine entry point; accepts an unbatched ``(h, w, c)`` grid too."""
        single = x.ndim == 3
        xb = x[None] if single else x
        v = self.forward(xb, t, prompt, extra_refs)
        return v[0] if single else v


def dit_forward(params: ToyDiT, x_t, t, prompt=None, extra_ref=None) -> torch.Tensor:
    """Velocity over the image tokens of ``x_t``; ``extra_ref`` is one ``(tokens, positions)`` pair or a list."""
    if extra_ref is not None and isinstance(extra_ref, tuple):
        extra_ref = [extra_ref]
    return params.velocity(torch.as_tensor(x_t), t, prompt, extra_ref)
