"""Synthetic sprite dataset: a closed vocabulary, a renderer and an attribute reader.

Every sample is one flat-colored, textured shape on a flat background. The
prompt is four vocabulary ids ``(shape, color, background, texture)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

IMAGE_SIZE = 32
PATCH = 2

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.95, 0.85, 0.10),
    "magenta": (0.90, 0.20, 0.85),
    "cyan": (0.10, 0.85, 0.90),
}
BACKGROUNDS = {
    "black": (0.05, 0.05, 0.05),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.50, 0.50, 0.50),
    "navy": (0.08, 0.10, 0.35),
    "maroon": (0.35, 0.08, 0.08),
    "olive": (0.35, 0.35, 0.10),
}
N_TEXTURES = 16
TEXTURE_DARKEN = 0.35

VOCAB = (
    list(SHAPES)
    + list(COLORS)
    + [f"bg-{b}" for b in BACKGROUNDS]
    + [f"tex{k}" for k in range(N_TEXTURES)]
    + ["<null>"]
)
SHAPE_IDS = range(0, 3)
COLOR_IDS = range(3, 9)
BACKGROUND_IDS = range(9, 15)
TEXTURE_IDS = range(15, 31)
NULL_ID = 31
VOCAB_SIZE = len(VOCAB)
PROMPT_LEN = 4

_COLOR_RGB = np.array(list(COLORS.values()), dtype=np.float32)
_BG_RGB = np.array(list(BACKGROUNDS.values()), dtype=np.float32)


def encode_prompt(words) -> list[int]:
    """Map words like ``["circle", "red", "black", "tex3"]`` to vocabulary ids.

    Background words may be given with or without the ``bg-`` prefix.
    """
    if isinstance(words, str):
        words = words.replace(",", " ").split()
    ids = []
    for slot, word in enumerate(words):
        if slot == 2 and not word.startswith("bg-") and f"bg-{word}" in VOCAB:
            word = f"bg-{word}"
        try:
            ids.append(VOCAB.index(word))
        except ValueError:
            raise KeyError(f"unknown prompt word {word!r}") from None
    return ids


def decode_prompt(ids) -> list[str]:
    return [VOCAB[int(i)] for i in ids]


def null_prompt(batch: int | None = None) -> torch.Tensor:
    shape = (PROMPT_LEN,) if batch is None else (batch, PROMPT_LEN)
    return torch.full(shape, NULL_ID, dtype=torch.long)


def texture_pattern(texture: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Binary stripe/checker pattern identifying texture ``texture`` (0..15)."""
    family, period = divmod(int(texture), 4)
    period += 2
    y, x = np.mgrid[0:size, 0:size]
    if family == 0:
        p = (y // period) % 2
    elif family == 1:
        p = (x // period) % 2
    elif family == 2:
        p = ((x + y) // period) % 2
    else:
        p = ((x // period) + (y // period)) % 2
    return p.astype(bool)


def shape_coverage(shape: str, center, size: float, res: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean pixel coverage of a shape, tested at pixel centers."""
    cx, cy = center
    y, x = np.mgrid[0:res, 0:res] + 0.5
    if shape == "circle":
        return (x - cx) ** 2 + (y - cy) ** 2 <= size**2
    if shape == "square":
        return (np.abs(x - cx) <= size) & (np.abs(y - cy) <= size)
    if shape == "triangle":
        # apex up: (cx, cy - s), base corners (cx -/+ s, cy + s)
        inside_base = y <= cy + size
        half = (y - (cy - size)) / 2.0
        return inside_base & (half >= 0) & (np.abs(x - cx) <= half)
    raise KeyError(shape)


def analytic_centroid(shape: str, center, size: float) -> tuple[float, float]:
    cx, cy = center
    if shape == "triangle":
        return cx, cy + size / 3.0
    return cx, cy


@dataclass(frozen=True)
class SpriteSample:
    image: np.ndarray  # (32, 32, 3) float32 in [0, 1]
    prompt: tuple[int, int, int, int]
    mask: np.ndarray  # (16, 16) bool, token resolution
    shape: str
    center: tuple[float, float]
    size: float

    @property
    def color(self) -> str:
        return VOCAB[self.prompt[1]]

    @property
    def background(self) -> str:
        return VOCAB[self.prompt[2]][3:]


def render_sprite(shape, color, background, texture, center, size) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image, pixel coverage)`` for one sprite."""
    cover = shape_coverage(shape, center, size)
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    img[:] = BACKGROUNDS[background]
    shade = 1.0 - TEXTURE_DARKEN * texture_pattern(texture)
    fg = np.asarray(COLORS[color], dtype=np.float32) * shade[..., None].astype(np.float32)
    img[cover] = fg[cover]
    return img, cover


def pixel_to_token_mask(cover: np.ndarray, patch: int = PATCH) -> np.ndarray:
    h, w = cover.shape
    return cover.reshape(h // patch, patch, w // patch, patch).any(axis=(1, 3))


def make_sample(rng: np.random.Generator, shape=None, color=None, background=None, texture=None) -> SpriteSample:
    shape = SHAPES[rng.integers(3)] if shape is None else shape
    color = list(COLORS)[rng.integers(6)] if color is None else color
    background = list(BACKGROUNDS)[rng.integers(6)] if background is None else background
    texture = int(rng.integers(N_TEXTURES)) if texture is None else int(texture)
    size = float(rng.uniform(5.0, 9.0))
    margin = size + 1.0
    cx = float(rng.uniform(margin, IMAGE_SIZE - margin))
    cy = float(rng.uniform(margin, IMAGE_SIZE - margin))
    img, cover = render_sprite(shape, color, background, texture, (cx, cy), size)
    prompt = (
        SHAPES.index(shape),
        VOCAB.index(color),
        VOCAB.index(f"bg-{background}"),
        TEXTURE_IDS[0] + texture,
    )
    return SpriteSample(img, prompt, pixel_to_token_mask(cover), shape, (cx, cy), size)


def generate_sprite_dataset(count: int, seed: int = 0) -> list[SpriteSample]:
    """``count`` random sprites, bit-identical for equal seeds."""
    rng = np.random.default_rng(seed)
    return [make_sample(rng) for _ in range(int(count))]


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    prompts = np.array([s.prompt for s in samples], dtype=np.int64)
    masks = np.stack([s.mask for s in samples])
    return images, prompts, masks


# --- attribute reader -------------------------------------------------------

def _nearest(rgb: np.ndarray, palette: np.ndarray) -> int:
    return int(np.argmin(((palette - rgb) ** 2).sum(-1)))


def estimate_background(image: np.ndarray) -> int:
    """Index into BACKGROUNDS of the image's border color."""
    border = np.concatenate([image[0], image[-1], image[:, 0], image[:, -1]])
    return _nearest(np.median(border, axis=0), _BG_RGB)


def subject_pixels(image: np.ndarray, threshold: float = 0.15) -> np.ndarray:
    bg = _BG_RGB[estimate_background(image)]
    return np.abs(image - bg).max(-1) > threshold


def dominant_color(image: np.ndarray, cover: np.ndarray) -> int | None:
    """Majority vote of subject pixels over plain and texture-darkened palette entries."""
    if not cover.any():
        return None
    palette = np.concatenate([_COLOR_RGB, _COLOR_RGB * (1.0 - TEXTURE_DARKEN)])
    px = image[cover]
    idx = np.argmin(((px[:, None, :] - palette[None]) ** 2).sum(-1), axis=1) % len(_COLOR_RGB)
    return int(np.bincount(idx, minlength=len(_COLOR_RGB)).argmax())


_FILL_PROTOTYPES = {"circle": np.pi / 4, "square": 1.0, "triangle": 0.5}


def classify_shape(cover: np.ndarray) -> str | None:
    """Coarse shape from zeroth-order moment against the bounding-box area."""
    if cover.sum() < 4:
        return None
    ys, xs = np.nonzero(cover)
    fill = cover.sum() / float((ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1))
    return min(_FILL_PROTOTYPES, key=lambda s: abs(_FILL_PROTOTYPES[s] - fill))


def read_attributes(image) -> dict:
    """Return ``{"shape", "color", "background"}`` names read off an image."""
    img = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    cover = subject_pixels(img)
    color = dominant_color(img, cover)
    return {
        "shape": classify_shape(cover),
        "color": None if color is None else list(COLORS)[color],
        "background": list(BACKGROUNDS)[estimate_background(img)],
    }


def mean_subject_color(image, cover=None) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    cover = subject_pixels(img) if cover is None else cover
    if not cover.any():
        return np.full(3, np.nan, dtype=np.float32)
    return img[cover].mean(0)
