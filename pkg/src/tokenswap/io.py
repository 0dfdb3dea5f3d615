"""File formats: PBM masks, TGRD token grids, PNG/PPM/PGM images, TDIT checkpoints.

TGRD layout (little-endian): ``b"TGRD"``, ``u32 version``, ``u32 h, w, d``,
then ``h*w*d`` float32 values in row-major order.

TDIT layout (little-endian): ``b"TDIT"``, ``u32 version``, ``u32 depth, dim,
heads, patch, vocab``, ``u32 step``, ``u32 tensor count``, then per tensor
``u32 name length``, UTF-8 name, ``u32 ndim``, ``ndim x u32`` dims and the
float32 values. Optimizer moments are stored as extra ``opt/...`` tensors and
the per-step losses as ``log/loss`` so a run can resume bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .dit import DiTConfig, ToyDiT

TGRD_MAGIC = b"TGRD"
TDIT_MAGIC = b"TDIT"
FORMAT_VERSION = 1


# --- masks ------------------------------------------------------------------

def write_pbm(path, mask) -> None:
    """Binary PBM (P4); set cells are written as 1 (black)."""
    bits = np.asarray(torch.as_tensor(mask).numpy(), dtype=bool)
    h, w = bits.shape
    packed = np.packbits(bits, axis=1)
    Path(path).write_bytes(f"P4\n{w} {h}\n".encode() + packed.tobytes())


def _read_header(data: bytes, fields: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < fields:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pbm(path) -> torch.Tensor:
    data = Path(path).read_bytes()
    (magic, w, h), pos = _read_header(data, 3)
    if magic != b"P4":
        raise ValueError(f"{path}: not a binary PBM (magic {magic!r})")
    w, h = int(w), int(h)
    row_bytes = (w + 7) // 8
    packed = np.frombuffer(data, dtype=np.uint8, count=h * row_bytes, offset=pos).reshape(h, row_bytes)
    return torch.from_numpy(np.unpackbits(packed, axis=1)[:, :w].astype(bool))


# --- token grids --------------------------------------------------------------

def write_tgrd(path, grid) -> None:
    g = torch.as_tensor(grid).detach().to(torch.float32).numpy()
    if g.ndim != 3:
        raise ValueError(f"TGRD stores one (h, w, d) grid, got shape {g.shape}")
    h, w, d = g.shape
    header = TGRD_MAGIC + struct.pack("<4I", FORMAT_VERSION, h, w, d)
    Path(path).write_bytes(header + g.astype("<f4").tobytes())


def read_tgrd(path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if data[:4] != TGRD_MAGIC:
        raise ValueError(f"{path}: bad TGRD magic")
    version, h, w, d = struct.unpack_from("<4I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported TGRD version {version}")
    arr = np.frombuffer(data, dtype="<f4", count=h * w * d, offset=20).reshape(h, w, d)
    return torch.from_numpy(arr.astype(np.float32))


def write_trajectory(directory, trajectory, stem: str = "state") -> Path:
    """Dump every state as TGRD plus an ``index.json`` of ``(step, t, file)``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for k, (t, state) in enumerate(zip(trajectory.times, trajectory.states)):
        name = f"{stem}_{k:04d}.tgrd"
        write_tgrd(directory / name, state)
        index.append({"step": k, "t": t, "file": name})
    path = directory / "index.json"
    path.write_text(json.dumps(index, indent=1) + "\n")
    return path


# --- images -------------------------------------------------------------------

def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image, fmt: str | None = None) -> None:
    """Write an ``(H, W, 3)`` float image in [0, 1] as PNG or binary PPM."""
    path = Path(path)
    fmt = fmt or ("ppm" if path.suffix.lower() == ".ppm" else "png")
    px = to_uint8(image)
    if fmt == "ppm":
        h, w, _ = px.shape
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + px.tobytes())
        return
    from PIL import Image

    Image.fromarray(px, "RGB").save(path, format="PNG", optimize=False, compress_level=6)


def read_image(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P6":
        (_, w, h, _), pos = _read_header(data, 4)
        px = np.frombuffer(data, dtype=np.uint8, count=int(w) * int(h) * 3, offset=pos)
        return px.reshape(int(h), int(w), 3).astype(np.float32) / 255.0
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_pgm(path, values) -> None:
    """Binary PGM of a non-negative map, scaled so its maximum is white."""
    v = np.asarray(values, dtype=np.float64)
    top = v.max() if v.size and v.max() > 0 else 1.0
    px = np.round(np.clip(v / top, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


# --- checkpoints ----------------------------------------------------------------

def _pack_tensor(name: str, t: torch.Tensor) -> bytes:
    arr = t.detach().to(torch.float32).contiguous().numpy()
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def save_checkpoint(path, model: ToyDiT, step: int = 0, optimizer_state: dict | None = None, losses=None) -> None:
    cfg = model.config
    tensors = list(model.state_dict().items())
    if losses is not None:
        tensors.append(("log/loss", torch.tensor(list(losses), dtype=torch.float32)))
    if optimizer_state is not None:
        names = [n for n, _ in model.named_parameters()]
        for idx, st in sorted(optimizer_state["state"].items()):
            for key in ("exp_avg", "exp_avg_sq", "step"):
                tensors.append((f"opt/{names[idx]}/{key}", torch.as_tensor(st[key]).reshape(-1) if key == "step" else st[key]))
    blob = [TDIT_MAGIC, struct.pack("<7I", FORMAT_VERSION, cfg.depth, cfg.dim, cfg.heads, cfg.patch, cfg.vocab, step)]
    blob.append(struct.pack("<I", len(tensors)))
    blob += [_pack_tensor(n, t) for n, t in tensors]
    Path(path).write_bytes(b"".join(blob))


def load_checkpoint(path) -> tuple[ToyDiT, int, dict | None, list[float]]:
    """Return ``(model, step, optimizer_state_or_None, losses)``."""
    data = Path(path).read_bytes()
    if data[:4] != TDIT_MAGIC:
        raise ValueError(f"{path}: bad TDIT magic")
    version, depth, dim, heads, patch, vocab, step = struct.unpack_from("<7I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported TDIT version {version}")
    (count,) = struct.unpack_from("<I", data, 32)
    pos = 36
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        name = data[pos + 4 : pos + 4 + n].decode()
        pos += 4 + n
        (ndim,) = struct.unpack_from("<I", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    model = ToyDiT(DiTConfig(depth=depth, dim=dim, heads=heads, patch=patch, vocab=vocab))
    model.load_state_dict({k: v for k, v in tensors.items() if "/" not in k})
    model.eval()
    opt_state = None
    if any(k.startswith("opt/") for k in tensors):
        names = [n for n, _ in model.named_parameters()]
        state = {}
        for i, n in enumerate(names):
            state[i] = {
                "step": tensors[f"opt/{n}/step"].reshape(()),
                "exp_avg": tensors[f"opt/{n}/exp_avg"],
                "exp_avg_sq": tensors[f"opt/{n}/exp_avg_sq"],
            }
        opt_state = {"state": state}
    losses = tensors["log/loss"].tolist() if "log/loss" in tensors else []
    return model, step, opt_state, losses
