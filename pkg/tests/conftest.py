import hashlib
import json
import os
from pathlib import Path

import pytest
import torch

import tokenswap
from tokenswap.dit import DiTConfig, ToyDiT
from tokenswap.io import load_checkpoint, save_checkpoint
from tokenswap.training import DatasetConfig, OptimizerConfig, train

SOURCES = ("dit.py", "rope.py", "training.py", "sprites.py")


def _source_key() -> str:
    root = Path(tokenswap.__file__).parent
    digest = hashlib.sha256()
    for name in SOURCES:
        digest.update((root / name).read_bytes())
    digest.update(repr(OptimizerConfig()).encode())
    return digest.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained(request):
    """Default-config model trained once and cached across sessions.

    The cache is keyed by the model/training sources, so editing them retrains.
    Set TOKENSWAP_RETRAIN=1 to force a fresh run.
    """
    folder = Path(request.config.cache.mkdir("tokenswap-model"))
    key = _source_key()
    ckpt, meta = folder / f"{key}.tdit", folder / f"{key}.json"
    if ckpt.exists() and meta.exists() and not os.environ.get("TOKENSWAP_RETRAIN"):
        model, step, _, losses = load_checkpoint(ckpt)
        info = json.loads(meta.read_text())
        return {"model": model, "losses": losses, "seconds": info["seconds"], "steps": step, "cached": True}
    model = ToyDiT(DiTConfig())
    model.reset_parameters(torch.Generator().manual_seed(0))
    model, state = train(model, DatasetConfig(), OptimizerConfig(), log_every=0)
    save_checkpoint(ckpt, model, state.step, None, state.losses)
    meta.write_text(json.dumps({"seconds": state.seconds}))
    return {"model": model, "losses": state.losses, "seconds": state.seconds, "steps": state.step, "cached": False}


@pytest.fixture(scope="session")
def model(trained):
    return trained["model"]


@pytest.fixture
def small_model():
    m = ToyDiT(DiTConfig(depth=2, dim=32, heads=2))
    gen = torch.Generator().manual_seed(3)
    m.reset_parameters(gen)
    # adaLN-zero leaves an untrained net constant; give every weight a value so tests see real mixing
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen))
    return m.eval()
