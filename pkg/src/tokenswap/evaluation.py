"""Toy-scale metrics, the tau/perturbation ablation and the position probe."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from scipy.stats import spearmanr

from ._validation import as_mask
from .dit import ToyDiT, image_to_tokens
from .errors import ParameterError
from .flow import FlowSchedule, invert, sample
from .personalize import Perturbation, PersonalizeRequest, ReferenceBundle, personalize, prepare_reference
from .rope import STRATEGIES, assign_positions, default_pairing, grid_coords, matched_position_score
from .sprites import COLORS, BACKGROUNDS, SHAPES, VOCAB, generate_sprite_dataset, make_sample, read_attributes

ABLATION_TAUS = (1.0, 0.95, 0.9, 0.8, 0.7)
ABLATION_PERTURBATION = Perturbation(shuffle=True, morphology="dilate", kernel=5, seed=0)


# --- metrics ----------------------------------------------------------------

@torch.no_grad()
def region_features(model: ToyDiT, tokens, mask) -> torch.Tensor:
    """Mean-pooled penultimate-block features of the tokens under ``mask``.

    Only the masked tokens enter the transformer (at their own positions, with
    the null prompt, at ``t = 0``), so content outside the mask cannot leak in.
    """
    mask = as_mask(mask)
    if not bool(mask.any()):
        raise ParameterError("similarity mask is empty")
    tokens = torch.as_tensor(tokens, dtype=next(model.parameters()).dtype)
    single = tokens.ndim == 3
    tokens = tokens[None] if single else tokens
    flat = mask.reshape(-1)
    seq = tokens.reshape(tokens.shape[0], -1, tokens.shape[-1])[:, flat]
    coords = grid_coords(*mask.shape)[flat]
    hidden = model.forward_sequence(seq, coords, 0.0, None, return_hidden=True)
    feats = hidden[max(0, len(hidden) - 2)].mean(dim=1)
    return feats[0] if single else feats


def _cosine01(a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
    cos = torch.nn.functional.cosine_similarity(a.double(), b.double(), dim=-1)
    return ((cos + 1.0) / 2.0).clamp(0.0, 1.0).numpy()


def region_similarity(model: ToyDiT, image_a, mask_a, image_b, mask_b) -> np.ndarray:
    """Symmetric masked-region similarity of two images, in [0, 1]."""
    fa = region_features(model, image_to_tokens(np.asarray(image_a)), mask_a)
    fb = region_features(model, image_to_tokens(np.asarray(image_b)), mask_b)
    return _cosine01(fa, fb)


def masked_similarity(model: ToyDiT, generated, bundle: ReferenceBundle, target_mask=None):
    """Identity score of the generated region under ``target_mask`` against the reference subject.

    ``generated`` may be one image or a batch; the result is a float or an array.
    """
    target = bundle.mask if target_mask is None else as_mask(target_mask)
    gen = region_features(model, image_to_tokens(np.asarray(generated)), target)
    ref = region_features(model, bundle.tokens, bundle.mask)
    out = _cosine01(gen, ref.expand_as(gen))
    return float(out) if out.ndim == 0 else out


def prompt_consistency(generated, prompt):
    """Fraction of the prompt's shape / subject color / background realized in the image."""
    images = np.asarray(generated)
    prompts = np.asarray(prompt)
    if images.ndim == 3:
        return _consistency_one(images, prompts)
    if prompts.ndim == 1:
        prompts = np.broadcast_to(prompts, (images.shape[0], prompts.shape[0]))
    return np.array([_consistency_one(im, p) for im, p in zip(images, prompts)])


def _consistency_one(image, prompt) -> float:
    got = read_attributes(image)
    want = {"shape": VOCAB[prompt[0]], "color": VOCAB[prompt[1]], "background": VOCAB[prompt[2]][3:]}
    return float(np.mean([got[k] == want[k] for k in want]))


# --- tau ablation -------------------------------------------------------------

@dataclass
class AblationRow:
    tau: float
    perturbed: bool
    similarity: np.ndarray
    consistency: np.ndarray

    @property
    def similarity_mean(self) -> float:
        return float(self.similarity.mean())

    @property
    def consistency_mean(self) -> float:
        return float(self.consistency.mean())


@dataclass
class AblationReport:
    rows: list[AblationRow]
    seeds: list[int]

    def baseline_rows(self) -> list[AblationRow]:
        return [r for r in self.rows if not r.perturbed]

    def spearman(self) -> tuple[float, float]:
        """Rank correlation of tau with (similarity means, consistency means)."""
        rows = self.baseline_rows()
        taus = [r.tau for r in rows]
        rho_sim = spearmanr(taus, [r.similarity_mean for r in rows]).statistic
        rho_pc = spearmanr(taus, [r.consistency_mean for r in rows]).statistic
        return float(rho_sim), float(rho_pc)

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["tau", "perturbation", "similarity_mean", "similarity_std", "consistency_mean", "consistency_std", "n"])
        for r in self.rows:
            out.writerow([
                f"{r.tau:.2f}", int(r.perturbed),
                f"{r.similarity_mean:.6f}", f"{r.similarity.std():.6f}",
                f"{r.consistency_mean:.6f}", f"{r.consistency.std():.6f}", len(r.similarity),
            ])
        return buf.getvalue()

    def summary(self) -> str:
        rho_sim, rho_pc = self.spearman()
        lines = [f"tau ablation over {len(self.seeds)} seeds"]
        for r in self.rows:
            tag = "perturbed" if r.perturbed else "plain"
            lines.append(f"  tau={r.tau:.2f} {tag:9s} similarity={r.similarity_mean:.4f} consistency={r.consistency_mean:.4f}")
        lines.append(f"spearman(tau, similarity)={rho_sim:+.3f} spearman(tau, consistency)={rho_pc:+.3f}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class AblationCase:
    reference: object  # SpriteSample
    prompt: tuple[int, ...]
    seed: int


def ablation_cases(seeds: Sequence[int], reference_seed: int = 1000) -> list[AblationCase]:
    """One reference sprite and a conflicting target prompt per seed.

    The target keeps the reference's shape and texture but asks for a different
    subject color and background, so identity and prompt pull apart.
    """
    cases = []
    colors, bgs = list(COLORS), list(BACKGROUNDS)
    for s in seeds:
        rng = np.random.default_rng([reference_seed, int(s)])
        ref = make_sample(rng)
        color = colors[(colors.index(ref.color) + 1 + int(rng.integers(5))) % 6]
        bg = bgs[(bgs.index(ref.background) + 1 + int(rng.integers(5))) % 6]
        prompt = (ref.prompt[0], VOCAB.index(color), VOCAB.index(f"bg-{bg}"), ref.prompt[3])
        cases.append(AblationCase(ref, prompt, int(s)))
    return cases


def run_tau_ablation(
    model: ToyDiT,
    cases: Sequence[AblationCase] | None = None,
    taus: Sequence[float] = ABLATION_TAUS,
    seeds: Sequence[int] = range(16),
    schedule: FlowSchedule = FlowSchedule(),
    perturbation: Perturbation | None = ABLATION_PERTURBATION,
    perturbed_tau: float = 0.8,
    jobs: int = 1,
) -> AblationReport:
    """Personalize every case at each tau (plus one perturbed row) and score it."""
    cases = list(cases) if cases is not None else ablation_cases(seeds)
    bundles = [
        prepare_reference(model, c.reference.image, c.reference.mask, c.reference.prompt, schedule) for c in cases
    ]
    cells = [(tau, Perturbation()) for tau in taus]
    if perturbation is not None:
        cells.append((perturbed_tau, perturbation))

    def run(cell):
        tau, pert = cell
        sims, pcs = [], []
        for case, bundle in zip(cases, bundles):
            req = PersonalizeRequest([(bundle, bundle.mask)], case.prompt, tau, pert, schedule)
            image, _ = personalize(model, req, seed=case.seed)
            sims.append(masked_similarity(model, image, bundle))
            pcs.append(prompt_consistency(image, case.prompt))
        return AblationRow(tau, pert.active, np.array(sims), np.array(pcs))

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            rows = list(pool.map(run, cells))
    else:
        rows = [run(c) for c in cells]
    return AblationReport(rows, [c.seed for c in cases])


# --- position probe -------------------------------------------------------------

@dataclass
class ProbeReport:
    scores: dict[str, float]
    per_timestep: dict[str, dict[float, float]]
    samples: int
    sequence_length: int
    heatmaps: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def uniform_baseline(self) -> float:
        return 1.0 / self.sequence_length

    def ratio(self, a: str = "original", b: str = "zero") -> float:
        return self.scores[a] / self.scores[b]

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        times = sorted(next(iter(self.per_timestep.values())), reverse=True)
        out.writerow(["strategy", "score", *[f"t={t:.2f}" for t in times], "samples"])
        for name, score in self.scores.items():
            out.writerow([name, f"{score:.6f}", *[f"{self.per_timestep[name][t]:.6f}" for t in times], self.samples])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"position probe over {self.samples} samples (uniform baseline {self.uniform_baseline:.5f})"]
        for name, score in self.scores.items():
            lines.append(f"  {name:9s} matched-position attention {score:.5f}")
        if "original" in self.scores:
            for other in self.scores:
                if other != "original":
                    lines.append(f"  original/{other} ratio {self.ratio('original', other):.2f}")
        return "\n".join(lines) + "\n"


@torch.no_grad()
def run_position_probe(
    model: ToyDiT,
    strategies: Sequence[str] = STRATEGIES,
    samples: int = 100,
    timesteps: Sequence[float] = (0.9, 0.7, 0.5, 0.3, 0.1),
    schedule: FlowSchedule = FlowSchedule(),
    seed: int = 0,
    chunk: int = 10,
    jobs: int = 1,
) -> ProbeReport:
    """Attention sharing under each reference-position strategy.

    Each sample inverts a dataset sprite and denoises fresh noise under the same
    prompt; at every probe time the denoising state attends jointly over
    itself, the time-matched reference tokens (placed by the strategy) and the
    text, and the matched-position score is averaged over samples.
    """
    grid = schedule.grid
    index = {}
    for t in timesteps:
        k = int(np.argmin([abs(g - t) for g in grid[:-1]]))
        if abs(grid[k] - t) > 1e-9:
            raise ParameterError(f"probe time {t} is not on the {schedule.steps}-step grid")
        index[t] = k
    data = generate_sprite_dataset(samples, seed)
    images = np.stack([s.image for s in data])
    prompts = torch.tensor([s.prompt for s in data])
    clean = image_to_tokens(images)
    h, w = clean.shape[1:3]
    pairing = default_pairing(h, w)
    gen = torch.Generator().manual_seed(int(seed) + 1)
    noise = torch.randn(clean.shape, generator=gen)
    centre = (h // 2) * w + w // 2

    def run_chunk(start):
        sl = slice(start, min(samples, start + chunk))
        n = clean[sl].shape[0]
        ref_traj = invert(model, clean[sl], prompts[sl], replace(schedule, guidance=1.0))
        gen_traj = sample(model, noise[sl], prompts[sl], schedule)
        part = {s: {} for s in strategies}
        heat = {s: torch.zeros(h, 2 * w, dtype=torch.float64) for s in strategies}
        seq_len = None
        for t, k in index.items():
            x_t = gen_traj.states[k]
            ref_t = ref_traj.states[schedule.steps - k]
            for strategy in strategies:
                pos = assign_positions((h, w), strategy)
                _, rec = model(x_t, t, prompts[sl], [(ref_t, pos)], record=True)
                part[strategy][t] = matched_position_score(rec, pairing) * n
                seq_len = rec.maps.shape[-1]
                q0, q1 = rec.segments["image"]
                r0, r1 = rec.segments["reference"]
                row = rec.maps[..., q0 + centre, :].double().mean(dim=(0, 2)).sum(0)
                heat[strategy][:, :w] += row[q0:q1].reshape(h, w)
                heat[strategy][:, w:] += row[r0:r1].reshape(h, w)
        return part, heat, seq_len

    starts = range(0, samples, chunk)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(run_chunk, starts))
    else:
        parts = [run_chunk(a) for a in starts]
    # reduce in chunk order so the sums do not depend on thread timing
    per_t = {s: {t: 0.0 for t in timesteps} for s in strategies}
    heat = {s: torch.zeros(h, 2 * w, dtype=torch.float64) for s in strategies}
    for part, hm, seq_len in parts:
        for s in strategies:
            heat[s] += hm[s]
            for t in timesteps:
                per_t[s][t] += part[s][t]
    per_t = {s: {t: v / samples for t, v in d.items()} for s, d in per_t.items()}
    scores = {s: float(np.mean(list(d.values()))) for s, d in per_t.items()}
    heatmaps = {s: (m / (samples * len(timesteps))).numpy() for s, m in heat.items()}
    return ProbeReport(scores, per_t, samples, seq_len, heatmaps)
