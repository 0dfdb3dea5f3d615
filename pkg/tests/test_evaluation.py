import numpy as np
import pytest
import torch

from tokenswap.errors import ParameterError
from tokenswap.evaluation import (
    AblationReport,
    AblationRow,
    ablation_cases,
    masked_similarity,
    prompt_consistency,
    region_similarity,
    run_position_probe,
    run_tau_ablation,
)
from tokenswap.flow import FlowSchedule
from tokenswap.personalize import prepare_reference
from tokenswap.sprites import BACKGROUNDS, COLORS, VOCAB, generate_sprite_dataset, make_sample


def _pixel_mask(mask):
    m = np.asarray(mask)
    return m.repeat(2, 0).repeat(2, 1)


def test_self_similarity_is_one(small_model):
    for s in generate_sprite_dataset(5, seed=1):
        assert region_similarity(small_model, s.image, s.mask, s.image, s.mask) >= 0.999


def test_similarity_ignores_pixels_outside_mask(small_model):
    s = make_sample(np.random.default_rng(2))
    other = s.image.copy()
    noise = np.random.default_rng(3).random(other.shape).astype(np.float32)
    outside = ~_pixel_mask(s.mask)
    other[outside] = noise[outside]
    assert region_similarity(small_model, s.image, s.mask, other, s.mask) >= 0.999


def test_similarity_symmetric_and_bounded(small_model):
    a, b = generate_sprite_dataset(2, seed=4)
    ab = region_similarity(small_model, a.image, a.mask, b.image, b.mask)
    ba = region_similarity(small_model, b.image, b.mask, a.image, a.mask)
    assert ab == pytest.approx(ba, abs=1e-9)
    assert 0.0 <= ab <= 1.0
    with pytest.raises(ParameterError):
        region_similarity(small_model, a.image, np.zeros((16, 16), bool), b.image, b.mask)


def test_masked_similarity_batches(small_model):
    s = make_sample(np.random.default_rng(5))
    bundle = prepare_reference(small_model, s.image, s.mask, s.prompt, FlowSchedule(4))
    one = masked_similarity(small_model, s.image, bundle)
    many = masked_similarity(small_model, np.stack([s.image, s.image]), bundle)
    assert one >= 0.999 and many.shape == (2,)
    assert np.allclose(many, one, atol=1e-9)


def test_prompt_consistency_cases():
    s = make_sample(np.random.default_rng(6), shape="square", color="red", background="white")
    assert prompt_consistency(s.image, s.prompt) == 1.0
    wrong_color = (s.prompt[0], VOCAB.index("blue"), s.prompt[2], s.prompt[3])
    assert prompt_consistency(s.image, wrong_color) == pytest.approx(2 / 3)
    all_wrong = (VOCAB.index("circle"), VOCAB.index("blue"), VOCAB.index("bg-black"), s.prompt[3])
    assert prompt_consistency(s.image, all_wrong) == 0.0
    batch = prompt_consistency(np.stack([s.image, s.image]), s.prompt)
    assert list(batch) == [1.0, 1.0]


def test_ablation_cases_conflict_with_reference():
    for case in ablation_cases(range(20)):
        ref = case.reference
        assert case.prompt[0] == ref.prompt[0] and case.prompt[3] == ref.prompt[3]
        assert case.prompt[1] != ref.prompt[1] and case.prompt[2] != ref.prompt[2]
    a = ablation_cases([3, 4])
    b = ablation_cases([3, 4])
    assert [c.prompt for c in a] == [c.prompt for c in b]


def test_ablation_report_statistics():
    rows = [
        AblationRow(tau, False, np.full(4, sim), np.full(4, pc))
        for tau, sim, pc in [(1.0, 0.1, 0.9), (0.9, 0.2, 0.8), (0.8, 0.3, 0.7)]
    ]
    rows.append(AblationRow(0.8, True, np.full(4, 0.25), np.full(4, 0.75)))
    report = AblationReport(rows, [0, 1, 2, 3])
    assert report.spearman() == pytest.approx((-1.0, 1.0))
    lines = report.to_csv().splitlines()
    assert lines[0].startswith("tau,perturbation") and len(lines) == 5
    assert "spearman" in report.summary()


def test_small_ablation_runs(small_model):
    report = run_tau_ablation(small_model, seeds=[0, 1], taus=(1.0, 0.5), schedule=FlowSchedule(4))
    assert [(r.tau, r.perturbed) for r in report.rows] == [(1.0, False), (0.5, False), (0.8, True)]
    for r in report.rows:
        assert r.similarity.shape == (2,) and np.all((0 <= r.similarity) & (r.similarity <= 1))


def test_probe_is_deterministic_and_thread_invariant(small_model):
    sched = FlowSchedule(10)
    kw = dict(samples=4, timesteps=(0.9, 0.5), schedule=sched, chunk=2)
    a = run_position_probe(small_model, **kw)
    b = run_position_probe(small_model, jobs=2, **kw)
    assert a.scores == b.scores
    assert set(a.scores) == {"original", "zero", "shifted"}
    assert a.sequence_length == 256 + 256 + 4
    assert a.heatmaps["zero"].shape == (16, 32)
    assert a.to_csv().splitlines()[0] == "strategy,score,t=0.90,t=0.50,samples"
    with pytest.raises(ParameterError):
        run_position_probe(small_model, samples=1, timesteps=(0.33,), schedule=sched)
