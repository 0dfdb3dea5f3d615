import hashlib

import numpy as np
import pytest
import torch

from tokenswap.dit import DiTConfig, ToyDiT, dit_forward, image_to_tokens, patchify, unpatchify
from tokenswap.errors import DimensionError, ParameterError
from tokenswap.rope import assign_positions
from tokenswap.sprites import (
    BACKGROUNDS,
    analytic_centroid,
    generate_sprite_dataset,
    read_attributes,
)
from tokenswap.training import OptimizerConfig, draw_flow_inputs, flow_matching_loss, smoothed, train


def test_patchify_shapes_and_inverse():
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    tokens = patchify(img)
    assert tokens.shape == (16, 16, 12)
    assert torch.equal(unpatchify(tokens), torch.from_numpy(img))
    flat = np.broadcast_to(np.array([0.2, 0.5, 0.7], np.float32), (32, 32, 3))
    t = patchify(flat)
    assert torch.equal(t, t[0, 0].expand_as(t))
    with pytest.raises(ParameterError):
        patchify(np.zeros((5, 6, 3), np.float32))


def test_config_rejects_bad_head_split():
    with pytest.raises(ParameterError):
        DiTConfig(dim=20, heads=2)


def test_zero_weights_give_zero_velocity():
    m = ToyDiT(DiTConfig(depth=1, dim=16, heads=1))
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    x = torch.randn(2, 16, 16, 12)
    assert torch.equal(m(x, 0.5, torch.tensor([0, 3, 9, 15])), torch.zeros_like(x))


def test_masked_reference_keys_match_no_reference(small_model):
    x = torch.randn(2, 16, 16, 12)
    ref = torch.randn(16, 16, 12)
    plain = small_model(x, 0.4, torch.tensor([1, 4, 10, 16]))
    masked = small_model(
        x, 0.4, torch.tensor([1, 4, 10, 16]), [(ref, assign_positions((16, 16)))], mask_reference_keys=True
    )
    assert torch.allclose(plain, masked, atol=1e-5)
    shared = dit_forward(small_model, x, 0.4, torch.tensor([1, 4, 10, 16]), (ref, assign_positions((16, 16))))
    assert shared.shape == x.shape
    assert not torch.allclose(plain, shared, atol=1e-5)


def test_forward_is_deterministic(small_model):
    x = torch.randn(1, 16, 16, 12, generator=torch.Generator().manual_seed(9))
    digest = {hashlib.sha256(small_model(x, 0.3, [2, 5, 11, 20]).detach().numpy().tobytes()).hexdigest() for _ in range(3)}
    assert len(digest) == 1


def test_unknown_vocabulary_id(small_model):
    with pytest.raises(ParameterError):
        small_model(torch.zeros(1, 16, 16, 12), 0.5, [0, 3, 9, 99])
    with pytest.raises(DimensionError):
        small_model(torch.zeros(1, 16, 16, 7), 0.5, [0, 3, 9, 15])


def test_loss_zero_for_exact_predictor_and_scalar_oracle():
    data = torch.randn(1, 4, 4, 12)
    prompts = torch.tensor([[0, 3, 9, 15]])

    class Exact(torch.nn.Module):
        def parameters(self):
            return iter([torch.zeros(1)])

        def __call__(self, x_t, t, prompt):
            tt = t[:, None, None, None]
            return (x_t - data) / tt

    assert float(flow_matching_loss(Exact(), (data, prompts), noise_seed=3)) == pytest.approx(0.0, abs=1e-8)

    class Zero(Exact):
        def __call__(self, x_t, t, prompt):
            return torch.zeros_like(x_t)

    _, noise, _ = draw_flow_inputs(data, 3)
    want = float(((noise - data) ** 2).mean())
    assert float(flow_matching_loss(Zero(), (data, prompts), noise_seed=3)) == pytest.approx(want, rel=1e-6)


def test_gradients_match_central_differences():
    torch.manual_seed(0)
    m = ToyDiT(DiTConfig(depth=2, dim=16, heads=1)).double()
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    samples = generate_sprite_dataset(2, seed=5)
    data = image_to_tokens(np.stack([s.image[:8, :8] for s in samples])).double()
    prompts = torch.tensor([s.prompt for s in samples])
    batch = (data, prompts)

    loss = flow_matching_loss(m, batch, noise_seed=7, dropout_prob=0.0)
    params = list(m.parameters())
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(2)
    sizes = np.array([p.numel() for p in params])
    checked, worst = 0, 0.0
    eps = 1e-6
    for _ in range(120):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        i = int(rng.integers(params[k].numel()))
        flat = params[k].data.view(-1)
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + eps
            up = float(flow_matching_loss(m, batch, 7, 0.0))
            flat[i] = orig - eps
            down = float(flow_matching_loss(m, batch, 7, 0.0))
            flat[i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = float(grads[k].reshape(-1)[i])
        scale = max(abs(numeric), abs(analytic))
        if scale < 1e-7:
            continue
        worst = max(worst, abs(numeric - analytic) / scale)
        checked += 1
    assert checked >= 100
    assert worst <= 1e-3


def test_zero_learning_rate_keeps_params():
    m = ToyDiT(DiTConfig(depth=1, dim=16, heads=1))
    before = {k: v.clone() for k, v in m.state_dict().items()}
    samples = generate_sprite_dataset(8, seed=0)
    data = image_to_tokens(np.stack([s.image for s in samples]))
    prompts = torch.tensor([s.prompt for s in samples])
    train(m, (data, prompts), OptimizerConfig(steps=3, batch_size=2, learning_rate=0.0, warmup=0), log_every=0)
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k])


def test_training_resumes_bit_exactly():
    samples = generate_sprite_dataset(16, seed=1)
    data = (image_to_tokens(np.stack([s.image for s in samples])), torch.tensor([s.prompt for s in samples]))
    cfg = OptimizerConfig(steps=6, batch_size=2, warmup=2)

    def fresh():
        m = ToyDiT(DiTConfig(depth=1, dim=16, heads=1))
        m.reset_parameters(torch.Generator().manual_seed(0))
        return m

    full, s_full = train(fresh(), data, cfg, log_every=0)
    half, s_half = train(fresh(), data, cfg, log_every=0, until=3)
    assert s_half.step == 3
    resumed, s_res = train(half, data, cfg, s_half, log_every=0)
    assert s_res.losses == s_full.losses
    for (k, a), b in zip(full.state_dict().items(), resumed.state_dict().values()):
        assert torch.equal(a, b), k


def test_smoothed_is_trailing_mean():
    x = np.arange(10.0)
    s = smoothed(x, window=3)
    assert s[0] == 0 and s[1] == 0.5 and s[5] == 4.0


# --- sprites ---------------------------------------------------------------------------


def test_dataset_deterministic_and_masks_nonempty():
    a = generate_sprite_dataset(30, seed=2)
    b = generate_sprite_dataset(30, seed=2)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and x.prompt == y.prompt
        assert x.mask.sum() > 0


def test_rendered_centroid_matches_placement():
    for s in generate_sprite_dataset(60, seed=3):
        h, w = s.image.shape[:2]
        cover = np.abs(s.image - np.array(BACKGROUNDS[s.background])).max(-1) > 0.05
        ys, xs = np.mgrid[0:h, 0:w] + 0.5
        cx = float((cover * xs).sum() / cover.sum())
        cy = float((cover * ys).sum() / cover.sum())
        ax, ay = analytic_centroid(s.shape, s.center, s.size)
        assert abs(cx - ax) <= 1.0 and abs(cy - ay) <= 1.0


def test_attribute_reader_on_ground_truth():
    for s in generate_sprite_dataset(200, seed=9):
        got = read_attributes(s.image)
        assert (got["shape"], got["color"], got["background"]) == (s.shape, s.color, s.background)


# --- trained-model properties -------------------------------------------------------


def test_timestep_modulation_is_live(model):
    x = torch.randn(1, 16, 16, 12, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        a = model(x, 0.1, [0, 3, 9, 15])
        b = model(x, 0.9, [0, 3, 9, 15])
    assert float((a - b).abs().max()) > 1e-6


def test_color_token_steers_subject_color(model):
    from tokenswap.flow import FlowSchedule, sample
    from tokenswap.dit import tokens_to_image
    from tokenswap.sprites import COLORS, mean_subject_color, encode_prompt

    z = torch.randn(8, 16, 16, 12, generator=torch.Generator().manual_seed(4))
    red = torch.tensor([encode_prompt(["square", "red", "black", "tex1"])] * 8)
    blue = torch.tensor([encode_prompt(["square", "blue", "black", "tex1"])] * 8)
    target = np.array(COLORS["blue"])
    dist = []
    for p in (red, blue):
        imgs = tokens_to_image(sample(model, z, p, FlowSchedule(50, 3.5)).endpoint)
        dist.append(np.mean([np.linalg.norm(mean_subject_color(im) - target) for im in imgs]))
    assert dist[1] < dist[0]
