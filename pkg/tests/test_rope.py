import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenswap.errors import DimensionError, ParameterError
from tokenswap.rope import (
    AttentionRecord,
    AttentionWeights,
    Segment,
    assign_positions,
    default_pairing,
    grid_coords,
    matched_position_score,
    mm_attention,
    rope_rotate,
    text_positions,
)


def test_origin_is_identity():
    x = torch.randn(5, 16, dtype=torch.float64)
    assert torch.equal(rope_rotate(x, torch.zeros(5, 2)), x)


def test_hand_computed_d4():
    # d=4: pair 0 turns with i, pair 1 with j, both at frequency base**0 = 1
    x = torch.tensor([1.0, 0.0, 0.0, 1.0], dtype=torch.float64)
    out = rope_rotate(x, torch.tensor([1, 0]))
    want = torch.tensor([math.cos(1.0), math.sin(1.0), 0.0, 1.0], dtype=torch.float64)
    assert torch.allclose(out, want, atol=1e-12)
    out = rope_rotate(torch.tensor([0.0, 0.0, 1.0, 0.0], dtype=torch.float64), torch.tensor([0, 2]))
    assert torch.allclose(out, torch.tensor([0, 0, math.cos(2.0), math.sin(2.0)], dtype=torch.float64), atol=1e-12)


def test_frequencies_geometric_with_base_10000():
    d = 16
    coords = torch.tensor([1, 0])
    angles = []
    for m in range(d // 4):
        e = torch.zeros(d, dtype=torch.float64)
        e[2 * m] = 1.0
        r = rope_rotate(e, coords)
        angles.append(math.atan2(float(r[2 * m + 1]), float(r[2 * m])))
    want = [10000.0 ** (-m / (d // 4)) for m in range(d // 4)]
    assert angles == pytest.approx(want, abs=1e-12)


def test_dimension_must_divide_by_four():
    with pytest.raises(ParameterError):
        rope_rotate(torch.zeros(6), torch.zeros(2))


@settings(max_examples=100, deadline=None)
@given(st.integers(-40, 40), st.integers(-40, 40), st.integers(0, 2**31 - 1))
def test_norm_preserved(i, j, seed):
    x = torch.randn(32, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    y = rope_rotate(x, torch.tensor([i, j]))
    assert abs(float(y.norm() - x.norm())) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(
    st.tuples(st.integers(0, 20), st.integers(0, 20)),
    st.tuples(st.integers(0, 20), st.integers(0, 20)),
    st.tuples(st.integers(-15, 15), st.integers(-15, 15)),
    st.integers(0, 2**31 - 1),
)
def test_logit_depends_on_offset_only(p1, p2, shift, seed):
    gen = torch.Generator().manual_seed(seed)
    q, k = torch.randn(2, 16, generator=gen, dtype=torch.float64)
    a = torch.tensor(p1)
    b = torch.tensor(p2)
    s = torch.tensor(shift)
    before = rope_rotate(q, a) @ rope_rotate(k, b)
    after = rope_rotate(q, a + s) @ rope_rotate(k, b + s)
    assert abs(float(before - after)) <= 1e-6


def test_position_strategies():
    z = assign_positions((4, 5), "zero")
    assert not z.coords.any()
    o = assign_positions((2, 2), "original")
    assert set(map(tuple, o.coords.tolist())) == {(0, 0), (1, 0), (0, 1), (1, 1)}
    s = assign_positions((16, 16), "shifted")
    assert s.coords[:, 0].min() == 16 and s.coords[:, 0].max() == 31
    assert torch.equal(s.coords - assign_positions((16, 16)).coords, torch.tensor([16, 0]).expand(256, 2))
    assert not text_positions(4).coords.any()
    with pytest.raises(ParameterError):
        assign_positions((2, 2), "diagonal")


def _weights(dim=16, heads=2, seed=0):
    torch.manual_seed(seed)
    return AttentionWeights(dim, heads).double()


def test_single_token_returns_value_projection():
    w = _weights()
    x = torch.randn(1, 1, 16, dtype=torch.float64)
    (out,), _ = mm_attention([Segment("only", x, torch.tensor([[3, 4]]))], w)
    v = w.qkv(x)[..., 32:]
    assert torch.allclose(out, w.out(v), atol=1e-12)


def _segments(seed=1, B=2):
    gen = torch.Generator().manual_seed(seed)
    return [
        Segment("image", torch.randn(B, 9, 16, generator=gen, dtype=torch.float64), grid_coords(3, 3)),
        Segment("reference", torch.randn(B, 9, 16, generator=gen, dtype=torch.float64), assign_positions((3, 3), "shifted").coords),
        Segment("text", torch.randn(B, 4, 16, generator=gen, dtype=torch.float64), text_positions(4).coords),
    ]


def test_rows_stochastic_and_concatenation_oracle():
    w = _weights()
    segs = _segments()
    outs, rec = mm_attention(segs, w, record=True)
    assert torch.allclose(rec.maps.sum(-1), torch.ones(()).double(), atol=1e-5)
    assert rec.segments == {"image": (0, 9), "reference": (9, 18), "text": (18, 22)}
    joined = Segment("all", torch.cat([s.tokens for s in segs], 1), torch.cat([s.coords for s in segs]))
    (whole,), _ = mm_attention([joined], w)
    assert torch.allclose(torch.cat(outs, 1), whole, atol=1e-12)


def test_segment_permutation_equivariance():
    w = _weights()
    segs = _segments()
    a, _ = mm_attention(segs, w)
    b, _ = mm_attention([segs[2], segs[0], segs[1]], w)
    for x, y in zip(a, [b[1], b[2], b[0]]):
        assert torch.allclose(x, y, atol=1e-12)


def test_recorded_path_matches_fast_path():
    w = _weights()
    segs = _segments()
    fast, _ = mm_attention(segs, w)
    slow, _ = mm_attention(segs, w, record=True)
    for x, y in zip(fast, slow):
        assert torch.allclose(x, y, atol=1e-10)


def test_mismatched_segment_named():
    w = _weights()
    segs = _segments()
    segs[1] = Segment("reference", torch.zeros(2, 9, 8, dtype=torch.float64), segs[1].coords)
    with pytest.raises(DimensionError, match="reference"):
        mm_attention(segs, w)


def test_matched_score_uniform_and_perfect():
    L, n = 22, 9
    uniform = AttentionRecord(torch.full((2, 1, 3, L, L), 1.0 / L), {"image": (0, 9), "reference": (9, 18), "text": (18, 22)})
    assert matched_position_score(uniform, default_pairing(3, 3)) == pytest.approx(1.0 / L)
    perfect = torch.zeros(1, 1, 1, L, L)
    for c in range(n):
        perfect[..., c, 9 + c] = 1.0
    rec = AttentionRecord(perfect, uniform.segments)
    assert matched_position_score(rec, default_pairing(3, 3)) == pytest.approx(1.0)
    with pytest.raises(KeyError):
        matched_position_score(AttentionRecord(perfect, {"image": (0, 9)}), default_pairing(3, 3))


def test_matched_score_equals_brute_force():
    gen = torch.Generator().manual_seed(0)
    maps = torch.softmax(torch.randn(3, 2, 4, 22, 22, generator=gen, dtype=torch.float64), -1)
    rec = AttentionRecord(maps, {"image": (0, 9), "reference": (9, 18), "text": (18, 22)})
    pairing = torch.tensor([[c, (c * 4) % 9] for c in range(9)])
    total, count = 0.0, 0
    for layer in range(3):
        for b in range(2):
            for h in range(4):
                for q, k in pairing.tolist():
                    total += float(maps[layer, b, h, q, 9 + k])
                    count += 1
    assert matched_position_score(rec, pairing) == pytest.approx(total / count, abs=1e-12)


def test_zero_strategy_score_ignores_which_cell_is_paired():
    # with every reference token at (0,0), moving reference contents around the
    # grid and re-pairing accordingly leaves the score unchanged
    w = _weights()
    segs = _segments()
    zero = assign_positions((3, 3), "zero").coords
    perm = torch.tensor([4, 7, 0, 2, 8, 1, 6, 3, 5])
    plain = [segs[0], Segment("reference", segs[1].tokens, zero), segs[2]]
    moved = [segs[0], Segment("reference", segs[1].tokens[:, perm], zero), segs[2]]
    _, rec_a = mm_attention(plain, w, record=True)
    _, rec_b = mm_attention(moved, w, record=True)
    inverse = torch.argsort(perm)
    pairing = torch.stack((torch.arange(9), inverse), -1)
    a = matched_position_score(rec_a, default_pairing(3, 3))
    b = matched_position_score(rec_b, pairing)
    assert a == pytest.approx(b, abs=1e-12)


def test_attention_record_csv(tmp_path):
    rec = AttentionRecord(torch.full((1, 1, 2, 3, 3), 1 / 3), {"image": (0, 3)})
    path = tmp_path / "att.csv"
    rec.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,head,query,key,weight"
    assert len(lines) == 1 + 2 * 3 * 3
