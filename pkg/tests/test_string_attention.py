import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clamp import string_attention as sa
from clamp.diffcore import ShapeError, grad_check, module_graph, ParamStore

F64 = torch.float64


def random_setup(d, seed, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    skew = sa.skew_from_vector(torch.randn(d * (d - 1) // 2, generator=g, dtype=F64) * scale, d)
    P = sa.cayley_orthogonal(skew)
    freq = torch.randn(d // 2, 3, generator=g, dtype=F64) * 3
    return g, P, freq


def test_cayley_2x2_matches_closed_form():
    s = 0.3
    S = torch.tensor([[0.0, s], [-s, 0.0]], dtype=F64)
    P = sa.cayley_orthogonal(S)
    theta = 2 * math.atan(s)
    # (I - S)(I + S)^-1 for this generator
    expected = torch.tensor([[math.cos(theta), -math.sin(theta)],
                             [math.sin(theta), math.cos(theta)]], dtype=F64)
    assert torch.allclose(P, expected, atol=1e-15)


def test_cayley_zero_generator_is_identity():
    assert torch.equal(sa.cayley_orthogonal(torch.zeros(6, 6, dtype=F64)), torch.eye(6, dtype=F64))


@settings(max_examples=40, deadline=None)
@given(d=st.sampled_from([2, 4, 8, 16]), seed=st.integers(0, 10_000), scale=st.floats(0.01, 20.0))
def test_cayley_is_special_orthogonal(d, seed, scale):
    _, P, _ = random_setup(d, seed, scale)
    assert (P.T @ P - torch.eye(d, dtype=F64)).abs().max() < 1e-9
    assert float(torch.linalg.det(P)) == pytest.approx(1.0, abs=1e-9)


def test_cayley_rejects_ill_conditioned_generator():
    S = torch.zeros(4, 4, dtype=F64)
    S[0, 1], S[1, 0] = 1e13, -1e13
    with pytest.raises(sa.SingularGeneratorError):
        sa.cayley_orthogonal(S)


def test_skew_from_vector_is_exactly_antisymmetric():
    S = sa.skew_from_vector(torch.randn(28, dtype=F64), 8)
    assert torch.equal(S + S.T, torch.zeros(8, 8, dtype=F64))


def test_rope_zero_coords_identity_and_norm_preserving():
    v = torch.randn(5, 8, dtype=F64)
    freq = torch.randn(4, 3, dtype=F64)
    assert torch.equal(sa.rope_rotate(v, torch.zeros(5, 3, dtype=F64), freq), v)
    r = torch.randn(5, 3, dtype=F64)
    out = sa.rope_rotate(v, r, freq)
    blocks_in = v.reshape(5, 4, 2).norm(dim=-1)
    blocks_out = out.reshape(5, 4, 2).norm(dim=-1)
    assert torch.allclose(blocks_in, blocks_out, atol=1e-14)


def test_rope_quarter_turn():
    v = torch.tensor([1.0, 0.0], dtype=F64)
    freq = torch.tensor([[math.pi / 2, 0.0, 0.0]], dtype=F64)
    out = sa.rope_rotate(v, torch.tensor([1.0, 0.0, 0.0], dtype=F64), freq)
    assert torch.allclose(out, torch.tensor([0.0, 1.0], dtype=F64), atol=1e-15)


def test_rope_rejects_odd_dim():
    with pytest.raises(ShapeError):
        sa.rope_rotate(torch.zeros(3), torch.zeros(3), torch.zeros(1, 3))


def test_apply_string_matches_matrix_form():
    _, P, freq = random_setup(8, 1)
    v = torch.randn(8, dtype=F64)
    r = torch.randn(3, dtype=F64)
    angles = freq @ r
    rope = torch.zeros(8, 8, dtype=F64)
    for k, a in enumerate(angles):
        rope[2 * k:2 * k + 2, 2 * k:2 * k + 2] = torch.tensor(
            [[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]], dtype=F64)
    expected = P @ rope @ P.T @ v
    assert torch.allclose(sa.apply_string(v, r, P, freq), expected, atol=1e-13)


def test_apply_string_zero_coordinate_is_bit_exact_identity():
    _, P, freq = random_setup(8, 2)
    v = torch.randn(4, 8, dtype=F64)
    assert torch.equal(sa.apply_string(v, torch.zeros(4, 3, dtype=F64), P, freq), v)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_scores_depend_only_on_relative_position(seed):
    g, P, freq = random_setup(8, seed)
    Q = torch.randn(6, 8, generator=g, dtype=F64)
    K = torch.randn(6, 8, generator=g, dtype=F64)
    r = torch.randn(6, 3, generator=g, dtype=F64)
    shift = torch.randn(3, generator=g, dtype=F64)
    a = sa.attention_scores(Q, K, r, P, freq)
    b = sa.attention_scores(Q, K, r + shift, P, freq)
    assert torch.allclose(a, b, atol=1e-10)


def test_zero_frequencies_reduce_to_plain_dot_products():
    _, P, _ = random_setup(8, 3)
    Q, K = torch.randn(5, 8, dtype=F64), torch.randn(5, 8, dtype=F64)
    r = torch.randn(5, 3, dtype=F64)
    assert torch.equal(sa.attention_scores(Q, K, r, P, torch.zeros(4, 3, dtype=F64)), Q @ K.T)


def test_invalid_patches_use_origin():
    _, P, freq = random_setup(4, 4)
    Q, K = torch.randn(3, 4, dtype=F64), torch.randn(3, 4, dtype=F64)
    r = torch.randn(3, 3, dtype=F64)
    valid = torch.tensor([True, False, True])
    r0 = r.clone()
    r0[1] = 0
    assert torch.equal(sa.attention_scores(Q, K, r, P, freq, valid), sa.attention_scores(Q, K, r0, P, freq))


@pytest.mark.parametrize("d", [4, 8, 64])
def test_lemma1_closed_form(d):
    g, P, freq = random_setup(d, d)
    for _ in range(20):
        q, k = torch.randn(d, generator=g, dtype=F64), torch.randn(d, generator=g, dtype=F64)
        ri, rj = torch.randn(3, generator=g, dtype=F64), torch.randn(3, generator=g, dtype=F64)
        direct = sa.apply_string(q, ri, P, freq) @ sa.apply_string(k, rj, P, freq)
        closed = sa.score_lemma1(q, k, rj - ri, P, freq)
        assert abs(float(direct - closed)) < 1e-9 * max(1.0, abs(float(direct)))


def test_lemma1_zero_displacement_is_dot_product():
    _, P, freq = random_setup(8, 9)
    q, k = torch.randn(8, dtype=F64), torch.randn(8, dtype=F64)
    assert abs(float(sa.score_lemma1(q, k, torch.zeros(3, dtype=F64), P, freq) - q @ k)) < 1e-12


def test_block_angle_max():
    x = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=F64)
    y = torch.tensor([0.0, 1.0, 1.0, 1.0], dtype=F64)
    assert float(sa.block_angle_max(x, y)) == pytest.approx(math.pi / 2)
    with pytest.raises(ValueError):
        sa.block_angle_max(torch.zeros(4, dtype=F64), y)
    with pytest.raises(ShapeError):
        sa.block_angle_max(torch.ones(3), torch.ones(3))


def test_lemma2_probe_decreasing():
    report = sa.lemma2_probe(sa.Lemma2ProbeConfig(), seed=0)
    assert report.strictly_decreasing
    assert report.cosine >= 1 - report.epsilon - 1e-12


def test_lemma2_probe_equal_keys():
    report = sa.lemma2_probe(sa.Lemma2ProbeConfig(key_mode="equal", phi=math.pi / 6), seed=1)
    assert report.strictly_decreasing
    assert report.max_block_angle == 0.0


def test_lemma2_probe_config_validation():
    with pytest.raises(ValueError):
        sa.Lemma2ProbeConfig(phi=2.0).validate()
    with pytest.raises(ValueError):
        sa.Lemma2ProbeConfig(eta_grid=(0.0, 10.0)).validate()


def test_string_params_gradients():
    params = sa.StringParams(4).double()
    with torch.no_grad():
        params.skew.normal_()
        params.freq.mul_(0.05)
    Q, K = torch.randn(3, 4, dtype=F64), torch.randn(3, 4, dtype=F64)
    r = torch.randn(3, 3, dtype=F64) * 0.3
    graph = module_graph(params, lambda m, inp: sa.attention_scores(
        inp["Q"], inp["K"], inp["r"], m.orthogonal(), m.freq).square().sum())
    report = grad_check(graph, {"Q": Q, "K": K, "r": r}, ParamStore.from_module(params))
    assert report.passed(1e-4), report.per_param
