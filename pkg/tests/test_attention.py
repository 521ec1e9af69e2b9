import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from saber.attention import MaskedAttention, lane_attention, vv_self_attention


def _attn(dim=16, heads=4, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return MaskedAttention(2, 2, dim, heads).to(dtype)


def test_single_key_returns_its_value_projection():
    attn = _attn()
    q, k = torch.randn(5, 2), torch.randn(5, 1, 2)
    out, w = attn(q, k, torch.ones(5, 1, dtype=torch.bool), return_weights=True)
    assert torch.all(w == 1)
    expected = attn.merge(attn.f_v(k[:, 0]))
    torch.testing.assert_close(out, expected)


def test_all_masked_gives_zero_vector():
    attn = _attn()
    out, w = attn(torch.randn(3, 2), torch.randn(3, 4, 2), torch.zeros(3, 4, dtype=torch.bool), return_weights=True)
    assert torch.equal(out, torch.zeros(3, 16))
    assert torch.equal(w, torch.zeros(3, 4, 4))


def test_empty_key_set():
    attn = _attn()
    out = attn(torch.randn(3, 2), torch.randn(3, 0, 2), torch.zeros(3, 0, dtype=torch.bool))
    assert torch.equal(out, torch.zeros(3, 16))


def test_identical_keys_give_uniform_weights():
    attn = _attn()
    k = torch.randn(1, 2).expand(6, 2)[None]
    _, w = attn(torch.randn(1, 2), k, torch.ones(1, 6, dtype=torch.bool), return_weights=True)
    torch.testing.assert_close(w, torch.full_like(w, 1 / 6))


def test_weights_sum_to_one_over_unmasked():
    attn = _attn()
    mask = torch.tensor([[True, False, True, True], [False, True, False, False]])
    _, w = attn(torch.randn(2, 2), torch.randn(2, 4, 2), mask, return_weights=True)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 4))
    assert torch.all(w.masked_select(~mask[:, None, :].expand_as(w)) == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(0, 10_000))
def test_key_permutation_invariance(m, seed):
    g = torch.Generator().manual_seed(seed)
    attn = _attn()
    q, k = torch.randn(2, generator=g), torch.randn(m, 2, generator=g) * 10
    mask = torch.rand(m, generator=g) > 0.3
    perm = torch.randperm(m, generator=g)
    a = attn(q, k, mask)
    b = attn(q, k[perm], mask[perm])
    assert torch.allclose(a, b, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000))
def test_masked_keys_have_no_influence(m, seed):
    g = torch.Generator().manual_seed(seed)
    attn = _attn()
    q, k = torch.randn(2, generator=g), torch.randn(m, 2, generator=g)
    mask = torch.rand(m, generator=g) > 0.5
    k2 = torch.where(mask[:, None], k, torch.randn(m, 2, generator=g) * 1e4)
    assert torch.equal(attn(q, k, mask), attn(q, k2, mask))


def test_huge_masked_values_stay_finite():
    attn = _attn()
    k = torch.tensor([[[1.0, 0.0], [float("inf"), float("nan")]]])
    out = attn(torch.randn(1, 2), k, torch.tensor([[True, False]]))
    assert torch.isfinite(out).all()


def test_gradient_matches_finite_difference():
    attn = _attn(dim=8, heads=2, dtype=torch.float64)
    q = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    k = torch.randn(3, 4, 2, dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=torch.bool)
    assert torch.autograd.gradcheck(lambda q, k: attn(q, k, mask), (q, k), atol=1e-4, rtol=1e-4)


def test_dim_must_divide_heads():
    with pytest.raises(ValueError):
        MaskedAttention(2, 2, 10, 4)


def test_wrappers_shapes():
    attn = _attn()
    X = torch.randn(2, 3, 5, 2)
    R = torch.randn(2, 3, 5, 3, 2)
    nbr = torch.ones(2, 3, 5, 3, dtype=torch.bool)
    assert vv_self_attention(X, R, nbr, attn).shape == (2, 3, 5, 16)
    L = torch.randn(2, 3, 5, 3, 2)
    assert lane_attention(X, L, nbr, attn).shape == (2, 3, 5, 16)
    with pytest.raises(ValueError):
        lane_attention(X, L[..., :2, :], nbr[..., :2], attn)
