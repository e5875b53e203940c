import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cutlab.cutoff import (
    CutoffKind,
    CutoffMask,
    CutoffSpec,
    apply_mask,
    make_views,
    mask_matrix,
    sample_feature_mask,
    sample_mask,
    sample_span_mask,
    sample_token_mask,
)
from cutlab.tensor import Tensor, backward


def rng_for(seed=0):
    return np.random.default_rng(seed)


class TestSpecValidation:
    def test_ratio_bounds(self):
        with pytest.raises(ValueError):
            CutoffSpec(CutoffKind.TOKEN, cutoff_ratio=1.0)
        with pytest.raises(ValueError):
            CutoffSpec(CutoffKind.TOKEN, cutoff_ratio=-0.1)

    def test_n_samples(self):
        with pytest.raises(ValueError):
            CutoffSpec(CutoffKind.TOKEN, 0.1, n_samples=0)

    def test_kind_guards(self):
        with pytest.raises(ValueError, match="token"):
            sample_token_mask(8, CutoffSpec(CutoffKind.SPAN, 0.1), rng_for())


class TestTokenMask:
    def test_floor_count_with_protected_cls(self):
        spec = CutoffSpec(CutoffKind.TOKEN, 0.15, protect_cls=True)
        mask = sample_token_mask(8, spec, rng_for())  # 7 eligible -> floor(1.05) = 1
        assert len(mask.zeroed_rows) == 1
        assert 0 not in mask.zeroed_rows

    def test_zero_ratio_is_identity(self):
        mask = sample_token_mask(8, CutoffSpec(CutoffKind.TOKEN, 0.0), rng_for())
        assert mask.is_empty()
        W = Tensor(np.random.default_rng(1).standard_normal((8, 4)))
        assert np.array_equal(apply_mask(W, mask).data, W.data)

    def test_never_masks_cls_when_protected(self):
        spec = CutoffSpec(CutoffKind.TOKEN, 0.5, protect_cls=True)
        rng = rng_for(2)
        for _ in range(200):
            assert 0 not in sample_token_mask(10, spec, rng).zeroed_rows

    def test_cls_eligible_when_unprotected(self):
        spec = CutoffSpec(CutoffKind.TOKEN, 0.5, protect_cls=False)
        rng = rng_for(3)
        seen0 = any(0 in sample_token_mask(10, spec, rng).zeroed_rows for _ in range(200))
        assert seen0


class TestFeatureMask:
    def test_floor_count(self):
        mask = sample_feature_mask(16, CutoffSpec(CutoffKind.FEATURE, 0.25), rng_for())
        assert len(mask.zeroed_cols) == 4

    def test_just_below_one_column_is_identity(self):
        mask = sample_feature_mask(16, CutoffSpec(CutoffKind.FEATURE, 1 / 16 - 1e-9), rng_for())
        assert mask.is_empty()


class TestSpanMask:
    def test_floor_length_and_start_range(self):
        spec = CutoffSpec(CutoffKind.SPAN, 0.1, protect_cls=False)
        rng = rng_for(4)
        starts = set()
        for _ in range(500):
            mask = sample_span_mask(10, spec, rng)
            assert mask.span is not None and mask.span[1] == 1
            starts.add(mask.span[0])
        assert starts == set(range(10))

    def test_contiguity(self):
        spec = CutoffSpec(CutoffKind.SPAN, 0.3, protect_cls=False)
        rng = rng_for(5)
        for _ in range(200):
            mask = sample_span_mask(12, spec, rng)
            start, length = mask.span
            assert length == 3
            assert mask.zeroed_rows == frozenset(range(start, start + 3))
            assert 0 <= start <= 9

    def test_protect_cls_shifts_start(self):
        spec = CutoffSpec(CutoffKind.SPAN, 0.3, protect_cls=True)
        rng = rng_for(6)
        for _ in range(200):
            mask = sample_span_mask(12, spec, rng)
            assert mask.span[0] >= 1
            assert 0 not in mask.zeroed_rows

    def test_zero_length_is_identity(self):
        mask = sample_span_mask(9, CutoffSpec(CutoffKind.SPAN, 0.1), rng_for())
        assert mask.is_empty()


class TestApplyMask:
    def test_empty_mask_is_exact_identity(self):
        W = Tensor(np.random.default_rng(7).standard_normal((5, 6)))
        out = apply_mask(W, CutoffMask(kind=CutoffKind.NONE))
        assert np.array_equal(out.data, W.data)

    def test_row_mask_zeroes_row_and_preserves_rest(self):
        W = Tensor(np.random.default_rng(8).standard_normal((4, 8)))
        out = apply_mask(W, CutoffMask(kind=CutoffKind.TOKEN, zeroed_rows=frozenset({2})))
        assert np.array_equal(out.data[2], np.zeros(8))
        for row in (0, 1, 3):
            assert np.array_equal(out.data[row], W.data[row])

    def test_gradient_equals_mask_matrix(self):
        W = Tensor(np.random.default_rng(9).standard_normal((4, 6)), requires_grad=True)
        mask = CutoffMask(kind=CutoffKind.TOKEN, zeroed_rows=frozenset({1, 3}))
        backward(apply_mask(W, mask).sum())
        assert np.array_equal(W.grad, mask_matrix(mask, 4, 6))

    def test_out_of_range_rejected(self):
        W = Tensor(np.zeros((3, 3)))
        with pytest.raises(ValueError, match="out of range"):
            apply_mask(W, CutoffMask(kind=CutoffKind.TOKEN, zeroed_rows=frozenset({3})))
        with pytest.raises(ValueError, match="out of range"):
            apply_mask(W, CutoffMask(kind=CutoffKind.FEATURE, zeroed_cols=frozenset({5})))


class TestMakeViews:
    def test_single_identity_view(self):
        W = Tensor(np.random.default_rng(10).standard_normal((6, 4)))
        views = make_views(W, CutoffSpec(CutoffKind.TOKEN, 0.0, n_samples=1), rng_for(0))
        assert len(views) == 1
        assert np.array_equal(views[0].data, W.data)

    def test_three_span_views_each_contiguous(self):
        W = Tensor(np.random.default_rng(11).standard_normal((12, 4)))
        spec = CutoffSpec(CutoffKind.SPAN, 0.25, n_samples=3, protect_cls=False)
        views = make_views(W, spec, rng_for(1))
        assert len(views) == 3
        for v in views:
            zero_rows = [i for i in range(12) if np.array_equal(v.data[i], np.zeros(4))]
            assert len(zero_rows) == 3
            assert zero_rows == list(range(zero_rows[0], zero_rows[0] + 3))

    def test_same_seed_reproduces_views(self):
        W = Tensor(np.random.default_rng(12).standard_normal((10, 8)))
        spec = CutoffSpec(CutoffKind.FEATURE, 0.3, n_samples=4)
        a = make_views(W, spec, rng_for(42))
        b = make_views(W, spec, rng_for(42))
        for va, vb in zip(a, b):
            assert np.array_equal(va.data, vb.data)


@given(
    kind=st.sampled_from([CutoffKind.TOKEN, CutoffKind.FEATURE, CutoffKind.SPAN]),
    length=st.integers(2, 24),
    d=st.integers(1, 12),
    ratio=st.floats(0.0, 0.999),
    protect=st.booleans(),
    seed=st.integers(0, 2**20),
)
@settings(max_examples=120, deadline=None)
def test_mask_structure_properties(kind, length, d, ratio, protect, seed):
    spec = CutoffSpec(kind, ratio, protect_cls=protect)
    mask = sample_mask(length, d, spec, np.random.default_rng(seed))
    eligible = length - 1 if (protect and kind is not CutoffKind.FEATURE) else length
    if kind is CutoffKind.TOKEN:
        assert len(mask.zeroed_rows) == int(ratio * eligible)
        assert not mask.zeroed_cols
    elif kind is CutoffKind.FEATURE:
        assert len(mask.zeroed_cols) == int(ratio * d)
        assert not mask.zeroed_rows
    else:
        assert len(mask.zeroed_rows) == int(ratio * length)
        if mask.zeroed_rows:
            rows = sorted(mask.zeroed_rows)
            assert rows == list(range(rows[0], rows[-1] + 1))
    if protect:
        assert 0 not in mask.zeroed_rows
    W = np.random.default_rng(seed + 1).standard_normal((length, d))
    masked = apply_mask(Tensor(W), mask).data
    for i in range(length):
        for j in range(d):
            if i in mask.zeroed_rows or j in mask.zeroed_cols:
                assert masked[i, j] == 0.0
            else:
                assert masked[i, j] == W[i, j]
