import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import oracle_gaussian, oracle_hw, oracle_point, oracle_radius, random_annotations
from msrnet.annotations import CellAnnotation, rle_decode, rle_encode
from msrnet.labels import (GuidanceTargetEncoder, RadiusPolicy, build_targets, effective_radius,
                           gaussian_target, hw_target, point_target)


def box_cell(x, y, w, h, size=64):
    mask = np.zeros((size, size), dtype=bool)
    mask[y:y + h, x:x + w] = True
    return CellAnnotation.from_mask(mask)


def bare(center, bbox):
    return CellAnnotation(center=center, bbox=bbox, mask=None)


# ---------------------------------------------------------------- radius

@pytest.mark.parametrize("R,w,h,expected", [(3, 20, 30, 3), (3, 2, 30, 2), (5, 5, 5, 5), (4, 30, 3, 3)])
def test_effective_radius_examples(R, w, h, expected):
    assert effective_radius(box_cell(0, 0, w, h), RadiusPolicy(max_radius=R)) == expected


def test_degenerate_bbox_warns_and_returns_one():
    with pytest.warns(RuntimeWarning, match="degenerate"):
        assert effective_radius(bare((1.0, 1.0), (1.0, 1.0, 0.5, 4.0)), RadiusPolicy(3)) == 1


def test_half_edge_mode():
    assert effective_radius(box_cell(0, 0, 4, 30), RadiusPolicy(3, half_edge=True)) == 2


def test_radius_policy_validates():
    with pytest.raises(ValueError):
        RadiusPolicy(max_radius=0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 40), st.integers(1, 40))
def test_radius_never_exceeds_short_edge(R, w, h):
    r = effective_radius(box_cell(0, 0, w, h), RadiusPolicy(R))
    assert r <= min(R, w, h)


# ---------------------------------------------------------------- gaussian

def test_gaussian_empty():
    assert not gaussian_target([], 64, 64).any()


def test_gaussian_single_cell_peak_and_monotone():
    ann = box_cell(20, 20, 30, 30)
    heat = gaussian_target([ann], 64, 64, RadiusPolicy(max_radius=12), stride=4)
    ci, cj = int(ann.center[1] // 4), int(ann.center[0] // 4)
    assert heat[ci, cj] == 1.0
    assert heat.max() == 1.0 and heat.min() >= 0.0
    ii, jj = np.indices(heat.shape)
    d2 = (ii - ci) ** 2 + (jj - cj) ** 2
    levels = [heat[d2 == v] for v in np.unique(d2)]
    for near, far in zip(levels, levels[1:]):
        assert far.max() <= near.min()


def test_gaussian_two_overlapping_cells_match_oracle():
    anns = [box_cell(10, 10, 20, 20), box_cell(18, 14, 24, 16)]
    policy = RadiusPolicy(max_radius=16)
    heat = gaussian_target(anns, 64, 64, policy, stride=4)
    expected = oracle_gaussian(anns, 64, 64, 16, 3.0, 4)
    assert np.array_equal(heat, expected)
    assert (heat > 0).sum() > 2


def test_gaussian_rejects_outside_center_but_keeps_others():
    good = box_cell(10, 10, 8, 8)
    bad = bare((70.0, 5.0), (66.0, 0.0, 8.0, 8.0))
    with pytest.warns(RuntimeWarning, match="outside image"):
        heat = gaussian_target([bad, good], 64, 64)
    assert np.array_equal(heat, gaussian_target([good], 64, 64))


def test_gaussian_requires_divisible_size():
    with pytest.raises(ValueError, match="multiple of stride"):
        gaussian_target([], 62, 64, stride=4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.sampled_from([1, 2, 4]))
def test_gaussian_matches_oracle_fuzzed(seed, R, S):
    anns = random_annotations(np.random.default_rng(seed))
    heat = gaussian_target(anns, 64, 64, RadiusPolicy(R), stride=S)
    assert np.array_equal(heat, oracle_gaussian(anns, 64, 64, R, 3.0, S))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
def test_gaussian_permutation_invariant(seed, rnd):
    anns = random_annotations(np.random.default_rng(seed))
    shuffled = list(anns)
    rnd.shuffle(shuffled)
    policy = RadiusPolicy(8)
    assert np.array_equal(gaussian_target(anns, 64, 64, policy), gaussian_target(shuffled, 64, 64, policy))


# ---------------------------------------------------------------- point / hw

def test_point_single_cell():
    ann = bare((10.0, 10.0), (5.0, 5.0, 10.0, 10.0))
    point, coll = point_target([ann], 64, 64, stride=4)
    assert point[2, 2] == 1.0 and point.sum() == 1.0 and coll == 0


def test_point_empty():
    point, coll = point_target([], 64, 64)
    assert not point.any() and coll == 0


def test_point_collision():
    a = bare((8.0, 8.0), (6.0, 6.0, 4.0, 4.0))
    b = bare((9.0, 9.0), (7.0, 7.0, 4.0, 4.0))
    point, coll = point_target([a, b], 64, 64, stride=4)
    assert point[2, 2] == 1.0 and point.sum() == 1.0 and coll == 1


def test_hw_floor_division():
    ann = box_cell(20, 20, 9, 17)
    hw, valid, _ = hw_target([ann], 64, 64, stride=4)
    i, j = int(ann.center[1] // 4), int(ann.center[0] // 4)
    assert (hw[0, i, j], hw[1, i, j]) == (4.0, 2.0)
    assert valid.sum() == 1 and valid[i, j]


def test_hw_empty():
    hw, valid, coll = hw_target([], 64, 64)
    assert not hw.any() and not valid.any() and coll == 0


def test_hw_three_cells_vs_loop_oracle():
    anns = [box_cell(2, 2, 10, 13), box_cell(30, 5, 7, 21), box_cell(40, 40, 18, 9)]
    hw, valid, coll = hw_target(anns, 64, 64, stride=4)
    ehw, evalid = oracle_hw(anns, 64, 64, 4)
    assert valid.sum() == 3 and coll == 0
    assert np.array_equal(hw, ehw) and np.array_equal(valid, evalid)


def test_hw_collision_last_writer_wins(caplog):
    a = bare((8.0, 8.0), (6.0, 6.0, 4.0, 4.0))
    b = bare((9.0, 9.0), (1.0, 1.0, 16.0, 12.0))
    hw, valid, coll = hw_target([a, b], 64, 64, stride=4)
    assert coll == 1 and hw[0, 2, 2] == 3.0 and hw[1, 2, 2] == 4.0
    assert "overwriting" in caplog.text


def test_targets_nonzero_only_at_valid():
    rng = np.random.default_rng(5)
    for _ in range(20):
        t = build_targets(random_annotations(rng), 64, 64)
        assert not t.point[~t.valid].any() and not t.hw[:, ~t.valid].any()
        assert t.gaussian.min() >= 0 and t.gaussian.max() <= 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_point_count_equals_cells_minus_collisions(seed):
    anns = random_annotations(np.random.default_rng(seed))
    point, coll = point_target(anns, 64, 64)
    opoint, ocoll = oracle_point(anns, 64, 64, 4)
    assert point.sum() == len(anns) - coll
    assert coll == ocoll and np.array_equal(point, opoint)


def test_translation_by_stride_shifts_targets_by_one():
    S = 4
    anns = [box_cell(10, 12, 9, 11), box_cell(30, 26, 13, 7)]
    moved = [CellAnnotation.from_mask(np.roll(np.roll(a.mask, S, axis=0), S, axis=1)) for a in anns]
    t0 = build_targets(anns, 64, 64, RadiusPolicy(8), S)
    t1 = build_targets(moved, 64, 64, RadiusPolicy(8), S)
    assert np.array_equal(t1.gaussian[1:, 1:], t0.gaussian[:-1, :-1])
    assert np.array_equal(t1.point[1:, 1:], t0.point[:-1, :-1])
    assert np.array_equal(t1.hw[:, 1:, 1:], t0.hw[:, :-1, :-1])


def test_radius_fuzz_matches_oracle():
    rng = np.random.default_rng(9)
    for _ in range(200):
        for ann in random_annotations(rng):
            R = int(rng.integers(1, 9))
            assert effective_radius(ann, RadiusPolicy(R)) == oracle_radius(ann, R)


# ---------------------------------------------------------------- encoder / RLE

def test_target_encoder_shapes():
    rng = np.random.default_rng(2)
    X = [random_annotations(rng) for _ in range(3)]
    out = GuidanceTargetEncoder(image_shape=(64, 64)).fit(X).transform(X)
    assert out["gaussian"].shape == (3, 16, 16)
    assert out["hw"].shape == (3, 2, 16, 16)
    assert out["foreground"].max() <= 1.0


def test_target_encoder_get_params_roundtrip():
    enc = GuidanceTargetEncoder(max_radius=5, stride=2)
    assert enc.get_params()["max_radius"] == 5
    assert enc.set_params(max_radius=2).max_radius == 2


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_rle_roundtrip(h, w, seed):
    mask = np.random.default_rng(seed).random((h, w)) < 0.4
    counts = rle_encode(mask)
    assert sum(counts) == h * w
    assert np.array_equal(rle_decode(counts, h, w), mask)


def test_rle_starts_with_background():
    mask = np.array([[1, 1, 0], [0, 1, 1]], dtype=bool)
    assert rle_encode(mask) == [0, 2, 2, 2]


def test_annotation_validation():
    ann = box_cell(3, 4, 5, 6)
    ann.validate(64, 64)
    with pytest.raises(ValueError):
        CellAnnotation(center=(0.0, 0.0), bbox=ann.bbox, mask=ann.mask).validate()
