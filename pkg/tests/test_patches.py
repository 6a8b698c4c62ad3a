import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from camid.patches import compute_mean_patch, extract_patches, patch_quality, preprocess


def test_saturated_patch_ineligible():
    p = np.full((64, 64, 3), 120, np.uint8)
    p[10, 10, 1] = 255
    assert not patch_quality(p)[0]
    p[10, 10, 1] = 0
    assert not patch_quality(p)[0]


def test_quality_scores():
    ok, score = patch_quality(np.full((64, 64, 3), 127, np.uint8))
    assert ok and score == -0.5
    assert patch_quality(np.full((64, 64, 3), 130, np.uint8))[1] > patch_quality(np.full((64, 64, 3), 200, np.uint8))[1]


def test_grid_and_topk():
    rng = np.random.default_rng(0)
    img = rng.integers(20, 235, size=(512, 512, 3)).astype(np.uint8)
    ps = extract_patches(img, 32)
    assert ps.candidates == 64 and len(ps) == 32 and ps.shortfall == 0
    # brute-force ranking oracle
    scored = sorted((abs(img[r * 64:(r + 1) * 64, c * 64:(c + 1) * 64].mean() - 127.5), r, c)
                    for r in range(8) for c in range(8))
    assert [(p.row, p.col) for p in ps] == [(r, c) for _, r, c in scored[:32]]
    for p in ps:
        np.testing.assert_array_equal(p.pixels, img[p.row * 64:(p.row + 1) * 64, p.col * 64:(p.col + 1) * 64])


def test_single_cell_and_all_saturated():
    img = np.full((64, 64, 3), 100, np.uint8)
    assert len(extract_patches(img, 32)) == 1
    ps = extract_patches(np.full((128, 128, 3), 255, np.uint8), 8)
    assert ps.empty and ps.shortfall == 8 and ps.stack().shape == (0, 64, 64, 3)


def test_extract_rejects_small_image():
    with pytest.raises(ValueError, match="smaller"):
        extract_patches(np.zeros((63, 100, 3), np.uint8), 1)


def test_mean_patch():
    p = np.random.default_rng(1).integers(0, 256, (1, 64, 64, 3)).astype(np.uint8)
    np.testing.assert_array_equal(compute_mean_patch(p), p[0].astype(np.float32))
    two = np.stack([np.zeros((64, 64, 3), np.uint8), np.full((64, 64, 3), 200, np.uint8)])
    assert np.all(compute_mean_patch(two) == 100)
    with pytest.raises(ValueError):
        compute_mean_patch(np.empty((0, 64, 64, 3), np.uint8))


def test_mean_patch_matches_summation_oracle():
    ps = np.random.default_rng(2).integers(0, 256, (37, 64, 64, 3)).astype(np.uint8)
    oracle = np.zeros((64, 64, 3))
    for p in ps:
        oracle += p
    np.testing.assert_allclose(compute_mean_patch(ps), oracle / len(ps), atol=1e-4)


def test_preprocess_values():
    mean = np.zeros((64, 64, 3), np.float32)
    assert np.all(preprocess(np.full((64, 64, 3), 255, np.uint8), mean) == 3.1875)
    mean[:] = 127.5
    assert np.all(preprocess(np.zeros((64, 64, 3), np.uint8), mean) == -1.59375)
    p = np.random.default_rng(3).integers(0, 256, (64, 64, 3)).astype(np.uint8)
    assert not preprocess(p, p.astype(np.float32)).any()
    with pytest.raises(ValueError):
        preprocess(np.zeros((2, 32, 32, 3)), mean)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(64, 200), st.integers(64, 200), st.just(3))), st.integers(1, 12))
def test_extraction_invariants(img, k):
    ps = extract_patches(img, k)
    assert len(ps) <= min(k, ps.candidates)
    assert ps.candidates == (img.shape[0] // 64) * (img.shape[1] // 64)
    scores = [p.score for p in ps]
    assert scores == sorted(scores, reverse=True)
    for p in ps:
        assert patch_quality(p.pixels) == (True, p.score)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (3, 64, 64, 3)), arrays(np.float32, (64, 64, 3), elements=st.floats(0, 255, width=32)))
def test_preprocess_range(patches, mean):
    out = preprocess(patches, mean)
    assert out.dtype == np.float32
    assert out.min() >= -3.1875 and out.max() <= 3.1875


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (200, 260, 3), elements=st.integers(2, 253)), st.integers(1, 20))
def test_patches_never_overlap(img, k):
    ps = list(extract_patches(img, k))
    for i, p in enumerate(ps):
        for q in ps[i + 1:]:
            assert abs(p.row - q.row) * 64 >= 64 or abs(p.col - q.col) * 64 >= 64
    assert [p.pixels.tobytes() for p in extract_patches(img, k)] == [p.pixels.tobytes() for p in ps]
