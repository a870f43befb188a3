import numpy as np
import pytest

from ccvit import corruption, tokenizer
from ccvit.corruption import (
    TAG_MASKED,
    TAG_ORIGINAL,
    TAG_REPLACED,
    CorruptionError,
    CorruptionPlan,
)
from ccvit.imaging import PatchGrid


def plan_of(n, masked, replaced, seed=0):
    return CorruptionPlan(
        n,
        np.asarray(masked, dtype=np.int64),
        np.asarray(replaced, dtype=np.int64),
        seed,
    )


def trained_codebook(k=8, d=12, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.random((300, d)).astype(np.float32)
    return tokenizer.train_codebook(data, k=k, iterations=4, seed=seed, patch_size=2)


# ---------------------------------------------------------------------------
# plan invariants
# ---------------------------------------------------------------------------


def test_plan_rejects_overlap_out_of_range_and_duplicates():
    with pytest.raises(CorruptionError):
        plan_of(10, [1, 2], [2, 3])
    with pytest.raises(CorruptionError):
        plan_of(10, [10], [])
    with pytest.raises(CorruptionError):
        plan_of(10, [1, 1], [])


# ---------------------------------------------------------------------------
# blockwise mask sampling
# ---------------------------------------------------------------------------


def test_blockwise_default_grid_hits_count_window():
    for seed in range(10):
        m = corruption.sample_blockwise_mask((14, 14), 75, seed)
        max_block = corruption.default_max_block(75, 196, 16)
        assert 75 <= m.size < 75 + max_block
        assert m.min() >= 0 and m.max() < 196
        assert np.unique(m).size == m.size


def test_blockwise_blocks_are_solid_constrained_rectangles():
    blocks = []
    m = corruption.sample_blockwise_mask((14, 14), 75, 3, blocks_out=blocks)
    grid = np.zeros((14, 14), dtype=bool)
    grid.reshape(-1)[m] = True
    assert blocks
    for top, left, h, w in blocks:
        assert grid[top : top + h, left : left + w].all()
        assert 16 <= h * w <= corruption.default_max_block(75, 196, 16)
        assert 0.3 <= h / w <= 1 / 0.3


def test_blockwise_single_position_target():
    m = corruption.sample_blockwise_mask((5, 5), 1, 0, min_block=1)
    assert m.size == 1


def test_blockwise_deterministic_per_seed():
    a = corruption.sample_blockwise_mask((14, 14), 75, 9)
    b = corruption.sample_blockwise_mask((14, 14), 75, 9)
    np.testing.assert_array_equal(a, b)


def test_blockwise_errors():
    with pytest.raises(CorruptionError):
        corruption.sample_blockwise_mask((4, 4), 16, 0)  # target == n
    with pytest.raises(CorruptionError):
        corruption.sample_blockwise_mask((3, 3), 5, 0)  # min_block 16 cannot fit


# ---------------------------------------------------------------------------
# replacement sampling
# ---------------------------------------------------------------------------


def test_replacements_disjoint_and_exact():
    masked = corruption.sample_blockwise_mask((14, 14), 75, 1)
    r = corruption.sample_replacements(196, masked, 20, 2)
    assert r.size == 20
    assert np.intersect1d(r, masked).size == 0


def test_replacements_edge_counts():
    masked = np.array([0, 1, 2])
    assert corruption.sample_replacements(6, masked, 0, 0).size == 0
    full = corruption.sample_replacements(6, masked, 3, 0)
    np.testing.assert_array_equal(full, [3, 4, 5])
    with pytest.raises(CorruptionError):
        corruption.sample_replacements(6, masked, 4, 0)


def test_make_plan_defaults_and_determinism():
    a = corruption.make_plan((14, 14), 75, 20, seed=7)
    b = corruption.make_plan((14, 14), 75, 20, seed=7)
    assert a.replaced.size == 20
    assert 75 <= a.masked.size < 75 + corruption.default_max_block(75, 196, 16)
    np.testing.assert_array_equal(a.masked, b.masked)
    np.testing.assert_array_equal(a.replaced, b.replaced)
    c = corruption.make_plan((14, 14), 75, 20, seed=8)
    assert not (
        np.array_equal(a.masked, c.masked) and np.array_equal(a.replaced, c.replaced)
    )


# ---------------------------------------------------------------------------
# corrupt
# ---------------------------------------------------------------------------


def test_corrupt_empty_plan_is_identity():
    cb = trained_codebook()
    rng = np.random.default_rng(1)
    grid = PatchGrid(rng.random((9, 12)).astype(np.float32), 3, 3, 2, 3)
    batch = corruption.corrupt(grid, cb, plan_of(9, [], []))
    assert (batch.tags == TAG_ORIGINAL).all()
    np.testing.assert_array_equal(batch.vectors, grid.vectors)
    np.testing.assert_array_equal(batch.pixel_targets, grid.vectors)


def test_corrupt_tags_and_untouched_positions():
    cb = trained_codebook()
    rng = np.random.default_rng(2)
    grid = PatchGrid(rng.random((16, 12)).astype(np.float32), 4, 4, 2, 3)
    plan = plan_of(16, [0, 1, 5], [2, 9])
    batch = corruption.corrupt(grid, cb, plan)
    assert batch.tags.tolist() == [
        TAG_MASKED, TAG_MASKED, TAG_REPLACED, TAG_ORIGINAL,
        TAG_ORIGINAL, TAG_MASKED, TAG_ORIGINAL, TAG_ORIGINAL,
        TAG_ORIGINAL, TAG_REPLACED, TAG_ORIGINAL, TAG_ORIGINAL,
        TAG_ORIGINAL, TAG_ORIGINAL, TAG_ORIGINAL, TAG_ORIGINAL,
    ]
    untouched = batch.tags == TAG_ORIGINAL
    np.testing.assert_array_equal(batch.vectors[untouched], grid.vectors[untouched])
    np.testing.assert_array_equal(batch.vectors[plan.masked], 0.0)
    np.testing.assert_array_equal(batch.pixel_targets, grid.vectors)


def test_corrupt_replaced_carries_original_assignment_centroid():
    cb = trained_codebook()
    rng = np.random.default_rng(3)
    grid = PatchGrid(rng.random((9, 12)).astype(np.float32), 3, 3, 2, 3)
    plan = plan_of(9, [], [4])
    batch = corruption.corrupt(grid, cb, plan)
    original_token = tokenizer.tokenize(grid, cb).tokens[4]
    np.testing.assert_array_equal(batch.vectors[4], cb.centroids[original_token])
    assert batch.token_targets[4] == original_token
    # idempotence: tokenizing the corrupted patch reproduces the same token
    round_trip = tokenizer.assign_tokens(batch.vectors[4:5], cb.centroids)[0]
    assert round_trip == original_token


def test_corrupt_fixed_point_when_patch_is_a_centroid():
    cb = trained_codebook()
    vectors = np.vstack([cb.centroids[3], cb.centroids[5]]).astype(np.float32)
    grid = PatchGrid(vectors, 1, 2, 2, 3)
    batch = corruption.corrupt(grid, cb, plan_of(2, [], [0]))
    np.testing.assert_array_equal(batch.vectors[0], cb.centroids[3])
    assert batch.tags[0] == TAG_REPLACED


def test_corrupt_dimension_mismatches():
    cb = trained_codebook()
    rng = np.random.default_rng(4)
    grid = PatchGrid(rng.random((9, 12)).astype(np.float32), 3, 3, 2, 3)
    with pytest.raises(CorruptionError):
        corruption.corrupt(grid, cb, plan_of(8, [], []))
    wrong_d = PatchGrid(rng.random((9, 27)).astype(np.float32), 3, 3, 3, 3)
    with pytest.raises(CorruptionError):
        corruption.corrupt(wrong_d, cb, plan_of(9, [], []))


# ---------------------------------------------------------------------------
# text fixtures
# ---------------------------------------------------------------------------


def test_plan_text_round_trip():
    plan = corruption.make_plan((8, 8), 20, 6, seed=5)
    back = corruption.plan_from_text(corruption.plan_to_text(plan))
    assert back.n == plan.n and back.seed == plan.seed
    np.testing.assert_array_equal(back.masked, plan.masked)
    np.testing.assert_array_equal(back.replaced, plan.replaced)

    empty = plan_of(4, [], [])
    back = corruption.plan_from_text(corruption.plan_to_text(empty))
    assert back.masked.size == 0 and back.replaced.size == 0


def test_plan_text_missing_field():
    with pytest.raises(CorruptionError):
        corruption.plan_from_text("n 4\nseed 0\nmasked 1\n")
