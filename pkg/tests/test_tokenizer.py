import numpy as np
import pytest

from ccvit import imaging, tokenizer
from ccvit.imaging import Image, PatchGrid
from ccvit.tokenizer import (
    Codebook,
    CodebookFormatError,
    CodebookMeta,
    DegenerateDataError,
    TokenGrid,
    TokenizerError,
)


def make_codebook(centroids, patch_size=2):
    c = np.asarray(centroids, dtype=np.float32)
    return Codebook(c, patch_size, CodebookMeta(c.shape[0], 1, 0.0, 0))


def toy_codebook():
    # three 4-d centroids: origin and the first two axis points
    return make_codebook([[0, 0, 0, 0], [1, 0, 0, 0], [0, 1, 0, 0]])


def grid_of(vectors, patch_size=2, channels=1):
    v = np.asarray(vectors, dtype=np.float32)
    return PatchGrid(v, 1, v.shape[0], patch_size, channels)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def test_train_n_equals_k_reaches_zero_cost():
    rng = np.random.default_rng(0)
    data = rng.random((8, 6)).astype(np.float32)
    history = []
    cb = tokenizer.train_codebook(
        data, k=8, iterations=3, seed=1, patch_size=1, cost_history_out=history
    )
    assert history[-1] == 0.0
    assert cb.meta.final_cost == 0.0
    got = sorted(map(tuple, cb.centroids.tolist()))
    want = sorted(map(tuple, data.tolist()))
    assert got == want


def test_train_two_tight_clusters_recovers_means():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.0, 1e-4, size=(20, 5))
    b = 1.0 + rng.uniform(0.0, 1e-4, size=(20, 5))
    data = np.concatenate([a, b]).astype(np.float32)
    cb = tokenizer.train_codebook(data, k=2, iterations=5, seed=2, patch_size=1)
    got = cb.centroids[np.argsort(cb.centroids[:, 0])]
    want = np.stack([data[:20].mean(axis=0), data[20:].mean(axis=0)])
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_train_cost_history_non_increasing():
    rng = np.random.default_rng(2)
    data = rng.random((400, 12)).astype(np.float32)
    history = []
    tokenizer.train_codebook(
        data, k=16, iterations=8, seed=3, patch_size=2, cost_history_out=history
    )
    assert len(history) == 9
    for prev, cur in zip(history, history[1:]):
        assert cur <= prev + 1e-9
    assert history[-1] < history[0]


def test_train_accepts_chunk_stream():
    rng = np.random.default_rng(3)
    chunks = [rng.random((50, 4)).astype(np.float32) for _ in range(4)]
    cb_stream = tokenizer.train_codebook(iter(chunks), k=5, iterations=4, seed=4, patch_size=2)
    cb_array = tokenizer.train_codebook(
        np.concatenate(chunks), k=5, iterations=4, seed=4, patch_size=2
    )
    np.testing.assert_array_equal(cb_stream.centroids, cb_array.centroids)


def test_train_kmeans_pp_init():
    rng = np.random.default_rng(4)
    data = rng.random((200, 6)).astype(np.float32)
    cb = tokenizer.train_codebook(data, k=7, iterations=4, seed=5, patch_size=1, init="kmeans++")
    cb.check_invariants()


def test_train_invariants_hold_across_random_runs():
    for seed in range(6):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(40, 120))
        k = int(rng.integers(2, n // 2))
        data = rng.random((n, 8)).astype(np.float32)
        history = []
        cb = tokenizer.train_codebook(
            data, k=k, iterations=6, seed=seed, patch_size=2, cost_history_out=history
        )
        cb.check_invariants()
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_train_errors():
    rng = np.random.default_rng(5)
    data = rng.random((4, 4)).astype(np.float32)
    with pytest.raises(TokenizerError):
        tokenizer.train_codebook(data, k=5, iterations=1, patch_size=2)
    with pytest.raises(TokenizerError):
        tokenizer.train_codebook(data, k=2, iterations=0, patch_size=2)
    same = np.tile(data[:1], (10, 1))
    with pytest.raises(DegenerateDataError):
        tokenizer.train_codebook(same, k=2, iterations=1, patch_size=2)


# ---------------------------------------------------------------------------
# tokenize / detokenize
# ---------------------------------------------------------------------------


def test_tokenize_exact_centroid_match():
    rng = np.random.default_rng(6)
    c = rng.random((9, 4)).astype(np.float32)
    cb = make_codebook(c)
    out = tokenizer.tokenize(grid_of(c[7:8]), cb)
    assert out.tokens.tolist() == [7]


def test_tokenize_toy_brute_force_case():
    out = tokenizer.tokenize(grid_of([[0.9, 0.1, 0.0, 0.0]]), toy_codebook())
    assert out.tokens.tolist() == [1]


def test_tokenize_tie_breaks_to_lowest_index():
    out = tokenizer.tokenize(grid_of([[0.5, 0.0, 0.0, 0.0]]), toy_codebook())
    assert out.tokens.tolist() == [0]  # equidistant to centroids 0 and 1


def test_tokenize_order_preserving_batch():
    rng = np.random.default_rng(7)
    data = rng.random((600, 12)).astype(np.float32)
    cb = tokenizer.train_codebook(data, k=16, iterations=5, seed=8, patch_size=2)
    perm = rng.permutation(16)
    reps = np.concatenate([cb.centroids[perm]] * 13,)[:196]
    grid = PatchGrid(reps, 14, 14, 2, 3)
    out = tokenizer.tokenize(grid, cb)
    assert out.n == 196
    expected = np.concatenate([perm] * 13)[:196]
    np.testing.assert_array_equal(out.tokens, expected)


def test_tokenize_dim_mismatch():
    with pytest.raises(TokenizerError):
        tokenizer.tokenize(grid_of(np.zeros((1, 8)), patch_size=2, channels=2), toy_codebook())


def test_tokenize_batch_size_independent():
    rng = np.random.default_rng(8)
    data = rng.random((500, 12)).astype(np.float32)
    cb = tokenizer.train_codebook(data, k=24, iterations=4, seed=9, patch_size=2)
    patches = rng.random((100, 12)).astype(np.float32)
    batch = tokenizer.assign_tokens(patches, cb.centroids)
    singles = np.array(
        [tokenizer.assign_tokens(patches[i : i + 1], cb.centroids)[0] for i in range(100)]
    )
    np.testing.assert_array_equal(batch, singles)


def test_assign_matches_naive_distance_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        x = rng.random((17, 6)).astype(np.float32)
        c = rng.random((5, 6)).astype(np.float32)
        naive = np.argmin(
            ((x.astype(np.float64)[:, None, :] - c.astype(np.float64)[None]) ** 2).sum(-1),
            axis=1,
        )
        np.testing.assert_array_equal(tokenizer.assign_tokens(x, c), naive)


def test_locality_single_patch_edit_changes_only_that_token():
    rng = np.random.default_rng(10)
    data = rng.random((300, 12)).astype(np.float32)
    cb = tokenizer.train_codebook(data, k=12, iterations=4, seed=11, patch_size=2)
    vectors = rng.random((36, 12)).astype(np.float32)
    grid = PatchGrid(vectors, 6, 6, 2, 3)
    base = tokenizer.tokenize(grid, cb).tokens
    for _ in range(25):
        j = int(rng.integers(36))
        edited = vectors.copy()
        edited[j] = rng.random(12).astype(np.float32)
        new = tokenizer.tokenize(PatchGrid(edited, 6, 6, 2, 3), cb).tokens
        others = np.arange(36) != j
        np.testing.assert_array_equal(new[others], base[others])


def test_detokenize_returns_exact_centroid_pixels():
    cb = toy_codebook()
    out = tokenizer.detokenize(TokenGrid(np.array([2, 0, 1]), 1, 3), cb)
    np.testing.assert_array_equal(out.vectors, cb.centroids[[2, 0, 1]])


def test_detokenize_rejects_out_of_range():
    with pytest.raises(TokenizerError):
        tokenizer.detokenize(TokenGrid(np.array([3]), 1, 1), toy_codebook())


def test_tokenize_detokenize_round_trip():
    rng = np.random.default_rng(11)
    data = rng.random((400, 12)).astype(np.float32)
    cb = tokenizer.train_codebook(data, k=20, iterations=5, seed=12, patch_size=2)
    t = TokenGrid(rng.integers(0, 20, size=24), 4, 6)
    back = tokenizer.tokenize(tokenizer.detokenize(t, cb), cb)
    np.testing.assert_array_equal(back.tokens, t.tokens)


def test_round_trip_residual_is_minimal():
    rng = np.random.default_rng(12)
    data = rng.random((300, 12)).astype(np.float32)
    cb = tokenizer.train_codebook(data, k=10, iterations=5, seed=13, patch_size=2)
    x = rng.random((15, 12)).astype(np.float32)
    grid = PatchGrid(x, 3, 5, 2, 3)
    recon = tokenizer.detokenize(tokenizer.tokenize(grid, cb), cb).vectors
    residual = np.linalg.norm((x - recon).astype(np.float64), axis=1)
    for j in range(cb.k):
        dist_j = np.linalg.norm((x - cb.centroids[j]).astype(np.float64), axis=1)
        assert np.all(residual <= dist_j + 1e-12)


# ---------------------------------------------------------------------------
# codebook file format
# ---------------------------------------------------------------------------


def test_codebook_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(13)
    data = rng.random((200, 12)).astype(np.float32)
    cb = tokenizer.train_codebook(data, k=6, iterations=3, seed=14, patch_size=2)
    path = tmp_path / "cb.bin"
    tokenizer.save_codebook(cb, path)
    back = tokenizer.load_codebook(path)
    assert np.array_equal(
        back.centroids.view(np.uint32), cb.centroids.view(np.uint32)
    )
    assert back.patch_size == cb.patch_size
    assert back.meta == cb.meta


def test_codebook_file_errors(tmp_path):
    rng = np.random.default_rng(14)
    data = rng.random((60, 4)).astype(np.float32)
    cb = tokenizer.train_codebook(data, k=4, iterations=2, seed=15, patch_size=2)
    path = tmp_path / "cb.bin"
    tokenizer.save_codebook(cb, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CodebookFormatError):
        tokenizer.load_codebook(bad)

    bad.write_bytes(blob[:2] + b"\x07" + blob[4:])
    with pytest.raises(CodebookFormatError):
        tokenizer.load_codebook(bad)

    bad.write_bytes(blob[:-9])
    with pytest.raises(CodebookFormatError):
        tokenizer.load_codebook(bad)

    bad.write_bytes(blob + b"\x00")
    with pytest.raises(CodebookFormatError):
        tokenizer.load_codebook(bad)

    version2 = blob[:4] + b"\x02\x00\x00\x00" + blob[8:]
    bad.write_bytes(version2)
    with pytest.raises(CodebookFormatError):
        tokenizer.load_codebook(bad)


# ---------------------------------------------------------------------------
# dataset sampling
# ---------------------------------------------------------------------------


def _write_images(root, count, size=8):
    rng = np.random.default_rng(42)
    for i in range(count):
        raw = rng.integers(0, 256, size=(3, size, size), dtype=np.uint8)
        imaging.save_image(imaging.image_from_array(raw), root / f"img_{i:03d}.png")


def test_sample_training_vectors_counts_and_determinism(tmp_path):
    _write_images(tmp_path, 10)
    chunks = list(
        tokenizer.sample_training_vectors(tmp_path, total_images=10, seed=0, patch_size=4)
    )
    total = sum(c.shape[0] for c in chunks)
    assert total == 10 * 4  # 8x8 at P=4 -> 4 patches per image
    assert all(c.shape[1] == 3 * 16 for c in chunks)

    a = list(tokenizer.sample_training_vectors(tmp_path, total_images=4, seed=1, patch_size=4))
    b = list(tokenizer.sample_training_vectors(tmp_path, total_images=4, seed=1, patch_size=4))
    assert len(a) == 4
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_sample_training_vectors_empty_dataset(tmp_path):
    with pytest.raises(TokenizerError):
        list(tokenizer.sample_training_vectors(tmp_path, total_images=1, seed=0))
