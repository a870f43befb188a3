import numpy as np
import pytest

from ccvit import imaging, tokenizer, toydata
from ccvit.toydata import ToyDataError, ToySpec, generate_toy_dataset, toy_codebook


SMALL = ToySpec(n_images=12, k=24, patch_size=4, grid_h=5, grid_w=5, palette_size=4, seed=0)


def test_spec_validation():
    with pytest.raises(ToyDataError):
        ToySpec(n_images=0)
    with pytest.raises(ToyDataError):
        ToySpec(n_images=4, k=8, grid_h=2, grid_w=2, palette_size=5)
    with pytest.raises(ToyDataError):
        ToySpec(n_images=2, k=64, palette_size=4)  # cannot cover 64 prototypes


def test_every_prototype_appears(tmp_path):
    ds = generate_toy_dataset(SMALL, tmp_path)
    used = np.unique(ds.token_fields)
    np.testing.assert_array_equal(used, np.arange(SMALL.k))


def test_images_round_trip_to_exact_prototypes(tmp_path):
    ds = generate_toy_dataset(SMALL, tmp_path)
    proto_f32 = ds.prototypes.astype(np.float32) / 255.0
    for i, path in enumerate(ds.paths[:4]):
        img = imaging.load_image(path)
        grid = imaging.patchify(img, SMALL.patch_size)
        np.testing.assert_array_equal(grid.vectors, proto_f32[ds.token_fields[i]])


def test_true_codebook_tokenizes_images_to_their_fields(tmp_path):
    ds = generate_toy_dataset(SMALL, tmp_path)
    cb = toy_codebook(ds.prototypes, SMALL.patch_size)
    for i, path in enumerate(ds.paths[:4]):
        grid = imaging.patchify(imaging.load_image(path), SMALL.patch_size)
        tokens = tokenizer.tokenize(grid, cb).tokens
        np.testing.assert_array_equal(tokens, ds.token_fields[i])


def test_kmeans_on_toy_patches_reaches_zero_cost(tmp_path):
    ds = generate_toy_dataset(SMALL, tmp_path)
    vectors = np.concatenate(
        [
            imaging.patchify(imaging.load_image(p), SMALL.patch_size).vectors
            for p in ds.paths
        ]
    )
    history = []
    cb = tokenizer.train_codebook(
        vectors, k=SMALL.k, iterations=3, seed=1, patch_size=SMALL.patch_size,
        cost_history_out=history,
    )
    assert history[-1] == 0.0
    got = sorted(map(tuple, cb.centroids.tolist()))
    want = sorted(map(tuple, (ds.prototypes.astype(np.float32) / 255.0).tolist()))
    assert got == want


def test_token_fields_are_spatially_correlated(tmp_path):
    ds = generate_toy_dataset(SMALL, tmp_path)
    same = count = 0
    for field in ds.token_fields:
        grid = field.reshape(SMALL.grid_h, SMALL.grid_w)
        same += (grid[:, 1:] == grid[:, :-1]).sum() + (grid[1:, :] == grid[:-1, :]).sum()
        count += grid[:, 1:].size + grid[1:, :].size
    # an i.i.d. field would agree on ~1/palette_size of neighbor pairs
    assert same / count > 2.0 / SMALL.palette_size


def test_generation_deterministic(tmp_path):
    a = generate_toy_dataset(SMALL, tmp_path / "a")
    b = generate_toy_dataset(SMALL, tmp_path / "b")
    np.testing.assert_array_equal(a.prototypes, b.prototypes)
    np.testing.assert_array_equal(a.token_fields, b.token_fields)
    assert (tmp_path / "a" / "toy_00000.png").read_bytes() == (
        tmp_path / "b" / "toy_00000.png"
    ).read_bytes()
