"""
Fit a patch codebook with k-means
=================================

Generates the bundled synthetic texture dataset, clusters its 4x4 patches
into 64 centroids, and watches the mean-distance cost fall to zero (the
patches are exact prototypes, so k-means can recover them perfectly).
"""

from pathlib import Path

import numpy as np

from ccvit.tokenizer import save_codebook, train_codebook
from ccvit.toydata import ToySpec, generate_toy_dataset

out = Path("runs/demo_codebook")
out.mkdir(parents=True, exist_ok=True)

# a 40-image dataset whose patches come from 64 fixed prototype patches
spec = ToySpec(n_images=40, k=64, patch_size=4, grid_h=6, grid_w=6,
               palette_size=4, seed=7)
dataset = generate_toy_dataset(spec, out / "data")
print(f"wrote {len(dataset.paths)} images to {out / 'data'}")

# every patch of every image, flattened to (N, 48)
from ccvit.imaging import load_image, patchify

vectors = np.concatenate(
    [patchify(load_image(p), 4).vectors for p in dataset.paths]
)
print(f"clustering {vectors.shape[0]} patch vectors of dim {vectors.shape[1]}")

# warm-up act: on noisy copies of the patches the cost visibly decreases
rng = np.random.default_rng(0)
noisy = np.clip(vectors + rng.normal(0, 0.05, vectors.shape), 0, 1).astype(np.float32)
noisy_history = []
train_codebook(noisy, k=64, iterations=10, seed=0, patch_size=4,
               cost_history_out=noisy_history)
print("cost on noisy patches, iteration by iteration:")
for i, cost in enumerate(noisy_history):
    print(f"  iteration {i:2d}: mean distance {cost:.6f}")

# main act: the clean patches ARE prototypes, so k-means nails them exactly
history = []
cb = train_codebook(vectors, k=64, iterations=10, seed=0, patch_size=4,
                    cost_history_out=history)
print(f"cost on the exact quantized patches: {history[-1]:.6f}")

save_codebook(cb, out / "codebook.ccvb")
print(f"saved {cb.k} centroids to {out / 'codebook.ccvb'}")
