"""Synthetic quantized-texture dataset.

Every image is a patch grid where each cell shows one of K fixed prototype
patches, chosen by a Voronoi partition of the grid: a handful of sites are
scattered per image, each carrying a token from the image's palette, and
every cell copies its nearest site's token. The result has two properties
the tests rely on:

- each patch is exactly one of K distinct uint8 prototypes, so PNG
  round-trips are lossless and clustering the patches can reach zero cost
  with centroids equal to the prototypes;
- tokens form contiguous regions, so a masked patch is usually surrounded
  by patches of the same token, giving a learnable context signal.

Palettes are assigned round-robin over a shuffled token list, and every
palette entry occupies at least its own site's cell, so all K prototypes
appear somewhere in the dataset whenever n_images * palette_size >= K.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import PatchGrid, save_image, unpatchify
from .tokenizer import Codebook, CodebookMeta


class ToyDataError(ValueError):
    """Spec cannot produce the requested dataset."""


@dataclass(frozen=True)
class ToySpec:
    n_images: int
    k: int = 512
    patch_size: int = 8
    grid_h: int = 8
    grid_w: int = 8
    palette_size: int = 6
    channels: int = 3
    seed: int = 0
    ensure_coverage: bool = True

    def __post_init__(self):
        if self.n_images < 1 or self.k < 2:
            raise ToyDataError("need n_images >= 1 and k >= 2")
        if self.palette_size > min(self.k, self.grid_h * self.grid_w):
            raise ToyDataError("palette_size exceeds k or the grid size")
        if self.ensure_coverage and self.n_images * self.palette_size < self.k:
            raise ToyDataError(
                f"{self.n_images} images x {self.palette_size} palette entries "
                f"cannot cover k={self.k} prototypes"
            )

    @property
    def dim(self) -> int:
        return self.channels * self.patch_size**2


@dataclass
class ToyDataset:
    paths: list
    prototypes: np.ndarray  # (K, D) uint8
    token_fields: np.ndarray  # (N, n) int64


def _distinct_prototypes(spec: ToySpec, rng: np.random.Generator) -> np.ndarray:
    protos = rng.integers(0, 256, size=(spec.k, spec.dim), dtype=np.uint8)
    seen = {p.tobytes() for p in protos}
    while len(seen) < spec.k:  # collisions are astronomically unlikely; be exact anyway
        protos = rng.integers(0, 256, size=(spec.k, spec.dim), dtype=np.uint8)
        seen = {p.tobytes() for p in protos}
    return protos


def _voronoi_field(spec: ToySpec, palette: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = spec.grid_h * spec.grid_w
    sites = rng.choice(n, size=spec.palette_size, replace=False)
    sr, sc = np.divmod(sites, spec.grid_w)
    rows, cols = np.divmod(np.arange(n), spec.grid_w)
    d2 = (rows[:, None] - sr[None]) ** 2 + (cols[:, None] - sc[None]) ** 2
    return palette[np.argmin(d2, axis=1)]


def generate_toy_dataset(spec: ToySpec, out_dir) -> ToyDataset:
    """Write n_images PNGs under out_dir and return their construction."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    prototypes = _distinct_prototypes(spec, rng)
    token_order = rng.permutation(spec.k)

    paths = []
    fields = np.empty((spec.n_images, spec.grid_h * spec.grid_w), dtype=np.int64)
    proto_f32 = prototypes.astype(np.float32) / 255.0
    for i in range(spec.n_images):
        take = (np.arange(spec.palette_size) + i * spec.palette_size) % spec.k
        palette = token_order[take]
        if np.unique(palette).size < palette.size:  # wraparound duplicate near k
            palette = np.unique(palette)
            extra = np.setdiff1d(token_order, palette)[: spec.palette_size - palette.size]
            palette = np.concatenate([palette, extra])
        field = _voronoi_field(spec, palette, rng)
        fields[i] = field
        grid = PatchGrid(
            proto_f32[field], spec.grid_h, spec.grid_w, spec.patch_size, spec.channels
        )
        path = out_dir / f"toy_{i:05d}.png"
        save_image(unpatchify(grid), path)
        paths.append(path)
    return ToyDataset(paths, prototypes, fields)


def toy_codebook(prototypes: np.ndarray, patch_size: int, seed: int = 0) -> Codebook:
    """The exact codebook implied by the prototypes (no clustering needed)."""
    centroids = prototypes.astype(np.float32) / 255.0
    cb = Codebook(centroids, patch_size, CodebookMeta(prototypes.shape[0], 0, 0.0, seed))
    cb.check_invariants()
    return cb
