"""Non-parametric centroid tokenizer.

K centroids are fit with Lloyd's algorithm over flattened patch vectors in
raw [0, 1] pixel space; token assignment is nearest-centroid with ties
broken by lowest index. Assignment distances are computed in float64 with
the ||a||^2 - 2 a.b + ||b||^2 expansion and precomputed centroid norms, so
tokenization does not depend on how the input is batched.

Because each patch is tokenized independently, editing the pixels of one
patch can never change any other patch's token.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import PatchGrid

_MAGIC = b"CCVB"
_VERSION = 1
_ASSIGN_CHUNK = 8192


class TokenizerError(ValueError):
    """Invalid tokenizer input or state."""


class DegenerateDataError(TokenizerError):
    """Training data cannot support K distinct centroids."""


class CodebookFormatError(TokenizerError):
    """Corrupt, truncated, or wrong-version codebook file."""


@dataclass(frozen=True)
class CodebookMeta:
    """Provenance of a training run: sample size, iterations, cost, seed."""

    n_vectors: int
    iterations: int
    final_cost: float
    seed: int


@dataclass(frozen=True)
class Codebook:
    """K centroids of dimension D, each reshapeable to a C x P x P patch."""

    centroids: np.ndarray
    patch_size: int
    meta: CodebookMeta

    def __post_init__(self):
        c = self.centroids
        if c.ndim != 2 or c.dtype != np.float32:
            raise TokenizerError(
                f"centroids must be a 2-D float32 array, got {c.dtype} {c.shape}"
            )
        if c.shape[1] % (self.patch_size * self.patch_size):
            raise TokenizerError(
                f"D={c.shape[1]} is not a multiple of P^2={self.patch_size ** 2}"
            )

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def channels(self) -> int:
        return self.dim // (self.patch_size * self.patch_size)

    def check_invariants(self) -> None:
        """Every centroid pair distinct; every centroid self-nearest."""
        labels = assign_tokens(self.centroids, self.centroids)
        if not np.array_equal(labels, np.arange(self.k)):
            raise TokenizerError("codebook has duplicate or shadowed centroids")


@dataclass(frozen=True)
class TokenGrid:
    """Token indices aligned with a PatchGrid, row-major."""

    tokens: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.shape != (self.grid_h * self.grid_w,):
            raise TokenizerError(
                f"token count {self.tokens.shape} does not match "
                f"{self.grid_h}x{self.grid_w} grid"
            )

    @property
    def n(self) -> int:
        return self.tokens.shape[0]


def assign_tokens(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid index per row, lowest index on ties.

    Works in float64 regardless of input dtype; chunked over rows with
    per-row arithmetic independent of chunk boundaries.
    """
    if vectors.shape[1] != centroids.shape[1]:
        raise TokenizerError(
            f"vector dim {vectors.shape[1]} != codebook dim {centroids.shape[1]}"
        )
    c = centroids.astype(np.float64)
    c_norms = np.einsum("kd,kd->k", c, c)
    out = np.empty(vectors.shape[0], dtype=np.int64)
    for lo in range(0, vectors.shape[0], _ASSIGN_CHUNK):
        x = vectors[lo : lo + _ASSIGN_CHUNK].astype(np.float64)
        d2 = np.einsum("md,md->m", x, x)[:, None] - 2.0 * (x @ c.T) + c_norms
        out[lo : lo + _ASSIGN_CHUNK] = np.argmin(d2, axis=1)
    return out


def _min_sq_distances(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    c = centroids.astype(np.float64)
    c_norms = np.einsum("kd,kd->k", c, c)
    out = np.empty(vectors.shape[0], dtype=np.float64)
    for lo in range(0, vectors.shape[0], _ASSIGN_CHUNK):
        x = vectors[lo : lo + _ASSIGN_CHUNK].astype(np.float64)
        d2 = np.einsum("md,md->m", x, x)[:, None] - 2.0 * (x @ c.T) + c_norms
        out[lo : lo + _ASSIGN_CHUNK] = d2.min(axis=1)
    return np.maximum(out, 0.0)


def clustering_cost(
    vectors: np.ndarray, centroids: np.ndarray, labels: np.ndarray | None = None
) -> float:
    """Mean L2 distance (not squared) from each vector to its nearest centroid.

    The assignment uses the fast norm expansion; the distance itself is then
    recomputed exactly per row, so an exact centroid match contributes 0.
    """
    if labels is None:
        labels = assign_tokens(vectors, centroids)
    c = centroids.astype(np.float64)
    total = 0.0
    for lo in range(0, vectors.shape[0], _ASSIGN_CHUNK):
        diff = vectors[lo : lo + _ASSIGN_CHUNK].astype(np.float64) - c[labels[lo : lo + _ASSIGN_CHUNK]]
        total += np.sqrt(np.einsum("md,md->m", diff, diff)).sum()
    return total / vectors.shape[0]


def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        mat = vectors
    else:
        chunks = [np.asarray(c) for c in vectors]
        if not chunks:
            raise TokenizerError("empty training stream")
        mat = np.concatenate(chunks, axis=0)
    if mat.ndim != 2:
        raise TokenizerError(f"training vectors must be (N, D), got {mat.shape}")
    return np.ascontiguousarray(mat, dtype=np.float32)


def _init_distinct_rows(mat: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # sample K rows with pairwise-distinct values; byte keys give exact equality
    order = rng.permutation(mat.shape[0])
    seen = set()
    picked = []
    for idx in order:
        key = mat[idx].tobytes()
        if key in seen:
            continue
        seen.add(key)
        picked.append(idx)
        if len(picked) == k:
            return mat[np.array(picked)].copy()
    raise DegenerateDataError(
        f"only {len(picked)} distinct vectors available, need K={k}"
    )


def _init_kmeans_pp(mat: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    first = int(rng.integers(mat.shape[0]))
    chosen = [mat[first].copy()]
    for _ in range(1, k):
        d2 = _min_sq_distances(mat, np.stack(chosen))
        total = d2.sum()
        if total <= 0.0:
            raise DegenerateDataError(
                f"only {len(chosen)} distinct vectors available, need K={k}"
            )
        next_idx = int(rng.choice(mat.shape[0], p=d2 / total))
        chosen.append(mat[next_idx].copy())
    return np.stack(chosen)


def train_codebook(
    vectors,
    k: int,
    iterations: int = 20,
    seed: int = 0,
    patch_size: int = 16,
    init: str = "random",
    cost_history_out: list | None = None,
) -> Codebook:
    """Fit K centroids with Lloyd's algorithm.

    vectors is an (N, D) array or an iterable of (m, D) chunks. The mean-L2
    cost is recorded before every update and once at the end; a cost
    increase beyond float tolerance aborts, since Lloyd updates should not
    make the assignment worse. Clusters that lose all members are repaired
    by splitting the most populated cluster with +-1e-4 jitter.
    """
    mat = _as_matrix(vectors)
    n = mat.shape[0]
    if iterations < 1:
        raise TokenizerError("iterations must be >= 1")
    if k < 1 or n < k:
        raise TokenizerError(f"need at least K={k} vectors, got {n}")
    rng = np.random.default_rng(seed)
    if init == "random":
        centroids = _init_distinct_rows(mat, k, rng).astype(np.float64)
    elif init == "kmeans++":
        centroids = _init_kmeans_pp(mat, k, rng).astype(np.float64)
    else:
        raise TokenizerError(f"unknown init {init!r}")

    history = []
    mat64 = mat.astype(np.float64)
    for _ in range(iterations):
        labels = assign_tokens(mat, centroids)
        history.append(clustering_cost(mat, centroids, labels))
        sums = np.zeros((k, mat64.shape[1]), dtype=np.float64)
        np.add.at(sums, labels, mat64)
        counts = np.bincount(labels, minlength=k)
        live = counts > 0
        centroids[live] = sums[live] / counts[live, None]
        for dead in np.flatnonzero(~live):
            donor = int(np.argmax(counts))
            jitter = rng.uniform(-1e-4, 1e-4, size=centroids.shape[1])
            centroids[dead] = centroids[donor] + jitter
            counts[dead] = counts[donor] // 2
            counts[donor] -= counts[dead]
    history.append(clustering_cost(mat, centroids))
    for prev, cur in zip(history, history[1:]):
        if cur > prev + 1e-6 * max(1.0, abs(prev)):
            raise TokenizerError(
                f"clustering cost increased ({prev} -> {cur}); aborting"
            )
    if cost_history_out is not None:
        cost_history_out[:] = history

    cb = Codebook(
        centroids.astype(np.float32),
        patch_size,
        CodebookMeta(n, iterations, history[-1], seed),
    )
    cb.check_invariants()
    return cb


def tokenize(grid: PatchGrid, cb: Codebook) -> TokenGrid:
    """Token per patch: index of the nearest centroid."""
    if grid.dim != cb.dim:
        raise TokenizerError(f"patch dim {grid.dim} != codebook dim {cb.dim}")
    return TokenGrid(assign_tokens(grid.vectors, cb.centroids), grid.grid_h, grid.grid_w)


def detokenize(tokens: TokenGrid, cb: Codebook) -> PatchGrid:
    """Replace each token with its centroid's pixels."""
    t = tokens.tokens
    if t.size and (t.min() < 0 or t.max() >= cb.k):
        raise TokenizerError(f"token index out of range for K={cb.k}")
    return PatchGrid(
        cb.centroids[t].copy(), tokens.grid_h, tokens.grid_w, cb.patch_size, cb.channels
    )


def save_codebook(cb: Codebook, path) -> None:
    """Write the versioned binary codebook format (see load_codebook)."""
    header = _MAGIC + struct.pack("<III", _VERSION, cb.k, cb.dim)
    header += struct.pack("<I", cb.patch_size)
    body = cb.centroids.astype("<f4").tobytes(order="C")
    meta = struct.pack(
        "<QIdQ", cb.meta.n_vectors, cb.meta.iterations, cb.meta.final_cost, cb.meta.seed
    )
    Path(path).write_bytes(header + body + meta)


def load_codebook(path) -> Codebook:
    """Read a codebook file.

    Layout, all little-endian: magic "CCVB", u32 version (1), u32 K, u32 D,
    u32 P, K*D float32 centroid values, u64 N, u32 iterations, f64 final
    cost, u64 seed. Round-trips bit-exactly.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != _MAGIC:
        raise CodebookFormatError(f"{path}: not a codebook file (bad magic)")
    version, k, d, p = struct.unpack("<IIII", blob[4:20])
    if version != _VERSION:
        raise CodebookFormatError(f"{path}: unsupported version {version}")
    body_end = 20 + k * d * 4
    meta_end = body_end + struct.calcsize("<QIdQ")
    if len(blob) != meta_end:
        raise CodebookFormatError(
            f"{path}: expected {meta_end} bytes, found {len(blob)} (truncated or padded)"
        )
    centroids = np.frombuffer(blob[20:body_end], dtype="<f4").reshape(k, d).copy()
    n, iterations, cost, seed = struct.unpack("<QIdQ", blob[body_end:meta_end])
    cb = Codebook(centroids, p, CodebookMeta(n, iterations, cost, seed))
    cb.check_invariants()
    return cb


def sample_training_vectors(
    dataset_root,
    total_images: int,
    seed: int,
    patch_size: int = 16,
    target_resolution=None,
):
    """Yield every patch of a deterministic random subset of a dataset.

    Images are enumerated recursively in lexicographic order, then
    total_images of them are drawn without replacement; each chosen image
    contributes one (n, D) chunk.
    """
    from .imaging import enumerate_images, load_image, patchify

    paths = enumerate_images(dataset_root)
    if not paths:
        raise TokenizerError(f"no images under {dataset_root}")
    if total_images < len(paths):
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(paths), size=total_images, replace=False)
        paths = [paths[i] for i in sorted(idx)]
    for p in paths:
        yield patchify(load_image(p, target_resolution), patch_size).vectors
