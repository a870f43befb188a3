"""Corruption plans: blockwise masking plus random centroid replacement.

A plan names two disjoint position sets on the patch grid. Masked positions
lose their patch entirely (the model substitutes its learned mask embedding
at embed time; here they are zero-filled placeholders). Replaced positions
are substituted with the centroid of the original patch's token, so they
remain plausible pixels while the prediction targets stay those of the
original image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import PatchGrid
from .tokenizer import Codebook, TokenGrid, tokenize

TAG_ORIGINAL = 0
TAG_MASKED = 1
TAG_REPLACED = 2

_MAX_ATTEMPTS = 10_000


class CorruptionError(ValueError):
    """Invalid plan geometry or mismatched inputs."""


@dataclass(frozen=True)
class CorruptionPlan:
    """Disjoint masked/replaced position sets over n grid positions."""

    n: int
    masked: np.ndarray
    replaced: np.ndarray
    seed: int

    def __post_init__(self):
        m, r = self.masked, self.replaced
        for name, arr in (("masked", m), ("replaced", r)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n):
                raise CorruptionError(f"{name} positions out of range for n={self.n}")
            if np.unique(arr).size != arr.size:
                raise CorruptionError(f"duplicate {name} positions")
        if np.intersect1d(m, r).size:
            raise CorruptionError("masked and replaced sets overlap")

    @property
    def mask_ratio(self) -> float:
        return self.masked.size / self.n

    @property
    def replace_ratio(self) -> float:
        return self.replaced.size / self.n


@dataclass(frozen=True)
class CorruptedBatch:
    """A corrupted grid with per-position tags and the original targets.

    vectors holds centroid pixels at replaced positions, zeros at masked
    positions (placeholder only; tags drive the model), and the original
    patch elsewhere. token_targets and pixel_targets always describe the
    ORIGINAL grid.
    """

    tags: np.ndarray
    vectors: np.ndarray
    token_targets: np.ndarray
    pixel_targets: np.ndarray
    grid_h: int
    grid_w: int


def default_max_block(target_count: int, n: int, min_block: int) -> int:
    """Largest single-block area: caps overshoot of the union at < max_block."""
    return max(min_block, min(target_count, n // 4))


def sample_blockwise_mask(
    grid_dims,
    target_count: int,
    seed,
    min_block: int = 16,
    max_block: int | None = None,
    aspect_range=(0.3, 1.0 / 0.3),
    blocks_out: list | None = None,
) -> np.ndarray:
    """Union random solid rectangles until at least target_count positions.

    Each accepted block has area in [min_block, max_block] and height/width
    ratio inside aspect_range, so the final count lies in
    [target_count, target_count + max_block). Returns sorted positions.
    """
    gh, gw = grid_dims
    n = gh * gw
    if not 1 <= target_count < n:
        raise CorruptionError(f"target_count must be in [1, {n}), got {target_count}")
    if max_block is None:
        max_block = default_max_block(target_count, n, min_block)
    if max_block < min_block:
        raise CorruptionError(f"max_block {max_block} < min_block {min_block}")
    rng = np.random.default_rng(seed)
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])
    mask = np.zeros((gh, gw), dtype=bool)
    attempts = 0
    while mask.sum() < target_count:
        attempts += 1
        if attempts > _MAX_ATTEMPTS:
            raise CorruptionError(
                f"could not reach {target_count} masked positions on a "
                f"{gh}x{gw} grid with min_block={min_block}"
            )
        area = rng.uniform(min_block, max_block + 1)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if h < 1 or w < 1 or h > gh or w > gw:
            continue
        if not (min_block <= h * w <= max_block):
            continue
        if not (aspect_range[0] <= h / w <= aspect_range[1]):
            continue
        top = int(rng.integers(0, gh - h + 1))
        left = int(rng.integers(0, gw - w + 1))
        mask[top : top + h, left : left + w] = True
        if blocks_out is not None:
            blocks_out.append((top, left, h, w))
    return np.flatnonzero(mask.reshape(-1))


def sample_replacements(n: int, masked: np.ndarray, count: int, seed) -> np.ndarray:
    """Uniform sample of count positions from the complement of masked."""
    candidates = np.setdiff1d(np.arange(n), masked)
    if count < 0 or count > candidates.size:
        raise CorruptionError(
            f"cannot replace {count} of {candidates.size} unmasked positions"
        )
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(candidates, size=count, replace=False))


def make_plan(
    grid_dims,
    mask_count: int,
    replace_count: int,
    seed: int,
    min_block: int = 16,
    max_block: int | None = None,
) -> CorruptionPlan:
    """Sample a full plan from one seed (mask and replacement sub-streams)."""
    gh, gw = grid_dims
    ss_mask, ss_rep = np.random.SeedSequence(seed).spawn(2)
    masked = sample_blockwise_mask(grid_dims, mask_count, ss_mask, min_block, max_block)
    replaced = sample_replacements(gh * gw, masked, replace_count, ss_rep)
    return CorruptionPlan(gh * gw, masked, replaced, seed)


def apply_plan(
    vectors: np.ndarray,
    tokens: np.ndarray,
    centroids: np.ndarray,
    plan: CorruptionPlan,
    grid_h: int,
    grid_w: int,
) -> CorruptedBatch:
    """Apply a plan given precomputed token assignments for the grid."""
    if plan.n != vectors.shape[0]:
        raise CorruptionError(f"plan for n={plan.n}, grid has {vectors.shape[0]}")
    out = vectors.copy()
    out[plan.replaced] = centroids[tokens[plan.replaced]]
    out[plan.masked] = 0.0
    tags = np.full(plan.n, TAG_ORIGINAL, dtype=np.int8)
    tags[plan.masked] = TAG_MASKED
    tags[plan.replaced] = TAG_REPLACED
    return CorruptedBatch(tags, out, tokens.copy(), vectors.copy(), grid_h, grid_w)


def corrupt(grid: PatchGrid, cb: Codebook, plan: CorruptionPlan) -> CorruptedBatch:
    """Apply a plan to a grid, recording targets from the original patches."""
    if plan.n != grid.n_patches:
        raise CorruptionError(f"plan for n={plan.n}, grid has {grid.n_patches}")
    if grid.dim != cb.dim:
        raise CorruptionError(f"grid dim {grid.dim} != codebook dim {cb.dim}")
    token_targets = tokenize(grid, cb).tokens
    return apply_plan(
        grid.vectors, token_targets, cb.centroids, plan, grid.grid_h, grid.grid_w
    )


def plan_to_text(plan: CorruptionPlan) -> str:
    """Serialize for test fixtures: one key per line, space-separated ints."""
    lines = [
        f"n {plan.n}",
        f"seed {plan.seed}",
        "masked " + " ".join(map(str, plan.masked.tolist())),
        "replaced " + " ".join(map(str, plan.replaced.tolist())),
    ]
    return "\n".join(lines) + "\n"


def plan_from_text(text: str) -> CorruptionPlan:
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, rest = line.partition(" ")
        fields[key] = rest.split()
    try:
        return CorruptionPlan(
            int(fields["n"][0]),
            np.array([int(v) for v in fields["masked"]], dtype=np.int64),
            np.array([int(v) for v in fields["replaced"]], dtype=np.int64),
            int(fields["seed"][0]),
        )
    except KeyError as exc:
        raise CorruptionError(f"plan text missing field {exc}") from exc
