"""Tokenizer analysis harness.

Measures the unchanged-token ratio of a pluggable tokenizer under three
image corruptions (patch masking, additive Gaussian noise, Gaussian blur)
and times batch tokenization. Ratios are computed per image over all patch
positions and averaged across images; the Gaussian-noise sweep reuses one
noise field per image scaled to each sigma, so the ratio is comparable
across sigma levels.

Published reference ratios from the large-scale configuration (224x224
images, 16x16 patches, K=8192) are shipped as a static table for context in
the text report; they are not reproduced at this scale.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .imaging import Image, NoiseSpec, PatchGrid, apply_noise, patchify
from .tokenizer import Codebook, TokenGrid, tokenize


class BenchError(ValueError):
    """Invalid benchmark input."""


class TokenizerPort(Protocol):
    """Anything that deterministically maps a PatchGrid to tokens."""

    name: str
    patch_size: int

    def tokenize(self, grid: PatchGrid) -> TokenGrid: ...


class CentroidTokenizer:
    """The nearest-centroid tokenizer behind the port interface."""

    def __init__(self, cb: Codebook):
        self.cb = cb
        self.name = f"centroid-k{cb.k}"
        self.patch_size = cb.patch_size

    def tokenize(self, grid: PatchGrid) -> TokenGrid:
        return tokenize(grid, self.cb)


class GlobalReferenceTokenizer:
    """A deliberately non-local tokenizer for contrast in tests.

    Each patch hashes to a bucket, and a whole-image brightness statistic is
    mixed into every token, so editing one patch moves every other patch's
    token as well. This mimics the failure mode of tokenizers that condition
    on global image structure; it reproduces no particular external model.
    """

    def __init__(self, k: int, patch_size: int):
        if k < 2:
            raise BenchError("k must be >= 2")
        self.k = k
        self.patch_size = patch_size
        self.name = f"global-reference-k{k}"

    def tokenize(self, grid: PatchGrid) -> TokenGrid:
        global_term = int(np.floor(grid.vectors.astype(np.float64).mean() * 2**24))
        buckets = np.array(
            [zlib.crc32(v.tobytes()) for v in grid.vectors], dtype=np.int64
        )
        tokens = (buckets + global_term) % self.k
        return TokenGrid(tokens, grid.grid_h, grid.grid_w)


def reference_tokenizer_global(k: int = 512, patch_size: int = 8) -> GlobalReferenceTokenizer:
    return GlobalReferenceTokenizer(k, patch_size)


# -- unchanged-token ratio ----------------------------------------------------


def _image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def unchanged_per_image(
    port: TokenizerPort, images, spec: NoiseSpec, mask_fill: float = 0.5
) -> np.ndarray:
    """Fraction of positions with identical tokens, one value per image.

    The noise seed is re-derived per image so every image sees its own
    corruption realization.
    """
    if not images:
        raise BenchError("need at least one image")
    out = np.empty(len(images), dtype=np.float64)
    for i, img in enumerate(images):
        per = NoiseSpec(spec.kind, spec.param, _image_seed(spec.seed, i))
        before = port.tokenize(patchify(img, port.patch_size)).tokens
        noisy = apply_noise(img, per, patch_size=port.patch_size, mask_fill=mask_fill)
        after = port.tokenize(patchify(noisy, port.patch_size)).tokens
        out[i] = (before == after).mean()
    return out


def unchanged_ratio(
    port: TokenizerPort, images, spec: NoiseSpec, mask_fill: float = 0.5
) -> float:
    """Mean unchanged-token percentage over images."""
    return float(unchanged_per_image(port, images, spec, mask_fill).mean() * 100.0)


def noise_sweep_ratios(
    port: TokenizerPort, images, sigmas, seed: int = 0
) -> list[float]:
    """Unchanged ratios for several noise sigmas sharing each image's field."""
    if not images:
        raise BenchError("need at least one image")
    totals = np.zeros(len(sigmas), dtype=np.float64)
    for i, img in enumerate(images):
        rng = np.random.default_rng(_image_seed(seed, i))
        eps = rng.normal(0.0, 1.0, size=img.data.shape)
        before = port.tokenize(patchify(img, port.patch_size)).tokens
        for j, sigma in enumerate(sigmas):
            noisy = np.clip(
                img.data.astype(np.float64) + (sigma / 255.0) * eps, 0.0, 1.0
            ).astype(np.float32)
            after = port.tokenize(patchify(Image(noisy), port.patch_size)).tokens
            totals[j] += (before == after).mean()
    return [float(t / len(images) * 100.0) for t in totals]


# -- report -------------------------------------------------------------------


@dataclass(frozen=True)
class RobustnessRow:
    kind: str
    param: float
    ratio: float  # percent
    n_images: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 100.0:
            raise BenchError(f"ratio {self.ratio} outside [0, 100]")


@dataclass(frozen=True)
class RobustnessReport:
    tokenizer_name: str
    rows: tuple


# published large-scale reference ratios (not reproduced at desk scale)
REFERENCE_ROWS = (
    ("centroid (published)", (90.01, 80.02, 50.05), (98.94, 88.61, 72.28), (96.38, 86.39, 66.72)),
    ("BEiT dVAE (published)", (34.34, 14.17, 1.41), (88.02, 32.54, 9.31), (61.18, 25.32, 6.93)),
    ("BEiTv2 VQ-KD (published)", (59.61, 33.56, 3.97), (95.03, 57.43, 24.02), (83.52, 61.29, 0.08)),
)

MASK_RATIOS = (0.1, 0.2, 0.5)
NOISE_SIGMAS = (1.0, 10.0, 25.0)
BLUR_SIGMAS = (0.5, 1.0, 2.0)


def robustness_report(
    port: TokenizerPort,
    images,
    seed: int = 0,
    mask_ratios=MASK_RATIOS,
    noise_sigmas=NOISE_SIGMAS,
    blur_sigmas=BLUR_SIGMAS,
    mask_fill: float = 0.5,
) -> RobustnessReport:
    rows = []
    for r in mask_ratios:
        ratio = unchanged_ratio(port, images, NoiseSpec("mask", r, seed), mask_fill)
        rows.append(RobustnessRow("mask", r, ratio, len(images), seed))
    for sigma, ratio in zip(noise_sigmas, noise_sweep_ratios(port, images, noise_sigmas, seed)):
        rows.append(RobustnessRow("gaussian_noise", sigma, ratio, len(images), seed))
    for sigma in blur_sigmas:
        ratio = unchanged_ratio(port, images, NoiseSpec("gaussian_blur", sigma, seed))
        rows.append(RobustnessRow("gaussian_blur", sigma, ratio, len(images), seed))
    return RobustnessReport(port.name, tuple(rows))


def report_csv(report: RobustnessReport) -> str:
    lines = ["tokenizer,kind,param,unchanged_pct,images,seed"]
    for r in report.rows:
        lines.append(
            f"{report.tokenizer_name},{r.kind},{r.param:g},{r.ratio:.9g},{r.n_images},{r.seed}"
        )
    return "\n".join(lines) + "\n"


def report_table(report: RobustnessReport, include_reference: bool = True) -> str:
    """Text table: one row per tokenizer, grouped columns per noise family."""

    def fmt(values):
        return " / ".join(f"{v:6.2f}" for v in values)

    def collect(kind):
        return [r.ratio for r in report.rows if r.kind == kind]

    lines = [
        "unchanged-token ratio (%), higher is better",
        f"{'tokenizer':<26} | mask r=0.1/0.2/0.5        | noise s=1/10/25           | blur s=0.5/1/2",
    ]
    lines.append("-" * len(lines[-1]))
    lines.append(
        f"{report.tokenizer_name:<26} | {fmt(collect('mask'))} | "
        f"{fmt(collect('gaussian_noise'))} | {fmt(collect('gaussian_blur'))}"
    )
    if include_reference:
        for name, mask, noise, blur in REFERENCE_ROWS:
            lines.append(f"{name:<26} | {fmt(mask)} | {fmt(noise)} | {fmt(blur)}")
    return "\n".join(lines) + "\n"


# -- latency ------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyReport:
    tokenizer_name: str
    batch_size: int
    mean_ms: float
    std_ms: float
    repetitions: int
    max_rss_mb: float | None

    def __str__(self):
        rss = f", peak rss {self.max_rss_mb:.0f} MB" if self.max_rss_mb else ""
        return (
            f"{self.tokenizer_name}: batch {self.batch_size} -> "
            f"{self.mean_ms:.2f} +- {self.std_ms:.2f} ms over {self.repetitions} reps{rss}"
        )


def latency_bench(
    port: TokenizerPort, grids, repetitions: int = 30, warmup: int = 5
) -> LatencyReport:
    """Wall-clock per tokenization of the whole pre-patchified batch."""
    if not grids:
        raise BenchError("need at least one grid")
    if repetitions < 2:
        raise BenchError("need at least two repetitions")
    for _ in range(warmup):
        for g in grids:
            port.tokenize(g)
    times = np.empty(repetitions, dtype=np.float64)
    for i in range(repetitions):
        t0 = time.perf_counter()
        for g in grids:
            port.tokenize(g)
        times[i] = (time.perf_counter() - t0) * 1000.0
    try:
        import resource

        rss_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    except ImportError:  # non-POSIX fallback
        rss_mb = None
    return LatencyReport(
        port.name, len(grids), float(times.mean()), float(times.std()), repetitions, rss_mb
    )
