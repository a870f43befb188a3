"""Image decode, resize, patch splitting, and benchmark noise generation.

Pixels live in [0, 1] as float32 arrays shaped (C, H, W). Pillow is used
only to decode and encode files; the resize path is implemented here so
results do not depend on a third-party resampler.

Patch flattening order is fixed and documented: patches are enumerated in
row-major grid order, and each patch is flattened channel-major first,
then row-major within the patch. So for patch size P the vector layout is

    [c0 row0, c0 row1, ..., c0 rowP-1, c1 row0, ...]

and D = C * P * P.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_SUPPORTED_SUFFIXES = (".png", ".ppm", ".jpg", ".jpeg")


class ImagingError(ValueError):
    """Unsupported format, unreadable file, or invalid parameter."""


@dataclass(frozen=True)
class Image:
    """A (C, H, W) float32 image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 3:
            raise ImagingError(f"image must be (C, H, W), got shape {d.shape}")
        if d.dtype != np.float32:
            raise ImagingError(f"image dtype must be float32, got {d.dtype}")
        if d.size and (d.min() < 0.0 or d.max() > 1.0):
            raise ImagingError("pixel values must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PatchGrid:
    """Flattened non-overlapping patches of an image.

    vectors has shape (n, D) with n = grid_h * grid_w and D = C * P * P,
    in the flattening order documented at module top.
    """

    vectors: np.ndarray
    grid_h: int
    grid_w: int
    patch_size: int
    channels: int

    def __post_init__(self):
        n = self.grid_h * self.grid_w
        d = self.channels * self.patch_size * self.patch_size
        if self.vectors.shape != (n, d):
            raise ImagingError(
                f"patch vectors shape {self.vectors.shape} inconsistent with "
                f"grid {self.grid_h}x{self.grid_w}, P={self.patch_size}, C={self.channels}"
            )

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def bilinear_resize(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) data with bilinear sampling at half-pixel centers.

    Output pixel j samples source coordinate (j + 0.5) * in/out - 0.5, so an
    exact 2x downscale averages each 2x2 block.
    """
    c, in_h, in_w = data.shape
    if out_h < 1 or out_w < 1:
        raise ImagingError("target resolution must be positive")
    if (in_h, in_w) == (out_h, out_w):
        return data.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(src).astype(np.int64)
        frac = src - lo
        hi = np.clip(lo + 1, 0, n_in - 1)
        lo = np.clip(lo, 0, n_in - 1)
        return lo, hi, frac

    y0, y1, fy = axis_weights(in_h, out_h)
    x0, x1, fx = axis_weights(in_w, out_w)
    d = data.astype(np.float64)
    top = d[:, y0][:, :, x0] * (1 - fx) + d[:, y0][:, :, x1] * fx
    bot = d[:, y1][:, :, x0] * (1 - fx) + d[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def image_from_array(data: np.ndarray) -> Image:
    """Wrap an array as an Image, accepting float64 or uint8 input."""
    if data.dtype == np.uint8:
        data = data.astype(np.float32) / 255.0
    return Image(np.ascontiguousarray(data, dtype=np.float32))


def load_image(path, target_resolution=None) -> Image:
    """Decode a PNG/PPM/JPEG file and optionally resize.

    target_resolution is an int (square) or an (H, W) pair; None keeps the
    source size.
    """
    from PIL import Image as PilImage

    p = Path(path)
    if p.suffix.lower() not in _SUPPORTED_SUFFIXES:
        raise ImagingError(f"unsupported image format: {p.suffix!r} ({p})")
    try:
        with PilImage.open(p) as raw:
            rgb = raw.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ImagingError(f"unreadable image file {p}: {exc}") from exc
    data = arr.transpose(2, 0, 1).astype(np.float32) / 255.0
    if target_resolution is not None:
        if isinstance(target_resolution, int):
            th, tw = target_resolution, target_resolution
        else:
            th, tw = target_resolution
        data = bilinear_resize(data, th, tw)
    return Image(data)


def save_image(img: Image, path) -> None:
    """Encode an Image to PNG or PPM; lossless for uint8-exact pixels."""
    from PIL import Image as PilImage

    p = Path(path)
    if p.suffix.lower() not in (".png", ".ppm"):
        raise ImagingError(f"unsupported output format: {p.suffix!r}")
    arr = np.round(img.data * 255.0).astype(np.uint8).transpose(1, 2, 0)
    PilImage.fromarray(arr, mode="RGB").save(p)


def patchify(img: Image, patch_size: int) -> PatchGrid:
    """Split into non-overlapping P x P patches and flatten each."""
    c, h, w = img.data.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ImagingError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    blocks = img.data.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    vectors = np.ascontiguousarray(blocks.reshape(gh * gw, c * p * p))
    return PatchGrid(vectors, gh, gw, p, c)


def unpatchify(grid: PatchGrid) -> Image:
    """Exact inverse of patchify."""
    gh, gw, p, c = grid.grid_h, grid.grid_w, grid.patch_size, grid.channels
    blocks = grid.vectors.reshape(gh, gw, c, p, p).transpose(2, 0, 3, 1, 4)
    data = np.ascontiguousarray(blocks.reshape(c, gh * p, gw * p))
    return Image(np.clip(data, 0.0, 1.0).astype(np.float32))


@dataclass(frozen=True)
class NoiseSpec:
    """A benchmark corruption: kind, its parameter, and a seed.

    kind "mask" takes a patch ratio r in (0, 1); "gaussian_noise" and
    "gaussian_blur" take a sigma > 0 on the 0-255 pixel scale (noise) or
    in pixels (blur).
    """

    kind: str
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mask", "gaussian_noise", "gaussian_blur"):
            raise ImagingError(f"unknown noise kind {self.kind!r}")
        if self.kind == "mask" and not 0.0 < self.param < 1.0:
            raise ImagingError(f"mask ratio must be in (0, 1), got {self.param}")
        if self.kind != "mask" and self.param <= 0.0:
            raise ImagingError(f"sigma must be positive, got {self.param}")


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(3 * sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur per channel with reflected borders."""
    kernel = gaussian_kernel_1d(sigma)
    radius = len(kernel) // 2
    d = data.astype(np.float64)
    padded = np.pad(d, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    rows = np.zeros_like(d)
    for i, kv in enumerate(kernel):
        rows += kv * padded[:, i : i + d.shape[1], :]
    padded = np.pad(rows, ((0, 0), (0, 0), (radius, radius)), mode="reflect")
    out = np.zeros_like(d)
    for i, kv in enumerate(kernel):
        out += kv * padded[:, :, i : i + d.shape[2]]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_noise(
    img: Image,
    spec: NoiseSpec,
    patch_size: int = 16,
    mask_fill: float = 0.5,
    mask_indices=None,
) -> Image:
    """Apply one benchmark corruption; deterministic for a fixed seed.

    Mask selection is uniform over patches without replacement, touching
    exactly floor(r * n) of them; pass mask_indices to substitute another
    sampling policy (e.g. blockwise). Noise adds N(0, (sigma/255)^2) per
    pixel and clamps; blur convolves with a Gaussian of std sigma pixels.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian_noise":
        noisy = img.data.astype(np.float64) + rng.normal(
            0.0, spec.param / 255.0, size=img.data.shape
        )
        return Image(np.clip(noisy, 0.0, 1.0).astype(np.float32))
    if spec.kind == "gaussian_blur":
        return Image(gaussian_blur(img.data, spec.param))

    grid = patchify(img, patch_size)
    n = grid.n_patches
    if mask_indices is None:
        count = int(math.floor(spec.param * n))
        mask_indices = rng.choice(n, size=count, replace=False)
    vectors = grid.vectors.copy()
    vectors[np.asarray(mask_indices, dtype=np.int64)] = np.float32(mask_fill)
    return unpatchify(
        PatchGrid(vectors, grid.grid_h, grid.grid_w, patch_size, grid.channels)
    )


def enumerate_images(root) -> list[Path]:
    """All supported images under root, recursively, in lexicographic order.

    Ordering is by the POSIX form of the path relative to root, so the
    listing is stable across platforms and filesystem iteration order.
    """
    root = Path(root)
    if not root.is_dir():
        raise ImagingError(f"dataset root {root} is not a directory")
    found = [
        p
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in _SUPPORTED_SUFFIXES
    ]
    return sorted(found, key=lambda p: p.relative_to(root).as_posix())
