"""Dual-objective masked-image transformer.

Corrupted patch grids are embedded (with a learned mask embedding at masked
slots and a learned summary token prepended), passed through an L-layer
pre-norm transformer whose attention logits carry a learned relative-position
bias, and read out twice: a token head predicts the original centroid token
at every position from the final layer, and a two-layer pixel block predicts
the original pixels from an earlier tap layer combined with the final
summary state. Training minimizes cross-entropy plus mean squared error over
the corrupted positions only, with unit weights.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .corruption import TAG_MASKED, TAG_ORIGINAL, CorruptedBatch

_CKPT_MAGIC = b"CCVM"
_CKPT_VERSION = 1


class ModelError(ValueError):
    """Configuration or input inconsistent with the model."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    tap_layer is the 1-based token-block layer whose patch states feed the
    pixel block; the scaling rule is tap_layer = depth - 3. pixel_depth is
    fixed at 2.
    """

    patch_size: int = 8
    embed_dim: int = 192
    depth: int = 6
    tap_layer: int = 3
    num_heads: int = 3
    mlp_ratio: int = 4
    vocab_size: int = 512
    patch_dim: int = 192
    grid_h: int = 8
    grid_w: int = 8
    pixel_depth: int = 2
    pixel_target_off: bool = False
    mae_norm_pixels: bool = False

    def __post_init__(self):
        if not 1 <= self.tap_layer <= self.depth:
            raise ModelError(
                f"tap_layer must be in [1, {self.depth}], got {self.tap_layer}"
            )
        if self.embed_dim % self.num_heads:
            raise ModelError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )
        if self.pixel_depth != 2:
            raise ModelError("pixel block depth is fixed at 2")
        for name in ("patch_size", "embed_dim", "depth", "num_heads", "mlp_ratio",
                     "vocab_size", "patch_dim", "grid_h", "grid_w"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def num_rel_distance(self) -> int:
        # all (dy, dx) grid offsets plus three dedicated summary-token slots
        return (2 * self.grid_h - 1) * (2 * self.grid_w - 1) + 3


def desk_config(**overrides) -> ModelConfig:
    """The default desk-scale configuration (64x64 images, 8x8 patch grid)."""
    return ModelConfig(**overrides)


@dataclass
class ForwardOutput:
    """Per-position heads plus retained intermediates for inspection."""

    token_logits: Tensor  # (B, n, K)
    pixel_preds: Tensor  # (B, n, D)
    h_tap: Tensor  # (B, n+1, d)
    h_last: Tensor  # (B, n+1, d)


@dataclass
class LossTerms:
    """ce and mse are per-position means ("mean") or position sums ("sum");
    total excludes mse when the pixel objective is switched off."""

    ce: Tensor
    mse: Tensor
    total: Tensor
    positions: int


def relative_position_index(grid_h: int, grid_w: int) -> np.ndarray:
    """Bias-table row per (query, key) pair over the n+1 sequence.

    Patch pairs index by their 2-D offset; the last three table rows are
    reserved for summary-to-patch, patch-to-summary, and summary-to-summary.
    """
    coords = np.stack(np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    idx = (rel[0] + grid_h - 1) * (2 * grid_w - 1) + (rel[1] + grid_w - 1)
    num = (2 * grid_h - 1) * (2 * grid_w - 1) + 3
    n = grid_h * grid_w
    out = np.zeros((n + 1, n + 1), dtype=np.int64)
    out[1:, 1:] = idx
    out[0, :] = num - 3
    out[:, 0] = num - 2
    out[0, 0] = num - 1
    return out


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


class CcvitModel:
    """Parameter registry plus forward/loss graph builders."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.rel_index = relative_position_index(config.grid_h, config.grid_w)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, dm = config.embed_dim, config.patch_dim

        def add(name, array):
            self.params[name] = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)

        def tn(shape, std=0.02):
            return _trunc_normal(rng, shape, std)

        add("patch_embed.weight", tn((dm, d)))
        add("patch_embed.bias", np.zeros(d))
        add("cls_embed", tn((d,)))
        add("mask_embed", tn((d,)))
        for prefix, depth in (("token", config.depth), ("pixel", config.pixel_depth)):
            out_scale = 1.0 / math.sqrt(2.0 * depth)
            for i in range(depth):
                p = f"{prefix}.{i}"
                add(f"{p}.ln1.gamma", np.ones(d))
                add(f"{p}.ln1.beta", np.zeros(d))
                add(f"{p}.attn.qkv.weight", tn((d, 3 * d)))
                add(f"{p}.attn.qkv.bias", np.zeros(3 * d))
                add(f"{p}.attn.out.weight", tn((d, d)) * out_scale)
                add(f"{p}.attn.out.bias", np.zeros(d))
                add(f"{p}.attn.rel_bias", np.zeros((config.num_rel_distance, config.num_heads)))
                add(f"{p}.ln2.gamma", np.ones(d))
                add(f"{p}.ln2.beta", np.zeros(d))
                add(f"{p}.mlp.fc1.weight", tn((d, config.mlp_ratio * d)))
                add(f"{p}.mlp.fc1.bias", np.zeros(config.mlp_ratio * d))
                add(f"{p}.mlp.fc2.weight", tn((config.mlp_ratio * d, d)) * out_scale)
                add(f"{p}.mlp.fc2.bias", np.zeros(d))
        add("token_head_ln.gamma", np.ones(d))
        add("token_head_ln.beta", np.zeros(d))
        add("token_head.weight", tn((d, config.vocab_size)))
        add("token_head.bias", np.zeros(config.vocab_size))
        add("pixel_head_ln.gamma", np.ones(d))
        add("pixel_head_ln.beta", np.zeros(d))
        add("pixel_head.weight", tn((d, dm)))
        add("pixel_head.bias", np.zeros(dm))

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- forward pieces ----------------------------------------------------

    def _stack(self, batches) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if isinstance(batches, CorruptedBatch):
            batches = [batches]
        cfg = self.config
        for b in batches:
            if (b.grid_h, b.grid_w) != (cfg.grid_h, cfg.grid_w):
                raise ModelError(
                    f"batch grid {b.grid_h}x{b.grid_w} != config "
                    f"{cfg.grid_h}x{cfg.grid_w}"
                )
            if b.vectors.shape[1] != cfg.patch_dim:
                raise ModelError(
                    f"patch dim {b.vectors.shape[1]} != config {cfg.patch_dim}"
                )
        vectors = np.stack([b.vectors for b in batches])
        tags = np.stack([b.tags for b in batches])
        tokens = np.stack([b.token_targets for b in batches])
        return vectors, tags, tokens

    def embed(self, batches) -> Tensor:
        """H_0: summary slot, then patch embeddings with e_m at masked slots."""
        vectors, tags, _ = self._stack(batches)
        p = self.params
        x = Tensor(vectors.astype(np.float32))
        h = ag.add(ag.matmul(x, p["patch_embed.weight"]), p["patch_embed.bias"])
        h = ag.where_rows(tags == TAG_MASKED, p["mask_embed"], h)
        cls = ag.broadcast_to(
            ag.reshape(p["cls_embed"], (1, self.config.embed_dim)),
            (h.shape[0], 1, self.config.embed_dim),
        )
        return ag.concat([cls, h], axis=1)

    def _bias(self, prefix: str) -> Tensor:
        t = self.config.n_patches + 1
        table = self.params[f"{prefix}.attn.rel_bias"]
        flat = ag.take_rows(table, self.rel_index.reshape(-1))
        return ag.transpose(ag.reshape(flat, (t, t, self.config.num_heads)), (2, 0, 1))

    def _layer(self, h: Tensor, prefix: str, capture: list | None) -> Tensor:
        p, cfg = self.params, self.config
        b, t = h.shape[0], h.shape[1]
        nh, hd = cfg.num_heads, cfg.head_dim

        x = ag.layer_norm(h, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
        qkv = ag.add(ag.matmul(x, p[f"{prefix}.attn.qkv.weight"]), p[f"{prefix}.attn.qkv.bias"])
        qkv = ag.transpose(ag.reshape(qkv, (b, t, 3, nh, hd)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        logits = ag.add(logits, self._bias(prefix))
        attn = ag.softmax(logits, axis=-1)
        if capture is not None:
            capture.append(attn.data.copy())
        ctx = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (b, t, nh * hd))
        h = ag.add(h, ag.add(ag.matmul(ctx, p[f"{prefix}.attn.out.weight"]),
                             p[f"{prefix}.attn.out.bias"]))

        y = ag.layer_norm(h, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
        y = ag.gelu(ag.add(ag.matmul(y, p[f"{prefix}.mlp.fc1.weight"]), p[f"{prefix}.mlp.fc1.bias"]))
        y = ag.add(ag.matmul(y, p[f"{prefix}.mlp.fc2.weight"]), p[f"{prefix}.mlp.fc2.bias"])
        return ag.add(h, y)

    def token_block_forward(self, h0: Tensor, capture_attn: list | None = None) -> list[Tensor]:
        """States h^1..h^L of the main stack."""
        states = []
        h = h0
        for i in range(self.config.depth):
            h = self._layer(h, f"token.{i}", capture_attn)
            states.append(h)
        return states

    def pixel_block_forward(
        self, h_tap: Tensor, h_last: Tensor, capture_attn: list | None = None
    ) -> Tensor:
        """Two layers over [final summary state, tap-layer patch states]."""
        h = ag.concat([h_last[:, :1, :], h_tap[:, 1:, :]], axis=1)
        for i in range(self.config.pixel_depth):
            h = self._layer(h, f"pixel.{i}", capture_attn)
        return h

    def forward(self, batches, capture_attn: list | None = None) -> ForwardOutput:
        p = self.config
        h0 = self.embed(batches)
        states = self.token_block_forward(h0, capture_attn)
        h_last = states[-1]
        h_tap = states[p.tap_layer - 1]
        pix = self.pixel_block_forward(h_tap, h_last, capture_attn)

        tok = ag.layer_norm(h_last[:, 1:, :], self.params["token_head_ln.gamma"],
                            self.params["token_head_ln.beta"])
        token_logits = ag.add(ag.matmul(tok, self.params["token_head.weight"]),
                              self.params["token_head.bias"])
        px = ag.layer_norm(pix[:, 1:, :], self.params["pixel_head_ln.gamma"],
                           self.params["pixel_head_ln.beta"])
        pixel_preds = ag.add(ag.matmul(px, self.params["pixel_head.weight"]),
                             self.params["pixel_head.bias"])
        return ForwardOutput(token_logits, pixel_preds, h_tap, h_last)

    # -- loss ---------------------------------------------------------------

    def loss(self, out: ForwardOutput, batches, reduction: str = "mean") -> LossTerms:
        """Cross-entropy plus pixel MSE over the corrupted positions only.

        With reduction="sum" both terms are sums over positions (the MSE
        element sum is divided by D), so sums from several micro-batches can
        be combined and normalized by the total position count afterwards.
        """
        if reduction not in ("mean", "sum"):
            raise ModelError(f"unknown reduction {reduction!r}")
        vectors, tags, tokens = self._stack(batches)
        corrupted = (tags != TAG_ORIGINAL).reshape(-1)
        flat_idx = np.flatnonzero(corrupted)
        if flat_idx.size == 0:
            raise ModelError("loss requires at least one corrupted position")
        cfg = self.config

        logits = ag.reshape(out.token_logits, (-1, cfg.vocab_size))
        ce = ag.cross_entropy(
            ag.take_rows(logits, flat_idx),
            tokens.reshape(-1)[flat_idx],
            reduction=reduction,
        )

        if isinstance(batches, CorruptedBatch):
            batches = [batches]
        targets = np.stack([b.pixel_targets for b in batches]).reshape(-1, cfg.patch_dim)
        targets = targets[flat_idx].astype(np.float32)
        if cfg.mae_norm_pixels:
            mu = targets.mean(axis=1, keepdims=True)
            sd = np.sqrt(targets.var(axis=1, keepdims=True) + 1e-6)
            targets = (targets - mu) / sd
        preds = ag.take_rows(ag.reshape(out.pixel_preds, (-1, cfg.patch_dim)), flat_idx)
        mse = ag.mse(preds, Tensor(targets), reduction=reduction)
        if reduction == "sum":
            mse = ag.mul(mse, 1.0 / cfg.patch_dim)

        total = ce if cfg.pixel_target_off else ag.add(ce, mse)
        return LossTerms(ce, mse, total, int(flat_idx.size))


def token_top1(out: ForwardOutput, batches) -> float:
    """Fraction of MASKED positions whose argmax token equals the target."""
    if isinstance(batches, CorruptedBatch):
        batches = [batches]
    tags = np.stack([b.tags for b in batches])
    tokens = np.stack([b.token_targets for b in batches])
    masked = tags == TAG_MASKED
    if not masked.any():
        return float("nan")
    pred = np.argmax(out.token_logits.data, axis=-1)
    return float((pred[masked] == tokens[masked]).mean())


# -- checkpoint format ------------------------------------------------------


def save_model(model: CcvitModel, path) -> None:
    """Versioned binary: magic, config JSON, then named float32 tensors."""
    cfg_json = json.dumps(asdict(model.config), sort_keys=True).encode()
    parts = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(cfg_json)), cfg_json,
             struct.pack("<I", len(model.params))]
    for name, tensor in model.params.items():
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", tensor.data.ndim))
        parts.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        parts.append(tensor.data.astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


class CheckpointError(ValueError):
    """Corrupt, truncated, or mismatched checkpoint file."""


def load_model(path) -> CcvitModel:
    """Rebuild a model from a checkpoint; bit-exact parameter round-trip."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    version, cfg_len = struct.unpack("<II", blob[4:12])
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    try:
        config = ModelConfig(**json.loads(blob[pos : pos + cfg_len].decode()))
        pos += cfg_len
        (n_tensors,) = struct.unpack("<I", blob[pos : pos + 4])
        pos += 4
        loaded: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", blob[pos : pos + 2])
            pos += 2
            name = blob[pos : pos + name_len].decode()
            pos += name_len
            (ndim,) = struct.unpack("<B", blob[pos : pos + 1])
            pos += 1
            shape = struct.unpack(f"<{ndim}I", blob[pos : pos + 4 * ndim])
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = blob[pos : pos + 4 * size]
            if len(raw) != 4 * size:
                raise CheckpointError(f"{path}: truncated tensor {name}")
            pos += 4 * size
            loaded[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")

    model = CcvitModel(config, seed=0)
    expected = {name: t.data.shape for name, t in model.params.items()}
    got = {name: arr.shape for name, arr in loaded.items()}
    if expected != got:
        raise CheckpointError(f"{path}: parameter set does not match config")
    for name, arr in loaded.items():
        model.params[name] = Tensor(arr, requires_grad=True)
    return model
