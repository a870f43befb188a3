"""Run configuration: a flat key=value file with [section] headers.

Grammar, one statement per line:

    # comment                 full-line or trailing comments
    [section]                 switches the section for following keys
    key = value               assigns section.key

Whitespace around keys and values is ignored. Booleans are the literal
words true/false. Every key must appear in the schema below; unknown keys
or sections are errors, as are duplicate assignments. Command-line
overrides reuse the dotted form, e.g. trainer.epochs=5.

The model's input width per patch is always derived as
3 * patch_size * patch_size (RGB), and model.vocab_size defaults to
tokenizer.k so the two stay consistent unless explicitly split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed config text or an out-of-schema key."""


_BOOL = {"true": True, "false": False}


def _to_bool(raw: str) -> bool:
    if raw not in _BOOL:
        raise ConfigError(f"expected true or false, got {raw!r}")
    return _BOOL[raw]


def _to_int(raw: str) -> int:
    try:
        return int(raw, 10)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}") from None


def _to_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"expected a number, got {raw!r}") from None


SCHEMA = {
    "seed": _to_int,
    "paths.dataset": str,
    "paths.codebook": str,
    "paths.run_dir": str,
    "tokenizer.k": _to_int,
    "tokenizer.iterations": _to_int,
    "tokenizer.sample_images": _to_int,
    "tokenizer.patch_size": _to_int,
    "tokenizer.init": str,
    "corruption.mask_count": _to_int,
    "corruption.replace_count": _to_int,
    "corruption.min_block": _to_int,
    "corruption.fixed": _to_bool,
    "model.embed_dim": _to_int,
    "model.depth": _to_int,
    "model.tap_layer": _to_int,
    "model.num_heads": _to_int,
    "model.mlp_ratio": _to_int,
    "model.vocab_size": _to_int,
    "model.grid_h": _to_int,
    "model.grid_w": _to_int,
    "model.pixel_target_off": _to_bool,
    "model.mae_norm_pixels": _to_bool,
    "trainer.epochs": _to_int,
    "trainer.batch_size": _to_int,
    "trainer.accum_steps": _to_int,
    "trainer.peak_lr": _to_float,
    "trainer.min_lr": _to_float,
    "trainer.warmup_epochs": _to_float,
    "trainer.beta1": _to_float,
    "trainer.beta2": _to_float,
    "trainer.eps": _to_float,
    "trainer.weight_decay": _to_float,
    "trainer.replacement_off": _to_bool,
    "bench.images": _to_int,
    "bench.repetitions": _to_int,
}


def parse_kv(text: str) -> dict[str, str]:
    """Parse config text into a dotted-key -> raw-string mapping."""
    out: dict[str, str] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section name")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        dotted = f"{section}.{key}" if section else key
        if dotted in out:
            raise ConfigError(f"line {lineno}: duplicate key {dotted}")
        out[dotted] = value
    return out


def _coerce(mapping: dict[str, str]) -> dict[str, object]:
    typed: dict[str, object] = {}
    for key, raw in mapping.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        try:
            typed[key] = SCHEMA[key](raw)
        except ConfigError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return typed


@dataclass(frozen=True)
class TokenizerSection:
    k: int = 512
    iterations: int = 20
    sample_images: int = 0  # 0 means every image
    patch_size: int = 8
    init: str = "random"


@dataclass(frozen=True)
class BenchSection:
    images: int = 64
    repetitions: int = 30


@dataclass(frozen=True)
class PathsSection:
    dataset: str = ""
    codebook: str = ""
    run_dir: str = "runs/run"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchSection = field(default_factory=BenchSection)


def _section(typed: dict[str, object], name: str) -> dict[str, object]:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in typed.items() if k.startswith(prefix)}


def build_run_config(mapping: dict[str, str]) -> RunConfig:
    """Assemble a validated RunConfig from raw dotted key=value pairs."""
    typed = _coerce(mapping)
    seed = int(typed.get("seed", 0))
    paths = PathsSection(**_section(typed, "paths"))
    tok = TokenizerSection(**_section(typed, "tokenizer"))

    model_kw = _section(typed, "model")
    model_kw.setdefault("vocab_size", tok.k)
    model_kw["patch_size"] = tok.patch_size
    model_kw["patch_dim"] = 3 * tok.patch_size * tok.patch_size
    try:
        model = ModelConfig(**model_kw)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None

    train_kw = _section(typed, "trainer")
    corr = _section(typed, "corruption")
    train_kw["mask_count"] = corr.get("mask_count", 24)
    train_kw["replace_count"] = corr.get("replace_count", 6)
    train_kw["min_block"] = corr.get("min_block", 16)
    train_kw["fixed_corruption"] = corr.get("fixed", False)
    train_kw["seed"] = seed
    train_kw["dataset_path"] = paths.dataset
    train_kw["codebook_path"] = paths.codebook
    try:
        trainer = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(f"trainer: {exc}") from None

    bench = BenchSection(**_section(typed, "bench"))
    return RunConfig(seed, paths, tok, model, trainer, bench)


def load_run_config(path, overrides=()) -> RunConfig:
    """Read a config file, apply dotted key=value override strings, build."""
    with open(path, "r", encoding="utf-8") as fh:
        mapping = parse_kv(fh.read())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        mapping[key] = value
    return build_run_config(mapping)
