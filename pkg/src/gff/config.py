"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Unknown keys, duplicate keys and unparsable values are rejected with the
offending line number. ``dumps`` writes every field (the resolved config),
which is what the CLI stores as ``run.lock``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from typing import Any

from gff.backbone import BackboneConfig
from gff.errors import ConfigError, ContractError, DimensionError
from gff.model import MODES, ModelConfig
from gff.synthdata import CorpusSpec, PerturbationConfig
from gff.trainer import DEFAULT_STAGE1, DEFAULT_STAGE2, StagePlan

FANIN = "fanin"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    ablation: str = "full"
    data_dir: str = "data"
    out_dir: str = "run"
    # backbone
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: float = 4.0
    backbone_std: str = FANIN  # "fanin" or a float
    # adapters + fusion
    bottleneck: int = 16
    adapter_biases: bool = True
    fuse_depth: int = 2
    fuse_heads: int = 4
    fuse_positional: bool = False
    # protocol
    stage1_lr: float = DEFAULT_STAGE1.lr
    stage1_epochs: int = DEFAULT_STAGE1.epochs
    stage1_batch: int = DEFAULT_STAGE1.batch_size
    stage2_lr: float = DEFAULT_STAGE2.lr
    stage2_epochs: int = DEFAULT_STAGE2.epochs
    stage2_batch: int = DEFAULT_STAGE2.batch_size
    # corpus
    train_real: int = 1000
    train_fake: int = 1000
    val_real: int = 100
    val_fake: int = 100
    test_real: int = 250
    test_fake: int = 250
    # perturbations
    blur_sigma: float = 1.0
    crop_fraction: float = 0.875
    jpeg_quality: int = 75
    noise_sigma: float = 0.02
    apply_probability: float = 0.5
    # sweep grid; empty bottlenecks means D/16, D/8, D/4, D/2
    sweep_bottlenecks: tuple = ()
    sweep_depths: tuple = (1, 2, 4, 8, 16)

    def __post_init__(self):
        if self.ablation not in MODES:
            raise ConfigError(f"ablation must be one of {', '.join(MODES)}, got {self.ablation!r}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.backbone_std != FANIN:
            try:
                if float(self.backbone_std) <= 0:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"backbone_std must be {FANIN!r} or a positive float") from None
        try:
            self.model_config()
            self.stage_plans()
            self.corpus_spec()
            self.perturbation()
            bns, depths = self.sweep_grid()
            for bn in bns:
                self.model_config(bottleneck=bn)
            for depth in depths:
                self.model_config(fuse_depth=depth)
        except (ContractError, DimensionError) as exc:
            raise ConfigError(str(exc)) from None

    # -- derived objects -----------------------------------------------------

    def model_config(self, bottleneck: int | None = None, fuse_depth: int | None = None) -> ModelConfig:
        bb = BackboneConfig(self.image_size, self.patch_size, self.embed_dim, self.num_heads,
                            self.num_blocks, self.mlp_ratio)
        std = None if self.backbone_std == FANIN else float(self.backbone_std)
        return ModelConfig(
            bb,
            bottleneck=self.bottleneck if bottleneck is None else bottleneck,
            adapter_biases=self.adapter_biases,
            fuse_depth=self.fuse_depth if fuse_depth is None else fuse_depth,
            fuse_heads=self.fuse_heads,
            fuse_positional=self.fuse_positional,
            backbone_std=std,
        )

    def stage_plans(self) -> tuple[StagePlan, StagePlan]:
        return (StagePlan(1, self.stage1_lr, self.stage1_epochs, self.stage1_batch),
                StagePlan(2, self.stage2_lr, self.stage2_epochs, self.stage2_batch))

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(self.seed, self.image_size, self.train_real, self.train_fake, self.val_real,
                          self.val_fake, self.test_real, self.test_fake)

    def perturbation(self) -> PerturbationConfig:
        return PerturbationConfig(self.blur_sigma, self.crop_fraction, self.jpeg_quality, self.noise_sigma,
                                  self.apply_probability)

    def sweep_grid(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        d = self.embed_dim
        bns = self.sweep_bottlenecks or tuple(max(1, d // k) for k in (16, 8, 4, 2))
        return tuple(bns), tuple(self.sweep_depths)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _parse_value(key: str, text: str) -> Any:
    kind = _TYPES[key]
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is int:
        return int(text, 10)
    if kind is float:
        return float(text)
    if kind is tuple:
        return tuple(int(p, 10) for p in text.replace(",", " ").split())
    return text


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_overrides(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse config text into a ``{key: value}`` dict without applying defaults."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = _parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


def loads(text: str, source: str = "<config>", **overrides) -> RunConfig:
    values = parse_overrides(text, source)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load(path: str | os.PathLike, **overrides) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text, str(path), **overrides)


def dumps(cfg: RunConfig) -> str:
    lines = ["# resolved run configuration"]
    for name in _FIELDS:
        lines.append(f"{name} = {_format_value(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def as_dict(cfg: RunConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)
