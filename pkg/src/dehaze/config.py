"""Experiment configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import SsimConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    seed: int = 0

    # data synthesis
    train_scenes: int = 64
    val_scenes: int = 16
    samples_per_scene: int = 4
    height: int = 48
    width: int = 64
    rgbd_list: str = ""
    refine_scenes: int = 32
    target_images: int = 32
    vivid_saturation: float = 1.4
    vivid_contrast: float = 1.2

    # optimisation
    learning_rate: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size_dehaze: int = 4
    batch_size_refine: int = 4
    dehaze_steps: int = 2000
    refine_content_steps: int = 500
    refine_adversarial_steps: int = 500
    early_stop_window: int = 100
    early_stop_tolerance: float = 0.001
    val_every: int = 250
    checkpoint_every: int = 500
    ablation_no_transmission: bool = False
    gradcheck_entries: int = 4

    # losses
    ssim_patch: int = 13
    ssim_c1: float = 0.02
    ssim_c2: float = 0.03
    ssim_constants: str = "literal"
    weight_cs_mse: float = 1.0
    weight_fs_mse: float = 1.0
    weight_fs_ssim: float = 1.0
    weight_d_mse: float = 1.0
    weight_d_ssim: float = 1.0
    weight_rf_mse: float = 1.0
    weight_rf_ssim: float = 1.0
    adversarial_weight: float = 1e-3

    # architecture
    haze_width: int = 32
    haze_blocks: int = 3
    haze_layers_per_block: int = 3
    generator_depth: int = 10
    generator_width: int = 32
    generator_skips: int = 4
    zero_init_heads: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = [
            "train_scenes", "samples_per_scene", "height", "width", "learning_rate", "batch_size_dehaze",
            "batch_size_refine", "ssim_patch", "ssim_c1", "ssim_c2", "haze_width", "haze_blocks",
            "haze_layers_per_block", "generator_depth", "generator_width", "early_stop_window",
            "val_every", "checkpoint_every",
        ]
        bad = [name for name in positive if getattr(self, name) <= 0]
        bad += [n for n in ("val_scenes", "dehaze_steps", "refine_content_steps", "refine_adversarial_steps",
                            "refine_scenes", "target_images", "gradcheck_entries") if getattr(self, n) < 0]
        if bad:
            raise ConfigError(f"values must be positive: {', '.join(bad)}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.ssim_constants not in ("literal", "k_params"):
            raise ConfigError(f"ssim_constants must be 'literal' or 'k_params', got {self.ssim_constants!r}")

    @classmethod
    def paper_scale(cls, **overrides) -> "Config":
        """Dataset and batch sizes of the original training setup."""
        base = dict(
            train_scenes=1299, val_scenes=150, samples_per_scene=20, height=230, width=310,
            batch_size_dehaze=16, batch_size_refine=8, refine_scenes=3000, target_images=3000,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def ssim(self) -> SsimConfig:
        return SsimConfig(self.ssim_patch, self.ssim_c1, self.ssim_c2, self.ssim_constants)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(name: str, kind, raw: str):
    if kind is bool or kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind if isinstance(kind, str) else kind.__name__}")
    return raw.strip().strip('"')


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines (``#`` starts a comment). Unknown keys are errors."""
    types = {f.name: f.type for f in fields(Config)}
    values = {}
    unknown = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            unknown.append(key)
            continue
        values[key] = _parse(key, types[key], raw)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return dataclasses.replace(base or Config(), **values)


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
