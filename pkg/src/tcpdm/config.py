"""Run configuration: flat key=value files with typed, validated keys.

Precedence, lowest to highest: built-in desk defaults, the profile file named
by TCPDM_PROFILE, the --config file, --set key=value overrides, then direct
flags (--seed, --out). Every resolved run echoes its full configuration into
the output directory as resolved_config.txt.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields

from .errors import InvalidConfig

PROFILE_ENV = "TCPDM_PROFILE"


@dataclass
class ScheduleSection:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.05
    sigma_mode: str = "beta"


@dataclass
class PatchSection:
    p: int = 16
    r: int = 8
    blend_mode: str = "denoised"


@dataclass
class TemporalSection:
    w_T: float = 1.0
    omega: float = 0.9
    collision: str = "average"
    ransac_iters: int = 1000
    ransac_threshold: float = 1.0
    ransac_confidence: float = 0.999
    min_motion: float = 0.5


@dataclass
class DenoiserSection:
    L: int = 8
    base_width: int = 16
    depth: int = 2
    use_attention: bool = False
    ir_replicate_3: bool = False
    time_embed_dim: int = 64
    num_groups: int = 8


@dataclass
class TrainSection:
    lr: float = 1e-3
    n_images: int = 8
    patches_per_image: int = 4
    iters: int = 5000
    ema_momentum: float = 0.999
    seed: int = 0
    checkpoint_interval: int = 1000


@dataclass
class SynthSection:
    H: int = 32
    W: int = 32
    N: int = 6
    L: int = 8
    tau: float = 0.25
    noise: float = 0.0
    scene: str = "two_shapes"
    seed: int = 0


@dataclass
class TranslateSection:
    seed: int = 0
    use_ema: bool = True


@dataclass
class PathsSection:
    dataset: str = "dataset"
    checkpoint: str = "checkpoint"
    output: str = "out"


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    patch: PatchSection = field(default_factory=PatchSection)
    temporal: TemporalSection = field(default_factory=TemporalSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    train: TrainSection = field(default_factory=TrainSection)
    synth: SynthSection = field(default_factory=SynthSection)
    translate: TranslateSection = field(default_factory=TranslateSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def flat_items(self):
        """All (dotted_key, value) pairs in declaration order."""
        for section_field in fields(self):
            section = getattr(self, section_field.name)
            for f in fields(section):
                key = f"{section_field.name}.{f.name}"
                # spec naming: RANSAC keys live under temporal.ransac.*
                key = key.replace("temporal.ransac_", "temporal.ransac.")
                yield key, getattr(section, f.name)

    def set_key(self, key: str, raw_value: str) -> None:
        """Assign one dotted key from its textual value; unknown keys are rejected."""
        lookup = key.replace("temporal.ransac.", "temporal.ransac_")
        section_name, _, field_name = lookup.partition(".")
        if not field_name or not hasattr(self, section_name):
            raise InvalidConfig(f"unknown config key {key!r}")
        section = getattr(self, section_name)
        target = None
        for f in fields(section):
            if f.name == field_name:
                target = f
                break
        if target is None:
            raise InvalidConfig(f"unknown config key {key!r}")
        current = getattr(section, field_name)
        try:
            if isinstance(current, bool):
                low = raw_value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw_value)
                value = low in ("true", "1", "yes")
            elif isinstance(current, int):
                value = int(raw_value)
            elif isinstance(current, float):
                value = float(raw_value)
            else:
                value = raw_value.strip()
        except ValueError as exc:
            raise InvalidConfig(f"bad value for {key}: {raw_value!r}") from exc
        setattr(section, field_name, value)

    def resolved_text(self) -> str:
        lines = [f"{key}={value}" for key, value in self.flat_items()]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()


def apply_config_file(cfg: RunConfig, path) -> None:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InvalidConfig(f"{path}:{lineno}: expected key=value, got {line!r}")
            cfg.set_key(key.strip(), value.strip())


def load_run_config(
    config_path=None, overrides=(), profile_path=None
) -> RunConfig:
    """Assemble the effective configuration from defaults, profile, file and
    --set overrides (in that order)."""
    cfg = RunConfig()
    profile = profile_path or os.environ.get(PROFILE_ENV)
    if profile:
        apply_config_file(cfg, profile)
    if config_path:
        apply_config_file(cfg, config_path)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfig(f"--set expects key=value, got {item!r}")
        cfg.set_key(key.strip(), value.strip())
    return cfg


def write_resolved(cfg: RunConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.txt"), "w") as fh:
        fh.write(cfg.resolved_text())
