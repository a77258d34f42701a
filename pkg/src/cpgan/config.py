"""Flat key=value run configuration with a typed schema and presets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    precision: str = "32"
    # data
    count: int = 2000
    resolution: int = 32
    top_r: int = 6
    # text encoder and memory
    embed_dim: int = 32
    d: int = 64
    k_mem: int = 8
    # image encoder
    d_o: int = 128
    d_e: int = 96
    r_o: int = 6
    r_e: int = 16
    enc_widths: tuple = (16, 32)
    # generator
    n_z: int = 16
    d_hat: int = 32
    base_size: int = 8
    g0_upsamples: int = 2
    # discriminators
    grid: int = 4
    duc_widths: tuple = (16, 32, 64)
    fgcd_widths: tuple = (16, 32)
    fgcd_hidden: int = 64
    # matching-score sharpness
    gamma1: float = 4.0
    gamma2: float = 5.0
    gamma3: float = 10.0
    # optimisation
    batch_size: int = 16
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_enc: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs_damsm: int = 10
    epochs_gan: int = 8
    lambda_tiscl: float = 1.0
    noise_threshold: float = 2.0
    # evaluation
    n_candidates: int = 10
    eval_count: int = 200

    def __post_init__(self):
        problems = []
        if self.precision not in ("32", "64"):
            problems.append(f"precision must be 32 or 64, got {self.precision!r}")
        for name in ("count", "resolution", "top_r", "embed_dim", "d", "k_mem", "d_o", "d_e", "r_o", "r_e",
                     "n_z", "d_hat", "base_size", "grid", "fgcd_hidden", "eval_count"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("lr_g", "lr_d", "lr_enc", "gamma1", "gamma2", "gamma3", "noise_threshold"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        if self.d % 2:
            problems.append("d must be even")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2 (mismatched pairs need another caption)")
        if self.n_candidates < 2:
            problems.append("n_candidates must be >= 2")
        if self.lambda_tiscl < 0:
            problems.append("lambda_tiscl must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("betas must lie in [0, 1)")
        if self.base_size * 4 != self.resolution:
            problems.append(f"three stages need base_size * 4 == resolution ({self.base_size} * 4 != {self.resolution})")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def stage_resolutions(self) -> tuple:
        return (self.base_size, self.base_size * 2, self.base_size * 4)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(str(x) for x in v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


_PARSERS = {int: int, float: float, str: str, tuple: _ints, bool: _bool}
SCHEMA = {f.name: type(f.default) for f in fields(RunConfig)}

PRESETS = {
    "desk": {},
    # tensor shapes of the full-size model; not trainable on a desk
    "paper-shape": {
        "resolution": 256, "base_size": 64, "g0_upsamples": 4, "d": 256, "embed_dim": 300, "d_o": 1024,
        "d_e": 768, "r_o": 36, "r_e": 64, "d_hat": 32, "n_z": 100, "batch_size": 72, "top_r": 36,
    },
}


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _PARSERS[SCHEMA[key]](text.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(key, value)
    return out


def build_config(preset: str = "desk", path=None, overrides: dict = None) -> RunConfig:
    """Preset, then the config file, then explicit overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    if path is not None:
        values.update(parse_text(Path(path).read_text(), str(path)))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(key, value) if isinstance(value, str) else value
    return replace(RunConfig(), **values)


def write_effective(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config_effective.txt"
    path.write_text(cfg.to_text())
    return path
