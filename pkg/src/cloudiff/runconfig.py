"""Aggregated run configuration for every CLI subcommand.

One flat namespace holds every knob of the pipeline. Values come from
built-in defaults, then an optional flat key=value config file, then command
line flags; each layer overrides the previous one. Validation happens once,
up front, against the owning module's constructors.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .change_detect import ChangeConfig
from .depth_filter import FilterConfig
from .pipeline import pipeline_registration_config
from .registration import RegistrationConfig


@dataclass
class RunConfig:
    # input / output
    dataset: str = ""
    output: str = ""
    overwrite: bool = False
    # synthesis
    seed: int = 0
    noise: str = "none"          # none | small | big
    variant: str = "none"        # none | mirror | dark
    density: float = 4.0
    height: float = 16.0
    speed: float = 4.0
    rate: float = 5.0
    pitch_down_deg: float = 45.0
    # temporal filter
    delta_d: float = 1.0
    alpha: int = 2
    window: int = 2
    # change detection
    th_d: float = 30.0
    th_f: float = 20.0
    th_ch: float = 3.2
    rho_o: float = 0.8
    rho_p: float = 0.8
    # registration (pipeline defaults; see pipeline_registration_config)
    max_iterations: int = 40
    translation_epsilon: float = 1e-2
    rotation_epsilon: float = 1e-2
    correspondence_distance: float = 1.0
    knn_for_covariance: int = 10
    fitness_threshold: float = 0.8
    max_translation: float = 2.5
    # orchestration
    poses: str = "ground-truth"  # ground-truth | odometry | fused
    threads: int = 1
    align: bool = False
    # evaluate inputs
    est: str = ""
    gt: str = ""
    # sweep inputs
    parameter: str = ""
    values: str = ""

    def filter_config(self) -> FilterConfig:
        return FilterConfig(delta_d=self.delta_d, alpha=self.alpha,
                            window=self.window)

    def change_config(self) -> ChangeConfig:
        return ChangeConfig(th_ch=self.th_ch, rho_p=self.rho_p,
                            rho_o=self.rho_o, th_d=self.th_d, th_f=self.th_f)

    def registration_config(self) -> RegistrationConfig:
        return RegistrationConfig(
            max_iterations=self.max_iterations,
            translation_epsilon=self.translation_epsilon,
            rotation_epsilon=self.rotation_epsilon,
            correspondence_distance=self.correspondence_distance,
            knn_for_covariance=self.knn_for_covariance,
            fitness_threshold=self.fitness_threshold,
            max_translation=self.max_translation,
            thread_count=self.threads)

    def validate(self) -> None:
        """Build every sub-config so invalid values fail before any work."""
        self.filter_config()
        self.change_config()
        self.registration_config()
        if self.noise not in ("none", "small", "big"):
            raise ValueError(f"noise must be none|small|big, got {self.noise!r}")
        if self.variant not in ("none", "mirror", "dark"):
            raise ValueError(f"variant must be none|mirror|dark, got {self.variant!r}")
        if self.poses not in ("ground-truth", "odometry", "fused"):
            raise ValueError(
                f"poses must be ground-truth|odometry|fused, got {self.poses!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.density <= 0:
            raise ValueError("density must be positive")


_FIELD_TYPES = {f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
                for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_config_file(path) -> dict:
    """Parse a flat `key = value` file ('#' starts a comment)."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected `key = value`")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def build_config(file_path: str | None, overrides: dict) -> RunConfig:
    cfg = RunConfig()
    if file_path:
        for key, value in load_config_file(file_path).items():
            setattr(cfg, key, value)
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


SWEEPABLE = ("th_f", "th_ch", "rho_o", "rho_p", "th_d", "delta_d", "alpha")
