"""Flat key = value configuration shared by the scene generator and engine.

The file format is line based: 'key = value', '#' starts a comment. Unknown
keys are rejected so typos fail loudly. ``print-config`` dumps the defaults.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .errors import ConfigError
from .geometry import CameraIntrinsics


@dataclass
class Config:
    # camera (FOV model; omega = 0 keeps the synthetic pipeline pinhole)
    fu: float = 500.0
    fv: float = 500.0
    u0: float = 320.0
    v0: float = 240.0
    omega: float = 0.0
    image_width: int = 640
    image_height: int = 480

    # retrieval
    quickshift_bandwidth: float = 40.0
    quickshift_link_factor: float = 3.0
    top_candidates: int = 10
    kl_epsilon: float = 1e-6
    direct_index_level: int = 1
    hamming_match_threshold: int = 50

    # verification
    mu_e: float = 3.0
    disac_iterations: int = 50
    min_inliers: int = 4
    refine_window_px: float = 3.0
    prior_window_px: float = 24.0
    prior_staleness_s: float = 2.0

    # back-end
    parallax_threshold_deg: float = 3.0
    min_triangulation_points: int = 5
    ba_max_iterations: int = 100
    local_ba_max_iterations: int = 20
    lm_lambda_init: float = 1e-4
    rng_seed: int = 0

    # scene generation
    seed: int = 7
    n_models: int = 12
    points_per_model: int = 80
    descriptors_per_point: int = 2
    model_extent_m: float = 0.3
    n_instances: int = 4
    instance_ring_m: float = 0.45
    instance_models: str = ""  # comma-separated model ids; empty = round robin
    n_frames: int = 40
    frame_rate_hz: float = 10.0
    orbit_radius_m: float = 2.0
    orbit_height_m: float = 0.6
    orbit_span_deg: float = 120.0
    clutter_per_frame: int = 20
    pixel_noise_px: float = 0.0
    descriptor_noise_bits: int = 0
    feature_dropout: float = 0.0  # chance a visible model point emits no feature
    true_scale: float = 1.0  # map units per meter: map coords = metric * s*
    feature_levels: int = 1

    # vocabulary corpus
    vocab_branching: int = 8
    vocab_depth: int = 3
    vocab_images: int = 40
    vocab_descriptors_per_image: int = 300
    vocab_seed: int = 1

    def validate(self):
        if self.fu <= 0 or self.fv <= 0:
            raise ConfigError("focal lengths must be positive")
        if not 0 <= self.omega < math.pi:
            raise ConfigError("omega must lie in [0, pi)")
        if self.true_scale <= 0:
            raise ConfigError("true_scale must be positive")
        for name in (
            "image_width", "image_height", "top_candidates", "n_models",
            "points_per_model", "descriptors_per_point", "n_frames",
            "min_inliers", "disac_iterations", "vocab_branching", "vocab_depth",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_instances", "clutter_per_frame", "descriptor_noise_bits"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.kl_epsilon <= 0:
            raise ConfigError("kl_epsilon must be positive")
        if not 0.0 <= self.feature_dropout < 1.0:
            raise ConfigError("feature_dropout must lie in [0, 1)")
        return self

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fu, self.fv, self.u0, self.v0, self.omega)

    def bounds(self):
        return (self.image_width, self.image_height)

    def accept_score(self) -> float:
        return self.min_inliers * self.mu_e / 3.0

    def instance_model_ids(self):
        if self.instance_models.strip():
            ids = [int(v) for v in self.instance_models.split(",")]
            if len(ids) != self.n_instances:
                raise ConfigError("instance_models must list one model per instance")
            if any(not 0 <= i < self.n_models for i in ids):
                raise ConfigError("instance_models ids must reference generated models")
            return ids
        return [i % self.n_models for i in range(self.n_instances)]


def _coerce(raw: str, target_type):
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def parse_config_text(text: str, base: Config | None = None) -> Config:
    cfg = base or Config()
    known = {f.name: f.type for f in fields(Config)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        current = getattr(cfg, key)
        try:
            setattr(cfg, key, _coerce(raw, type(current)))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
    return cfg.validate()


def read_config(path, base: Config | None = None) -> Config:
    with open(path) as f:
        return parse_config_text(f.read(), base)


def config_text(cfg: Config) -> str:
    lines = []
    for f in fields(Config):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def write_config(cfg: Config, path):
    with open(path, "w") as f:
        f.write(config_text(cfg))
