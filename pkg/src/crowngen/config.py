"""Pipeline configuration, the key=value config file format, and hashing.

Config files are a TOML-style subset: one `key = value` per line, values
in JSON syntax (numbers, true/false, "strings", [lists]), # comments.
Every run writes back a resolved snapshot in the same format.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .voxelgrid import GridSpec

PREDICTORS = ("oracle", "trainable")
LOSS_MODES = ("cmpl", "cpl", "chamfer")
FIDELITY_DIRECTIONS = ("pred_to_gt", "gt_to_pred")


@dataclass
class PipelineConfig:
    """Resolved settings for data generation, training, and inference."""

    # grid geometry: the crop cube is centered on the prepared tooth
    dims: tuple[int, int, int] = (128, 128, 128)
    spacing: float = 0.15
    crop_mm: float = 19.2

    # metrics
    tau_mm: float = 0.3
    fidelity_direction: str = "pred_to_gt"

    # pipeline toggles (the ablation axes)
    predictor: str = "oracle"
    use_refiner: bool = True
    use_tp_prompt: bool = True
    loss: str = "cmpl"

    # coarse-oracle perturbation
    dilate_r: int = 0
    erode_r: int = 0
    flip_prob: float = 0.0
    flip_band: int = 2

    # training schedule (desk-scale stand-ins for the full-scale settings)
    seed: int = 0
    stage_boundary: int = 0
    iterations: int = 2000
    batch_size: int = 2
    lr: float = 3e-3
    weight_decay: float = 1e-2

    # model sizes
    channels: int = 16
    hidden: int = 64

    # geometry estimators / reconstruction
    curvature_k: int = 16
    kappa_max: float = 3.0
    smoothing_sigma: float = 2.0

    # synthetic dataset
    n_cases: int = 200
    case_scale: float = 1.0
    split_ratio: tuple[int, int, int] = (7, 1, 1)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.split_ratio = tuple(int(r) for r in self.split_ratio)
        if len(self.dims) != 3 or any(d < 2 for d in self.dims):
            raise ConfigError(f"dims must be three integers >= 2, got {self.dims}")
        if self.spacing <= 0:
            raise ConfigError("spacing must be positive")
        if min(self.dims) * self.spacing < self.crop_mm - 1e-9:
            raise ConfigError(
                f"grid extent {min(self.dims) * self.spacing:.3f} mm does not cover "
                f"the {self.crop_mm} mm crop"
            )
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"predictor must be one of {PREDICTORS}")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"loss must be one of {LOSS_MODES}")
        if self.fidelity_direction not in FIDELITY_DIRECTIONS:
            raise ConfigError(f"fidelity_direction must be one of {FIDELITY_DIRECTIONS}")
        if self.tau_mm <= 0:
            raise ConfigError("tau_mm must be positive")
        if len(self.split_ratio) != 3 or any(r < 0 for r in self.split_ratio) \
                or sum(self.split_ratio) == 0:
            raise ConfigError(f"bad split ratio {self.split_ratio}")

    def grid_spec(self) -> GridSpec:
        """Crop cube centered on the case origin (the prepared tooth)."""
        extent = tuple(d * self.spacing for d in self.dims)
        origin = tuple(-e / 2.0 for e in extent)
        return GridSpec(self.dims, self.spacing, origin)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dims"] = list(self.dims)
        out["split_ratio"] = list(self.split_ratio)
        return out

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("ascii")).hexdigest()[:16]


_FIELD_NAMES = {f.name for f in fields(PipelineConfig)}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc}") from exc


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    values = (base.to_dict() if base is not None else {})
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELD_NAMES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(value.strip())
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base)


def apply_overrides(config: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply `key=value` strings (CLI flags) on top of a config."""
    values = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in _FIELD_NAMES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(value.strip())
    return PipelineConfig(**values)


def config_to_text(config: PipelineConfig) -> str:
    lines = []
    for key, value in sorted(config.to_dict().items()):
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def write_config_snapshot(path, config: PipelineConfig):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(config))
