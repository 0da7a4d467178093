"""Training configuration: every tunable with its default, YAML round-trip."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .core import ValidationError

DEFAULT_LAMBDAS = (1.0, 1.0, 0.001, 1.0, 10.0, 100.0)
LOSS_TERMS = ("flow", "regular", "perc", "ctx", "adv", "cycle")


@dataclass
class TrainConfig:
    # correspondence
    alpha: float = 100.0
    feature_channels: int = 64
    encoder_width: int = 16
    # flow
    mu: str = "relative"            # relative: max source similarity per location; one: mu = 1
    patch_n: int = 5
    flow_width: int = 16
    flow_loss_levels: tuple = (1, 2)   # pyramid levels used by the sampling-correctness loss
    flow_loss_scales: int = 2          # finest flow scales supervised
    # refinement and losses
    refine_width: int = 64
    refine_blocks: int = 7
    refine_start: int = 8
    disc_width: int = 32
    disc_scales: int = 1
    spectral_norm: bool = False
    non_saturating: bool = False
    ctx_bandwidth: float = 0.5
    ctx_levels: tuple = (1, 2)
    lambdas: tuple = DEFAULT_LAMBDAS
    # schedule
    flow_pretrain_epochs: int = 20
    cwm_joint_epochs: int = 6        # longer joint runs drift under the adversarial term at desk scale
    steps_per_epoch: int = 10
    batch_size: int = 4
    lr_cwm: float = 2e-4
    lr_disc: float = 2e-4
    joint_lr_decay: bool = True      # linear decay to zero over the joint stage
    pairs_per_subject: int | None = None
    # implicit reconstruction
    gdtm_feature_channels: int = 32
    gdtm_width: int = 32
    mlp_hidden: tuple = (128, 96, 64)
    lr_gdtm: float = 1e-3
    geometry_steps: int = 2000
    texture_steps: int = 1500
    gdtm_views_per_step: int = 2
    gdtm_points_per_view: int = 4096
    geometry_subjects: tuple | None = None   # None: every training subject
    texture_subjects: tuple | None = None
    texture_input: str = "composite"         # composite: w_r^s for both branches; warped: w_r
    color_augment: bool = True
    grid_resolution: int = 64
    gdtm_checkpoint_every: int = 500
    # run
    image_size: int = 128
    seed: int = 0
    dtype: str = "float32"
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    checkpoint_every_epoch: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("flow_loss_levels", "ctx_levels", "lambdas", "mlp_hidden"):
            setattr(self, name, tuple(getattr(self, name)))
        for name in ("geometry_subjects", "texture_subjects"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, tuple(v))
        self.validate()

    def validate(self) -> None:
        if len(self.lambdas) != 6 or any(l < 0 for l in self.lambdas):
            raise ValidationError("lambdas must be six non-negative weights")
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive")
        if self.patch_n < 3 or self.patch_n % 2 == 0:
            raise ValidationError("patch_n must be odd and at least 3")
        if self.mu not in ("relative", "one"):
            raise ValidationError(f"unknown mu mode {self.mu!r}")
        if self.texture_input not in ("composite", "warped"):
            raise ValidationError(f"unknown texture_input {self.texture_input!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        import torch
        return torch.float64 if self.dtype == "float64" else torch.float32

    def lambda_dict(self) -> dict:
        return dict(zip(LOSS_TERMS, self.lambdas))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "TrainConfig":
        data = {}
        if path is not None:
            data = yaml.safe_load(Path(path).read_text()) or {}
            if not isinstance(data, dict):
                raise ValidationError(f"{path}: config must be a mapping")
            data = data.get("train", data)
        data.update(overrides or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as YAML (numbers, lists, null...)."""
    if "=" not in text:
        raise ValidationError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    parsed = yaml.safe_load(value)
    if isinstance(parsed, str):
        # YAML 1.1 reads "1e-4" as a string
        try:
            parsed = float(parsed)
        except ValueError:
            pass
    return key.strip(), parsed


def desk_config(**kw) -> TrainConfig:
    """Defaults sized for a single-CPU desk run."""
    base = dict(geometry_steps=2500, texture_steps=1500)
    base.update(kw)
    return TrainConfig(**base)
