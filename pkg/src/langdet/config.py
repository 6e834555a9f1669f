"""Run configuration, loaded from a flat JSON object."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .detector import ModelConfig

DEFAULT_IOU = {"uavdt": 0.7, "visdrone": 0.5}


@dataclass
class RunConfig:
    # data
    style: str = "uavdt"
    train_size: int = 600
    eval_size: int = 200
    data_seed: int = 0
    weather_distribution: dict | None = None
    # model
    dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 6
    queries: int = 20
    ffn_dim: int = 128
    backbone_channels: list = field(default_factory=lambda: [16, 32, 64])
    activation: str = "relu"
    guidance_dim: int = 32
    reasoner_after: int | None = None
    # language bank
    n_variants: int = 8
    bank_dim: int = 64
    sigma_in: float = 0.3
    mu_out: float = 1.0
    prompt_temperature: float = 0.1
    prompt_epochs: int = 200
    prompt_lr: float = 0.01
    bank_path: str | None = None
    # losses
    relation_temperature: float = 0.5
    lambda_guidance: float = 0.1  # 1.0 slows detection learning several-fold at desk scale
    match_weights: list = field(default_factory=lambda: [1.0, 5.0, 2.0])
    eos_coef: float = 0.1
    # ablation flags
    reasoner: bool = True
    relation: bool = True
    # optimisation
    seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    max_grad_norm: float = 0.1
    eval_every: int = 5
    iou_threshold: float | None = None
    scene_prompts: list | None = None
    out_dir: str = "runs/default"

    @property
    def eval_iou(self) -> float:
        return self.iou_threshold if self.iou_threshold is not None else DEFAULT_IOU[self.style]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=3, image_size=64, dim=self.dim, heads=self.heads,
            enc_layers=self.enc_layers, dec_layers=self.dec_layers, queries=self.queries,
            ffn_dim=self.ffn_dim, backbone_channels=tuple(self.backbone_channels),
            activation=self.activation, reasoner=self.reasoner, relation=self.relation,
            bank_dim=self.bank_dim, style=self.style, guidance_dim=self.guidance_dim,
            reasoner_after=self.reasoner_after)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def validate(self) -> None:
        if self.style not in DEFAULT_IOU:
            raise ValueError(f"unknown style {self.style!r}")
        if self.relation_temperature <= 0 or self.prompt_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if len(self.match_weights) != 3:
            raise ValueError("match_weights holds (class, L1, IoU)")
        if self.reasoner_after is not None and not 0 <= self.reasoner_after <= self.enc_layers:
            raise ValueError(f"reasoner_after must lie in [0, {self.enc_layers}]")


def parse_ablation(text: str) -> dict:
    """``"reasoner=on,relation=off"`` -> ``{"reasoner": True, "relation": False}``."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, _, val = part.partition("=")
        if key not in ("reasoner", "relation") or val not in ("on", "off"):
            raise ValueError(f"bad ablation flag {part!r}; use reasoner=<on|off>,relation=<on|off>")
        out[key] = val == "on"
    return out
