"""Run configuration: one JSON file, desk-scale defaults, cross-checked on load."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .decoding import DecodeParams
from .model import ModelConfig
from .resolution import StagePlan, default_stage_plan
from .training import TrainHyper
from .vocab import VocabManifest

# Values reported for the 7B/30B finetuning runs, next to the desk defaults used here.
REFERENCE_CONSTANTS = {
    "lr": 2e-5,
    "weight_decay": 0.1,
    "betas": (0.9, 0.95),
    "z_weight": 1e-5,
    "drop_p": 0.1,
    "dropout_p": 0.05,
    "text_top_k": 5,
    "image_temperature": 1.0,
    "image_top_k": 2000,
    "image_cfg": 4.0,
    "stage_sides_px": (512, 768, 1024),
    "codebook_size": 8192,
}

DESK_DEFAULTS = {
    "lr": 3e-3,  # from-scratch toy model, not a pretrained 7B
    "stage_sides_px": (64, 96, 128),  # same 1 : 1.5 : 2 progression
    "codebook_size": 16,
}


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass
class TrainSection:
    lr: float = DESK_DEFAULTS["lr"]
    weight_decay: float = REFERENCE_CONSTANTS["weight_decay"]
    betas: tuple[float, float] = REFERENCE_CONSTANTS["betas"]
    z_weight: float = REFERENCE_CONSTANTS["z_weight"]
    drop_p: float = REFERENCE_CONSTANTS["drop_p"]
    dropout_p: float = 0.0
    batch_size: int = 8
    steps_per_stage: tuple[int, ...] = (200, 100, 50)


@dataclass
class RunConfig:
    vocab: dict = field(default_factory=lambda: {
        "text_size": 256, "codebook_size": DESK_DEFAULTS["codebook_size"], "max_side": 16, "patch_px": 8,
    })
    codebook_path: str | None = None
    stages: dict = field(default_factory=lambda: default_stage_plan().to_dict())
    model: dict = field(default_factory=lambda: {"layers": 4, "heads": 4, "model_dim": 64, "max_seq": 512})
    train: TrainSection = field(default_factory=TrainSection)
    text_decode: dict = field(default_factory=lambda: {"temperature": 1.0, "top_k": REFERENCE_CONSTANTS["text_top_k"], "cfg_scale": 0.0})
    image_decode: dict = field(default_factory=lambda: {
        "temperature": REFERENCE_CONSTANTS["image_temperature"],
        "top_k": REFERENCE_CONSTANTS["image_top_k"],
        "cfg_scale": REFERENCE_CONSTANTS["image_cfg"],
    })
    seed: int = 0

    # -- derived objects ----------------------------------------------------
    def manifest(self) -> VocabManifest:
        return VocabManifest(**self.vocab)

    def stage_plan(self) -> StagePlan:
        return StagePlan.from_dict(self.stages)

    def model_config(self) -> ModelConfig:
        data = dict(self.model)
        data.setdefault("vocab_total", self.manifest().total)
        data.setdefault("dropout_p", self.train.dropout_p)
        data["seed"] = self.seed
        return ModelConfig(**data)

    def hyper(self, stage: int) -> TrainHyper:
        t = self.train
        return TrainHyper(
            lr=t.lr, weight_decay=t.weight_decay, betas=tuple(t.betas), z_weight=t.z_weight,
            drop_p=t.drop_p, batch_size=t.batch_size, steps=t.steps_per_stage[stage], seed=self.seed,
        )

    def text_params(self) -> DecodeParams:
        return DecodeParams(**self.text_decode)

    def image_params(self) -> DecodeParams:
        return DecodeParams(**self.image_decode)

    # -- validation ---------------------------------------------------------
    def violations(self) -> list[str]:
        out: list[str] = []
        try:
            manifest = self.manifest()
        except (TypeError, ValueError) as err:
            return [f"vocab: {err}"]
        try:
            plan = self.stage_plan()
        except (KeyError, TypeError, ValueError) as err:
            out.append(f"stages: {err}")
            plan = None
        if plan is not None:
            for i, stage in enumerate(plan.stages):
                if not stage.buckets:
                    out.append(f"stages[{i}]: no buckets")
                for b in stage.buckets:
                    rows, cols = b.grid_shape(manifest.patch_px)
                    if b.width_px % manifest.patch_px or b.height_px % manifest.patch_px:
                        out.append(f"stages[{i}]: bucket {b.width_px}x{b.height_px} not a multiple of patch_px")
                    if rows > manifest.max_side or cols > manifest.max_side:
                        out.append(f"stages[{i}]: bucket {b.width_px}x{b.height_px} exceeds max_side {manifest.max_side}")
            if len(self.train.steps_per_stage) != len(plan.stages):
                out.append(f"train.steps_per_stage has {len(self.train.steps_per_stage)} entries for {len(plan.stages)} stages")
        try:
            mc = self.model_config()
            out += [f"model: {p}" for p in mc.problems()]
            if mc.vocab_total != manifest.total:
                out.append(f"model.vocab_total {mc.vocab_total} != manifest total {manifest.total}")
        except TypeError as err:
            out.append(f"model: {err}")
        t = self.train
        if t.lr < 0:
            out.append("train.lr must be >= 0")
        if not 0 <= t.drop_p <= 1:
            out.append("train.drop_p must lie in [0, 1]")
        if t.batch_size < 1:
            out.append("train.batch_size must be >= 1")
        for name in ("text_decode", "image_decode"):
            try:
                params = DecodeParams(**getattr(self, name))
            except (TypeError, ValueError) as err:
                out.append(f"{name}: {err}")
        return out

    def check(self) -> "RunConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        data = asdict(self)
        data["train"]["betas"] = list(self.train.betas)
        data["train"]["steps_per_stage"] = list(self.train.steps_per_stage)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in sorted(unknown)])
        train = dict(data.pop("train", {}))
        unknown = set(train) - set(TrainSection.__dataclass_fields__)
        if unknown:
            raise ConfigError([f"unknown train key {k!r}" for k in sorted(unknown)])
        if "betas" in train:
            train["betas"] = tuple(train["betas"])
        if "steps_per_stage" in train:
            train["steps_per_stage"] = tuple(train["steps_per_stage"])
        return cls(train=TrainSection(**train), **data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else replace(self, seed=seed)
