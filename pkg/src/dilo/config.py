"""Run configuration: one JSON document covering data, networks and both stages."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .amortized import Stage2Config
from .latentopt import Stage1Config
from .nets import NetConfig


@dataclass
class EvalConfig:
    align: bool = False
    allow_reflection: bool = False
    probe_reg: float = 1e-3
    probe_steps: int = 500
    probe_lr: float = 0.1
    explain_k: int = 12
    explain_samples: int = 256
    explain_mode: str = "latent_similarity"


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data_dir: str | None = None
    manifest: str | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "net": self.net.to_dict(),
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "eval": dict(self.eval.__dict__),
            "data_dir": self.data_dir,
            "manifest": self.manifest,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {"net", "stage1", "stage2", "eval", "data_dir", "manifest", "seed"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            net=NetConfig(**d.get("net", {})),
            stage1=Stage1Config(**d.get("stage1", {})),
            stage2=Stage2Config(**d.get("stage2", {})),
            eval=EvalConfig(**d.get("eval", {})),
            data_dir=d.get("data_dir"),
            manifest=d.get("manifest"),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed to every stochastic component."""
        d = self.to_dict()
        d["seed"] = seed
        d["stage1"]["seed"] = seed
        d["stage2"]["seed"] = seed
        return RunConfig.from_dict(d)
