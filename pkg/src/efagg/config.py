"""Run configuration with JSON serialization and shipped presets."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

from .model import VARIANTS, ModelConfig
from .taskgen import CORRUPTION_GRID, FAMILIES


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce a run. Defaults are the paper-scale values."""

    variant: Optional[str] = None
    family: str = "rbf"
    latent_dim: int = 128
    np_hidden: int = 128
    ba_hidden: int = 64
    ba_layers: int = 4
    dec_hidden: int = 128
    dec_layers: int = 3
    k: int = 2
    cavi_steps: int = 5
    n_samples: Optional[int] = None
    eval_samples: int = 32
    steps: int = 100_000
    batch_size: int = 16
    lr: float = 5e-4
    seeds: list = field(default_factory=lambda: [0])
    eval_tasks: int = 5000
    eval_seed: int = 10_000
    corruption_grid: list = field(default_factory=lambda: list(CORRUPTION_GRID))
    robust_prior: Optional[dict] = None
    learn_robust_prior: bool = False
    prior_mean_std: float = 0.1
    log_every: int = 100
    record_wall_time: bool = False
    out_dir: str = "runs"

    def validate(self) -> "RunConfig":
        if self.variant is None:
            raise ConfigError("missing required field 'variant'")
        if self.variant not in VARIANTS:
            raise ConfigError(f"field 'variant': expected one of {VARIANTS}, got {self.variant!r}")
        if self.family not in FAMILIES:
            raise ConfigError(f"field 'family': expected one of {FAMILIES}, got {self.family!r}")
        for name in ("latent_dim", "steps", "batch_size", "eval_tasks", "eval_samples", "cavi_steps", "k"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"field '{name}' must be at least 1")
        if not self.seeds:
            raise ConfigError("field 'seeds' must list at least one seed")
        if self.n_samples is not None and self.n_samples < 1:
            raise ConfigError("field 'n_samples' must be at least 1")
        if any(g < 0 for g in self.corruption_grid):
            raise ConfigError("field 'corruption_grid' must be non-negative")
        if self.robust_prior is not None and set(self.robust_prior) != {"a0", "b0", "c0"}:
            raise ConfigError("field 'robust_prior' needs exactly a0, b0 and c0")
        return self

    def latent_samples(self) -> int:
        """Training latent samples: 10 for the mixture variant, 5 otherwise, unless set."""
        if self.n_samples is not None:
            return self.n_samples
        return 10 if self.variant == "mba" else 5

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, latent_dim=self.latent_dim, np_hidden=self.np_hidden,
            ba_hidden=self.ba_hidden, ba_layers=self.ba_layers, dec_hidden=self.dec_hidden,
            dec_layers=self.dec_layers, k=self.k, cavi_steps=self.cavi_steps,
            prior_mean_std=self.prior_mean_std, robust_prior=self.robust_prior,
            learn_robust_prior=self.learn_robust_prior,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def shipped_presets() -> dict:
    text = resources.files("efagg").joinpath("presets.json").read_text()
    return json.loads(text)["presets"]


def merged_fields(path=None, preset: Optional[str] = None) -> dict:
    """Field values from a preset and a config file, before defaults and validation.

    A config file is JSON with optional ``presets`` (merged over the shipped
    ones) and ``run`` (field values) sections; a file without either section
    is read as a flat ``run`` section. The file may name a ``preset`` itself.
    """
    presets = shipped_presets()
    run: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        if "presets" in doc or "run" in doc:
            presets.update(doc.get("presets", {}))
            run = dict(doc.get("run", {}))
        else:
            run = dict(doc)
        preset = preset or run.pop("preset", None)
    data: dict = {}
    if preset is not None:
        if preset not in presets:
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(sorted(presets))}")
        data.update(presets[preset])
    data.update(run)
    return data


def load_config(path=None, preset: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Resolve defaults <- preset <- config file <- non-None overrides, then validate."""
    data = merged_fields(path, preset)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(data).validate()
