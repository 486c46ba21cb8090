"""Experiment configuration: one JSON document, schema-checked before any work starts."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .model import ModelDims
from .perturbations import DEFAULT_SWEEP, PerturbationSpec
from .synthdata import SynthSpec
from .training import TrainConfig

OUTPUT_ENV = "DRIVE_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration; ``path`` points at the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def load_schema(name: str) -> dict:
    return json.loads(resources.files("drive_cbm").joinpath("schemas", f"{name}.schema.json").read_text("utf-8"))


def validate(instance, schema_name: str) -> None:
    """Raise ``ConfigError`` with a JSON path if ``instance`` violates the named schema."""
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    err = jsonschema.exceptions.best_match(validator.iter_errors(instance))
    if err is not None:
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise ConfigError(err.message, path)


@dataclass(frozen=True)
class ExperimentConfig:
    data: SynthSpec
    train: TrainConfig
    hidden: int = 32
    encoder_layers: int = 2
    sweep: tuple[PerturbationSpec, ...] = DEFAULT_SWEEP
    k: int | None = None  # None -> ceil(m / 5)
    output_dir: str = "runs/default"

    @property
    def dims(self) -> ModelDims:
        d = self.data
        return ModelDims(d=d.d, l=d.l, m=d.m, hidden=self.hidden, t=d.t, encoder_layers=self.encoder_layers)

    @property
    def topk(self) -> int:
        from .metrics import default_k
        return self.k or default_k(self.data.m)

    def out_dir(self, env=None) -> Path:
        import os
        env = os.environ if env is None else env
        return Path(env.get(OUTPUT_ENV) or self.output_dir)

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "model": {"hidden": self.hidden, "encoder_layers": self.encoder_layers},
            "train": self.train.to_dict(),
            "sweep": [s.to_dict() for s in self.sweep],
            "metrics": {"k": self.k},
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        validate(raw, "experiment_config")
        try:
            data = SynthSpec.from_dict(raw["data"])
            train = TrainConfig.from_dict(raw["train"])
            model = raw.get("model", {})
            sweep = tuple(PerturbationSpec.from_dict(s) for s in raw.get("sweep", [s.to_dict() for s in DEFAULT_SWEEP]))
            cfg = cls(data, train, model.get("hidden", 32), model.get("encoder_layers", 2), sweep,
                      raw.get("metrics", {}).get("k"), raw.get("output_dir", "runs/default"))
            cfg.dims  # noqa: B018 - validates the derived dimensions
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "$") from None
        if cfg.k is not None and cfg.k > data.m:
            raise ConfigError(f"k={cfg.k} exceeds the number of concepts m={data.m}", "$.metrics.k")
        for name in ("k1", "k2"):
            v = getattr(train, name)
            if v is not None and v > data.m:
                raise ConfigError(f"{name}={v} exceeds m={data.m}", f"$.train.{name}")
        return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(raw)


@dataclass
class SweepFile:
    specs: list[PerturbationSpec] = field(default_factory=list)

    @classmethod
    def load(cls, path) -> "SweepFile":
        """A JSON list of perturbation specs, or ``{"sweep": [...]}``."""
        try:
            raw = json.loads(Path(path).read_text("utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"sweep file {str(path)!r} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in sweep file: {exc.msg}") from None
        items = raw.get("sweep") if isinstance(raw, dict) else raw
        if not isinstance(items, list):
            raise ConfigError("sweep file must hold a list of perturbation specs", "$")
        specs = []
        for i, item in enumerate(items):
            try:
                specs.append(PerturbationSpec.from_dict(item))
            except (TypeError, ValueError, AttributeError) as exc:
                raise ConfigError(str(exc), f"$[{i}]") from None
        return cls(specs)
