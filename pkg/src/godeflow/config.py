"""Run configuration files: strict JSON with one section per stage.

Sections: ``graph`` (synthetic graph profile), ``sim`` (data-generating
process), ``model`` (architecture and solver substeps), ``train``
(optimisation schedule) and ``eval`` (counterfactual evaluation).  Unknown
sections or keys are rejected rather than ignored, since a silently dropped
weight name would invalidate an experiment.

The ``GODEFLOW_SEED`` environment variable, when set, overrides every
section seed (graph, sim, train, eval get base, base+1, base+2, base+3).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError, ParameterError
from .model import ModelConfig
from .simulator import SimParams
from .training import VARIANT_WEIGHTS, TrainConfig

SEED_ENV_VAR = "GODEFLOW_SEED"


@dataclass
class GraphConfig:
    num_nodes: int = 500
    mean_degree: float = 2.0
    degree_std: float = 1.7
    seed: int = 1


@dataclass
class EvalConfig:
    flip_ratio: float = 0.5
    horizon: int = 5
    start_time: int | None = None
    seed: int = 4


@dataclass
class RunConfig:
    graph: GraphConfig = field(default_factory=GraphConfig)
    sim: SimParams = field(default_factory=lambda: SimParams(seed=2))
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        sim = self.sim.to_dict()
        sim.pop("w_treat")
        sim.pop("w_growth")
        return {
            "graph": {
                "num_nodes": self.graph.num_nodes,
                "mean_degree": self.graph.mean_degree,
                "degree_std": self.graph.degree_std,
                "seed": self.graph.seed,
            },
            "sim": sim,
            "model": {
                "latent_dim": self.model.latent_dim,
                "encoder_hidden": self.model.encoder_hidden,
                "head_hidden": self.model.head_hidden,
                "substeps": self.model.substeps,
            },
            "train": {
                "learning_rate": self.train.learning_rate,
                "alpha_treatment": self.train.alpha_treatment,
                "alpha_interference": self.train.alpha_interference,
                "alt_ratio": self.train.alt_ratio,
                "epochs": self.train.epochs,
                "seed": self.train.seed,
                "variant": self.train.variant,
            },
            "eval": {
                "flip_ratio": self.eval.flip_ratio,
                "horizon": self.eval.horizon,
                "start_time": self.eval.start_time,
                "seed": self.eval.seed,
            },
        }


_GRAPH_KEYS = {"num_nodes": int, "mean_degree": float, "degree_std": float, "seed": int}
_SIM_KEYS = {
    "gamma_a": float,
    "gamma_n": float,
    "gamma_f": float,
    "gamma_g": float,
    "delta_a": float,
    "delta_n": float,
    "rho_u": float,
    "rho_n": float,
    "rho_f": float,
    "rho_g": float,
    "beta_a": float,
    "beta_n": float,
    "carrying_capacity": float,
    "full_dose": float,
    "x_min": float,
    "x_max": float,
    "noise_std": float,
    "static_dim": int,
    "dt": float,
    "horizon": int,
    "seed": int,
}
_MODEL_KEYS = {"latent_dim": int, "encoder_hidden": int, "head_hidden": int, "substeps": int}
_TRAIN_KEYS = {
    "learning_rate": float,
    "alpha_treatment": float,
    "alpha_interference": float,
    "alt_ratio": int,
    "epochs": int,
    "seed": int,
    "variant": str,
}
_EVAL_KEYS = {"flip_ratio": float, "horizon": int, "start_time": int, "seed": int}

_SECTIONS = {
    "graph": _GRAPH_KEYS,
    "sim": _SIM_KEYS,
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "eval": _EVAL_KEYS,
}


def _coerce(section: str, key: str, value, kind):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
        return int(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{section}.{key}: unsupported type")  # pragma: no cover


def parse_run_config(data: dict, env: dict | None = None) -> RunConfig:
    """Validate a decoded configuration mapping into a :class:`RunConfig`."""
    if env is None:
        env = os.environ
    if not isinstance(data, dict):
        raise ConfigError(f"configuration root must be an object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown configuration section(s): {', '.join(unknown)}")

    sections: dict[str, dict] = {}
    for name, known in _SECTIONS.items():
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"section {name!r} must be an object, got {raw!r}")
        bad = sorted(set(raw) - set(known))
        if bad:
            raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(bad)}")
        parsed = {}
        for key, value in raw.items():
            if name == "eval" and key == "start_time" and value is None:
                parsed[key] = None
                continue
            parsed[key] = _coerce(name, key, value, known[key])
        sections[name] = parsed

    seed_override = env.get(SEED_ENV_VAR)
    if seed_override is not None:
        try:
            base = int(seed_override)
        except ValueError:
            raise ConfigError(
                f"{SEED_ENV_VAR} must be an integer, got {seed_override!r}"
            ) from None
        sections["graph"]["seed"] = base
        sections["sim"]["seed"] = base + 1
        sections["train"]["seed"] = base + 2
        sections["eval"]["seed"] = base + 3

    train_raw = sections["train"]
    variant = train_raw.pop("variant", "full")
    if variant not in VARIANT_WEIGHTS and variant != "custom":
        raise ConfigError(
            f"train.variant must be one of {sorted(VARIANT_WEIGHTS) + ['custom']}, "
            f"got {variant!r}"
        )
    alpha_t, alpha_g = VARIANT_WEIGHTS.get(variant, (0.5, 0.5))
    train_raw.setdefault("alpha_treatment", alpha_t)
    train_raw.setdefault("alpha_interference", alpha_g)

    try:
        graph = GraphConfig(**sections["graph"])
        sim = SimParams(**{"seed": 2, **sections["sim"]})
        model = ModelConfig(**sections["model"])
        train = TrainConfig(variant=variant, substeps=model.substeps, **train_raw)
        eval_cfg = EvalConfig(**{"seed": 4, **sections["eval"]})
    except ParameterError as exc:
        raise ConfigError(str(exc)) from exc
    if eval_cfg.horizon < 1:
        raise ConfigError(f"eval.horizon must be >= 1, got {eval_cfg.horizon}")
    if not 0.0 <= eval_cfg.flip_ratio <= 1.0:
        raise ConfigError(f"eval.flip_ratio must lie in [0, 1], got {eval_cfg.flip_ratio}")
    return RunConfig(graph=graph, sim=sim, model=model, train=train, eval=eval_cfg)


def load_run_config(path, env: dict | None = None) -> RunConfig:
    """Read and validate a JSON configuration file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read configuration file {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"configuration file {path} is not valid JSON: {exc}") from exc
    return parse_run_config(data, env=env)


def config_hash(config: RunConfig) -> str:
    """Short content hash of the resolved configuration."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("ascii")).hexdigest()[:12]


def default_config_dict() -> dict:
    return RunConfig().to_dict()
