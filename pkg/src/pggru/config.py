"""Experiment configuration: presets, JSON overrides and derived seeds."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .plant import LoopConfig, ParasiticConfig, TwoMsdParams, make_feedback
from .train import TrainConfig

SCHEMA_VERSION = 1
MODES = ("gru", "preview-gru", "pg-gru")


class ConfigError(ValueError):
    pass


def derived_seed(master: int, tag: str) -> int:
    """Stable 32-bit seed for one pipeline stage."""
    h = hashlib.sha256(f"{int(master)}:{tag}".encode()).digest()
    return int.from_bytes(h[:4], "little")


@dataclass(frozen=True)
class FilterConfig:
    order: int = 3
    window: int = 141
    passes: int = 2


@dataclass(frozen=True)
class InversionConfig:
    method: str = "zpetc"
    order: int | None = None


@dataclass(frozen=True)
class IdentificationConfig:
    enabled: bool = True
    # nominal model handed to the fit, as multiples of the rig parameters
    initial_factors: dict = field(default_factory=lambda: {"J2": 1.3, "k1": 0.8, "b1": 1.5, "kv2": 0.7})
    free: tuple = ("J2", "k1", "b1", "kv2")
    restarts: int = 2
    maxiter: int = 1500
    xatol: float = 1e-6
    # fit on this many leading training samples (0 = all); the run starts at rest
    max_samples: int = 0


@dataclass(frozen=True)
class LoopSettings:
    Ts: float = 5e-4
    encoder_step: float = 1e-3 * 3.141592653589793
    ff_noise_var: float = 5e-7
    enable_quantization: bool = True

    def build(self) -> LoopConfig:
        return LoopConfig(self.Ts, self.encoder_step, self.ff_noise_var,
                          self.enable_quantization, make_feedback(self.Ts))


@dataclass(frozen=True)
class SearchConfig:
    budget: int = 3
    epochs: int = 1
    # trials train on this many leading samples of the training set (0 = all)
    max_samples: int = 0


def _pg_default(epochs):
    return TrainConfig(n_layers=7, n_gru=32, beta=48, eta=48, epochs=epochs,
                       learning_rate=1.6e-3, tbptt_length=299, batch_size=6,
                       clip_norm=0.8, lam=1e-5, init_scheme="kaiming", dtype="float32",
                       lr_schedule="cosine")


def _gru_default(epochs, eta):
    return TrainConfig(n_layers=5, n_gru=128, beta=92, eta=eta, epochs=epochs,
                       learning_rate=4e-4, tbptt_length=299, batch_size=6,
                       clip_norm=0.8, lam=1e-5, init_scheme="kaiming", dtype="float32",
                       lr_schedule="cosine")


@dataclass(frozen=True)
class ExperimentConfig:
    plant: TwoMsdParams = field(default_factory=TwoMsdParams)
    parasitic: ParasiticConfig = field(default_factory=ParasiticConfig)
    loop: LoopSettings = field(default_factory=LoopSettings)
    filter: FilterConfig = field(default_factory=FilterConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    identification: IdentificationConfig = field(default_factory=IdentificationConfig)
    train_gru: TrainConfig = field(default_factory=lambda: _gru_default(300, 0))
    train_preview_gru: TrainConfig = field(default_factory=lambda: _gru_default(300, 92))
    train_pg_gru: TrainConfig = field(default_factory=lambda: _pg_default(300))
    search: SearchConfig = field(default_factory=lambda: SearchConfig(budget=50, epochs=300))
    out: str = "runs/default"
    master_seed: int = 0
    preset: str = "full"

    def train_config(self, mode) -> TrainConfig:
        """Training config for one mode with its seed derived from the master seed."""
        cfg = {"gru": self.train_gru, "preview-gru": self.train_preview_gru,
               "pg-gru": self.train_pg_gru}.get(mode)
        if cfg is None:
            raise ConfigError(f"unknown training mode {mode!r}")
        return replace(cfg, seed=derived_seed(self.master_seed, f"train:{mode}"))

    def to_dict(self):
        return _to_jsonable(asdict(self))


def _to_jsonable(v):
    if isinstance(v, dict):
        return {k: _to_jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_to_jsonable(x) for x in v]
    return v


PRESETS = {
    "full": {},
    # desk budget: whole pipeline in well under 30 minutes on one core
    "desk": {
        "train_pg_gru": {"epochs": 50},
        "train_preview_gru": {"epochs": 14},
        "train_gru": {"epochs": 14},
        "search": {"budget": 3, "epochs": 1, "max_samples": 20000},
        "identification": {"max_samples": 20000},
    },
}

_NESTED = {
    "plant": TwoMsdParams, "parasitic": ParasiticConfig, "loop": LoopSettings,
    "filter": FilterConfig, "inversion": InversionConfig,
    "identification": IdentificationConfig, "train_gru": TrainConfig,
    "train_preview_gru": TrainConfig, "train_pg_gru": TrainConfig, "search": SearchConfig,
}


def _apply(obj, overrides, where):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(obj)}
    unknown = set(overrides) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for k, v in overrides.items():
        cur = getattr(obj, k)
        if k in _NESTED and where == "config":
            kw[k] = _apply(cur, v, k)
        elif isinstance(cur, tuple):
            kw[k] = tuple(v)
        elif isinstance(cur, bool) or isinstance(v, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{where}.{k}: expected true/false")
            kw[k] = v
        elif isinstance(cur, int) and not isinstance(v, int):
            raise ConfigError(f"{where}.{k}: expected an integer")
        elif isinstance(cur, float) and isinstance(v, (int, float)):
            kw[k] = float(v)
        else:
            kw[k] = copy.deepcopy(v)
    try:
        return replace(obj, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def build_config(preset="desk", overrides=None, seed=None, out=None) -> ExperimentConfig:
    """Preset, then file/dict overrides, then command-line flags."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = _apply(ExperimentConfig(preset=preset), PRESETS[preset], "config")
    if overrides:
        cfg = _apply(cfg, overrides, "config")
    if seed is not None:
        if int(seed) < 0 or int(seed) >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, master_seed=int(seed))
    if out is not None:
        cfg = replace(cfg, out=str(out))
    if cfg.inversion.method not in ("zpetc", "noncausal"):
        raise ConfigError(f"unknown inversion method {cfg.inversion.method!r}")
    if cfg.inversion.method == "noncausal" and not cfg.inversion.order:
        raise ConfigError("non-causal inversion needs an expansion order")
    if cfg.search.budget < 1:
        raise ConfigError("search budget must be >= 1")
    return cfg


def load_overrides(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a JSON object")
    d.pop("schema_version", None)
    return d
