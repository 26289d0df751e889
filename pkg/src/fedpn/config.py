"""Declarative run configuration.

Layers, lowest precedence first: built-in defaults, the experiment preset
(``experiment`` commands only), the YAML config file, ``FEDPN_*``
environment variables, ``--set key.path=value`` flags, and finally the
dedicated ``--seed`` / ``--out`` flags.

Environment variables map onto key paths with ``__`` as the separator, so
``FEDPN_FEDERATION__ROUNDS=5`` sets ``federation.rounds``.  Values from the
environment and from ``--set`` are parsed as YAML scalars.
"""

import copy
import hashlib
import json
import os
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dirichlet import LossWeights
from .errors import ContractError
from .federated import FederationConfig
from .models import Architecture

__all__ = [
    "RunConfig",
    "PRESETS",
    "ENV_PREFIX",
    "ConfigError",
    "load_config",
    "config_hash",
    "architecture",
    "federation",
    "loss_weights",
]

ENV_PREFIX = "FEDPN_"


class ConfigError(ContractError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Section):
    num_classes: int = Field(10, ge=2)
    input_dim: int = Field(16, ge=2)
    train_per_class: int = Field(200, ge=1)
    test_per_class: int = Field(100, ge=1)
    separation: float = Field(10.0, ge=0)
    std: float = Field(1.0, gt=0)
    classes_per_client: tuple[int, int] = (2, 3)
    train_fraction: float = Field(0.7, gt=0, lt=1)
    calibration_share: float = Field(0.4, gt=0, lt=1)


class ModelSection(_Section):
    embed_dim: int = Field(2, ge=1)
    hidden: tuple[int, ...] = (64, 64)
    activation: Literal["tanh", "relu"] = "tanh"
    flow_depth: int = Field(8, ge=0)
    log_budget: float = 0.0


class FederationSection(_Section):
    num_clients: int = Field(20, ge=1)
    rounds: int = Field(100, ge=0)
    local_steps: int = Field(10, ge=0)
    participation: float = Field(1.0, gt=0, le=1)
    batch_size: int = Field(64, ge=1)
    optimizer: Literal["sgd-momentum", "adam"] = "sgd-momentum"
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    personalize_epochs: int = Field(10, ge=0)
    personalize_lr: float = Field(1e-3, gt=0)
    weighted_mean: bool = False
    workers: int = Field(1, ge=1)
    checkpoint_every: int = Field(0, ge=0)


class LossSection(_Section):
    entropy: float = Field(0.0, ge=0)
    log_prob: float = Field(0.001, ge=0)


class PolicySection(_Section):
    kind: Literal["log-density", "entropy"] = "log-density"
    p_outlier: float = Field(0.10, gt=0, le=1)
    global_abstention: bool = False
    aleatoric_p: Optional[float] = Field(None, gt=0, le=1)


class ToySection(_Section):
    ks: tuple[int, ...] = (2, 4, 6, 8, 10)
    seeds: int = Field(5, ge=1)
    n_per_cluster: int = Field(300, ge=1)
    steps: int = Field(1500, ge=1)
    lr: float = Field(0.01, gt=0)
    batch_size: int = Field(64, ge=1)
    flow_depth: int = Field(8, ge=0)
    bayesian_entropy: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _ks_range(self):
        if not self.ks or any(k < 2 or k > 10 for k in self.ks):
            raise ValueError("ks must be a non-empty subset of 2..10")
        return self


class SwitchingSection(_Section):
    seeds: int = Field(3, ge=1)


class LabelNoiseSection(_Section):
    # None: the upper half of the classes, {5..9} for K = 10
    noisy_classes: Optional[tuple[int, ...]] = None


class PrecisionSection(_Section):
    fractions: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    ood_shift: float = Field(5.0, gt=0)

    @model_validator(mode="after")
    def _fractions_range(self):
        if any(not 0.0 <= q < 1.0 for q in self.fractions):
            raise ValueError("filter fractions must lie in [0, 1)")
        return self


class ExperimentsSection(_Section):
    toy_loss: ToySection = ToySection()
    switching: SwitchingSection = SwitchingSection()
    label_noise: LabelNoiseSection = LabelNoiseSection()
    precision_filter: PrecisionSection = PrecisionSection()


class RunConfig(_Section):
    experiment: Optional[Literal["toy-loss", "switching", "label-noise", "precision-filter"]] = None
    seed: int = Field(0, ge=0)
    out: str = "runs"
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    federation: FederationSection = FederationSection()
    loss: LossSection = LossSection()
    policy: PolicySection = PolicySection()
    experiments: ExperimentsSection = ExperimentsSection()

    @model_validator(mode="after")
    def _cross_checks(self):
        lo, hi = sorted(self.data.classes_per_client)
        if lo < 1 or hi > self.data.num_classes:
            raise ValueError("data.classes_per_client must lie within 1..num_classes")
        if self.federation.num_clients * hi < self.data.num_classes:
            raise ValueError("federation.num_clients too small to cover every class")
        noisy = self.experiments.label_noise.noisy_classes or ()
        if any(c >= self.data.num_classes or c < 0 for c in noisy):
            raise ValueError("experiments.label_noise.noisy_classes must be valid class ids")
        return self


# Desk-scale settings under which the experiments train to convergence in
# minutes on one CPU; each differs from the built-in default hyperparameters.
_DESK_FEDERATED = {
    "model": {"embed_dim": 4, "activation": "relu", "log_budget": 10.0},
    "federation": {"num_clients": 8, "rounds": 50, "lr": 0.03,
                   "personalize_epochs": 100, "personalize_lr": 0.01},
    "loss": {"log_prob": 0.1},
}

PRESETS = {
    "toy-loss": {},
    "switching": _DESK_FEDERATED,
    "label-noise": _DESK_FEDERATED,
    "precision-filter": _DESK_FEDERATED,
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set_path(doc, path, value):
    keys = [k for k in path.split(".") if k]
    if not keys:
        raise ConfigError(f"empty key path in override {path!r}")
    node = doc
    for key in keys[:-1]:
        nxt = node.setdefault(key, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{path}: {key!r} is not a section")
        node = nxt
    node[keys[-1]] = value


def _env_overrides(environ):
    doc = {}
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            path = name[len(ENV_PREFIX):].lower().replace("__", ".")
            _set_path(doc, path, yaml.safe_load(environ[name]))
    return doc


def _format_errors(err):
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid configuration:\n  " + "\n  ".join(lines)


def load_config(path=None, experiment=None, sets=(), seed=None, out=None, environ=None,
                use_preset=True, base=None):
    """Assemble and validate a :class:`RunConfig` from every layer.

    ``base`` (a plain dict, e.g. a stored run config) replaces the built-in
    defaults as the lowest layer.
    """
    doc = copy.deepcopy(base) if base else {}
    if experiment and use_preset:
        doc = _merge(doc, PRESETS[experiment])
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        doc = _merge(doc, loaded)
    doc = _merge(doc, _env_overrides(os.environ if environ is None else environ))
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, raw = item.split("=", 1)
        _set_path(doc, key.strip(), yaml.safe_load(raw))
    if experiment is not None:
        doc["experiment"] = experiment
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = out
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def config_hash(cfg):
    """Stable digest of everything that affects results (not the output dir)."""
    payload = cfg.model_dump(mode="json", exclude={"out"})
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def architecture(cfg, identity=False):
    m = cfg.model
    return Architecture(cfg.data.input_dim, cfg.data.num_classes, m.embed_dim, m.hidden,
                        m.activation, m.flow_depth, identity, m.log_budget)


def loss_weights(cfg):
    return LossWeights(cfg.loss.entropy, cfg.loss.log_prob)


def federation(cfg, seed=None):
    f = cfg.federation
    return FederationConfig(
        num_clients=f.num_clients, rounds=f.rounds, local_steps=f.local_steps,
        participation=f.participation, batch_size=f.batch_size, lr=f.lr, momentum=f.momentum,
        optimizer=f.optimizer, loss_weights=loss_weights(cfg),
        personalize_epochs=f.personalize_epochs, personalize_lr=f.personalize_lr,
        weighted_mean=f.weighted_mean, workers=f.workers,
        seed=cfg.seed if seed is None else seed,
    )
