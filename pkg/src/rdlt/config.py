"""Experiment configuration: a strict JSON key-value tree.

Unknown keys are hard errors at every level, so a misspelled
hyperparameter can never silently fall back to a default.  Parsing
materialises all defaults; serialising a parsed config therefore yields
a canonical form that parses back to the same experiment.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import ATTACK_KINDS, AttackSpec
from .engine import EngineConfig
from .layers import ACTIVATIONS


class ConfigError(ValueError):
    """The experiment config failed validation."""


def _require_keys(obj: dict, allowed: set, required: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}; allowed: {sorted(allowed)}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"missing required key(s) {sorted(missing)} in {where}")


@dataclass
class LayerConfig:
    kind: str
    activation: str = "identity"
    out_features: int | None = None
    rank: int | None = None
    out_channels: int | None = None
    window: tuple[int, int] | None = None
    rank_out: int | None = None
    rank_in: int | None = None


@dataclass
class ModelConfig:
    input_shape: tuple[int, ...]
    layers: list[LayerConfig]


@dataclass
class DatasetConfig:
    kind: str
    classes: int = 3
    per_class: int = 100
    noise: float = 0.1
    seed: int = 1
    val_per_class: int | None = None
    images: str | None = None
    labels: str | None = None
    val_images: str | None = None
    val_labels: str | None = None
    batch_size: int | None = 64
    normalize: bool = True


@dataclass
class AttackConfig:
    kind: str
    epsilons: list[float]
    alpha: float | None = None
    iterations: int | None = None
    jitter_scale: float = 10.0
    jitter_noise: float = 0.1
    mixup_beta: float = 1e-3
    mixup_use_kl: bool = True

    def specs(self, data_std=None) -> list[AttackSpec]:
        return [
            AttackSpec(
                kind=self.kind,
                epsilon=eps,
                alpha=self.alpha,
                iterations=self.iterations,
                jitter_scale=self.jitter_scale,
                jitter_noise=self.jitter_noise,
                mixup_beta=self.mixup_beta,
                mixup_use_kl=self.mixup_use_kl,
                data_std=np.asarray(data_std, dtype=float) if self.kind == "fgsm_l1" else None,
            )
            for eps in self.epsilons
        ]


@dataclass
class ExperimentConfig:
    model: ModelConfig
    engine: EngineConfig
    dataset: DatasetConfig
    epochs: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    attacks: list[AttackConfig] = field(default_factory=list)
    adversarial_training: AttackConfig | None = None
    output_dir: str | None = None


def _parse_layer(obj: dict, where: str) -> LayerConfig:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(f"{where} must be an object with a 'kind' key")
    kind = obj["kind"]
    if kind == "lowrank_linear":
        _require_keys(obj, {"kind", "out", "rank", "activation"}, {"kind", "out"}, where)
        return LayerConfig(
            kind=kind,
            out_features=int(obj["out"]),
            rank=int(obj.get("rank", 0)) or None,
            activation=_check_act(obj.get("activation", "identity"), where),
        )
    if kind == "lowrank_conv":
        _require_keys(
            obj,
            {"kind", "out_channels", "window", "rank_out", "rank_in", "activation"},
            {"kind", "out_channels", "window"},
            where,
        )
        window = obj["window"]
        if not (isinstance(window, list) and len(window) == 2):
            raise ConfigError(f"{where}: window must be a [width, height] pair")
        return LayerConfig(
            kind=kind,
            out_channels=int(obj["out_channels"]),
            window=(int(window[0]), int(window[1])),
            rank_out=int(obj.get("rank_out", 0)) or None,
            rank_in=int(obj.get("rank_in", 0)) or None,
            activation=_check_act(obj.get("activation", "identity"), where),
        )
    raise ConfigError(f"{where}: unknown layer kind {kind!r}")


def _check_act(name, where) -> str:
    if name not in ACTIVATIONS:
        raise ConfigError(f"{where}: unknown activation {name!r}; expected one of {ACTIVATIONS}")
    return name


def _parse_model(obj, where="model") -> ModelConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    _require_keys(obj, {"input_shape", "layers"}, {"input_shape", "layers"}, where)
    shape = tuple(int(v) for v in obj["input_shape"])
    if len(shape) not in (1, 3) or any(v < 1 for v in shape):
        raise ConfigError(f"{where}: input_shape must be [features] or [channels, width, height]")
    layers = [_parse_layer(layer, f"{where}.layers[{i}]") for i, layer in enumerate(obj["layers"])]
    if not layers:
        raise ConfigError(f"{where}: need at least one layer")
    return ModelConfig(input_shape=shape, layers=layers)


def _parse_engine(obj, where="engine") -> EngineConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    allowed = set(EngineConfig().__dict__)
    _require_keys(obj, allowed, set(), where)
    try:
        return EngineConfig(**obj).validate()
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def _parse_dataset(obj, where="dataset") -> DatasetConfig:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(f"{where} must be an object with a 'kind' key")
    kind = obj["kind"]
    if kind == "spirals":
        allowed = {"kind", "classes", "per_class", "noise", "seed", "val_per_class", "batch_size", "normalize"}
        _require_keys(obj, allowed, {"kind"}, where)
    elif kind == "idx":
        allowed = {"kind", "images", "labels", "val_images", "val_labels", "batch_size", "normalize"}
        _require_keys(obj, allowed, {"kind", "images", "labels"}, where)
    else:
        raise ConfigError(f"{where}: unknown dataset kind {kind!r}")
    return DatasetConfig(**obj)


def _parse_attack(obj, where) -> AttackConfig:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(f"{where} must be an object with a 'kind' key")
    if obj["kind"] not in ATTACK_KINDS:
        raise ConfigError(f"{where}: unknown attack kind {obj['kind']!r}")
    allowed = {
        "kind",
        "epsilon",
        "epsilons",
        "alpha",
        "iterations",
        "jitter_scale",
        "jitter_noise",
        "mixup_beta",
        "mixup_use_kl",
    }
    _require_keys(obj, allowed, {"kind"}, where)
    obj = dict(obj)
    if "epsilon" in obj and "epsilons" in obj:
        raise ConfigError(f"{where}: give either epsilon or epsilons, not both")
    if "epsilon" in obj:
        obj["epsilons"] = [float(obj.pop("epsilon"))]
    elif "epsilons" in obj:
        obj["epsilons"] = [float(v) for v in obj["epsilons"]]
    else:
        raise ConfigError(f"{where}: an epsilon (or epsilons list) is required")
    try:
        return AttackConfig(**obj)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from err


def parse_config(text: str) -> ExperimentConfig:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    if not isinstance(obj, dict):
        raise ConfigError("config root must be an object")
    allowed = {"model", "engine", "dataset", "epochs", "seeds", "attacks", "adversarial_training", "output_dir"}
    _require_keys(obj, allowed, {"model", "dataset"}, "config root")

    epochs = int(obj.get("epochs", 1))
    if epochs < 0:
        raise ConfigError("epochs must be non-negative")
    seeds = [int(s) for s in obj.get("seeds", [0])]
    if not seeds:
        raise ConfigError("seeds must be a non-empty list")
    adv = obj.get("adversarial_training")
    return ExperimentConfig(
        model=_parse_model(obj["model"]),
        engine=_parse_engine(obj.get("engine", {})),
        dataset=_parse_dataset(obj["dataset"]),
        epochs=epochs,
        seeds=seeds,
        attacks=[_parse_attack(a, f"attacks[{i}]") for i, a in enumerate(obj.get("attacks", []))],
        adversarial_training=None if adv is None else _parse_attack(adv, "adversarial_training"),
        output_dir=obj.get("output_dir"),
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical JSON form; parsing it back reproduces the experiment."""

    def _layer(layer: LayerConfig) -> dict:
        if layer.kind == "lowrank_linear":
            out = {"kind": layer.kind, "out": layer.out_features, "activation": layer.activation}
            if layer.rank is not None:
                out["rank"] = layer.rank
            return out
        out = {
            "kind": layer.kind,
            "out_channels": layer.out_channels,
            "window": list(layer.window),
            "activation": layer.activation,
        }
        if layer.rank_out is not None:
            out["rank_out"] = layer.rank_out
        if layer.rank_in is not None:
            out["rank_in"] = layer.rank_in
        return out

    def _attack(attack: AttackConfig) -> dict:
        out = asdict(attack)
        if out["alpha"] is None:
            del out["alpha"]
        if out["iterations"] is None:
            del out["iterations"]
        return out

    # batch_size is the one dataset key whose None (full batch) differs
    # from its parse default, so it is always written out.
    dataset = {
        k: v for k, v in asdict(cfg.dataset).items() if v is not None or k == "batch_size"
    }
    root = {
        "model": {
            "input_shape": list(cfg.model.input_shape),
            "layers": [_layer(layer) for layer in cfg.model.layers],
        },
        "engine": asdict(cfg.engine),
        "dataset": dataset,
        "epochs": cfg.epochs,
        "seeds": cfg.seeds,
        "attacks": [_attack(a) for a in cfg.attacks],
    }
    if cfg.engine.r_max is None:
        del root["engine"]["r_max"]
    if cfg.adversarial_training is not None:
        root["adversarial_training"] = _attack(cfg.adversarial_training)
    if cfg.output_dir is not None:
        root["output_dir"] = cfg.output_dir
    return json.dumps(root, indent=2, sort_keys=True) + "\n"


def build_network(model: ModelConfig, seed: int):
    """Instantiate the network described by a model config with the
    documented scaled-SVD initialization, deterministically per seed."""
    from . import engine
    from .layers import Network

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x1417])))
    shape = model.input_shape
    layers = []
    for i, spec in enumerate(model.layers):
        if spec.kind == "lowrank_conv":
            if len(shape) != 3:
                raise ConfigError(f"model.layers[{i}]: conv layer needs a [C, W, H] input")
            c, w, h = shape
            layer = engine.init_lowrank_conv(
                n_out=spec.out_channels,
                n_in=c,
                window=spec.window,
                rank_out=spec.rank_out or spec.out_channels,
                rank_in=spec.rank_in or c,
                activation=spec.activation,
                rng=rng,
            )
            shape = (spec.out_channels, w, h)
        else:
            n_in = shape[0] if len(shape) == 1 else int(np.prod(shape))
            rank = spec.rank or min(spec.out_features, n_in)
            layer = engine.init_factorized_linear(
                n_out=spec.out_features,
                n_in=n_in,
                rank=rank,
                activation=spec.activation,
                rng=rng,
            )
            shape = (spec.out_features,)
        layers.append(layer)
    return Network(layers)
