"""Run configuration: YAML text validated against a fixed schema.

Every section and key is checked; unknown keys and bad values raise
:class:`ConfigError` naming the dotted field path (``optimizer.learning_rate``).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import yaml

from .losses import LossWeights
from .network import ConfigError, ModelConfig
from .tensor import PRECISIONS

ABLATION_AXES = ("planes", "branches", "sim_mode", "ssm_mode", "loss_weights")

# section -> key -> (type(s), default); ``model`` is validated by ModelConfig itself
SCHEMA = {
    "optimizer": {"learning_rate": (float, 1e-4), "beta1": (float, 0.9), "beta2": (float, 0.999)},
    "training": {
        "batch_size": (int, 8),
        "epochs": (int, 100),
        "max_steps": ((int, type(None)), None),
        "eval_every": (int, 1),
        "precision": (str, "single"),
        "threshold": (float, 0.5),
    },
    "loss": {"lambda1": (float, 0.5), "lambda2": (float, 0.5)},
    "data": {
        "source": (str, "synthetic"),
        "seed": (int, 0),
        "n_train": (int, 8),
        "n_val": (int, 4),
        "n_test": (int, 4),
        "size": (int, 64),
        "root": ((str, type(None)), None),
        "manifest": ((str, type(None)), None),
    },
    "ablation": {
        "axes": (list, list(ABLATION_AXES)),
        "epochs": (int, 1),
        "n_samples": (int, 4),
        "loss_weights": (list, [[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]]),
    },
}
TOP_LEVEL = {"model", "output_dir", "seed", *SCHEMA}


def _check_type(path: str, value, types):
    types = types if isinstance(types, tuple) else (types,)
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(path, f"expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(value, types):
        raise ConfigError(path, f"expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
    return value


def _section(name: str, raw) -> dict:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping")
    spec = SCHEMA[name]
    for key in raw:
        if key not in spec:
            raise ConfigError(f"{name}.{key}", "unknown key")
    return {k: _check_type(f"{name}.{k}", raw[k], t) if k in raw else copy.deepcopy(d) for k, (t, d) in spec.items()}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: dict = field(default_factory=lambda: _section("optimizer", {}))
    training: dict = field(default_factory=lambda: _section("training", {}))
    loss: LossWeights = field(default_factory=LossWeights)
    data: dict = field(default_factory=lambda: _section("data", {}))
    ablation: dict = field(default_factory=lambda: _section("ablation", {}))
    output_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> None:
        if self.optimizer["learning_rate"] <= 0:
            raise ConfigError("optimizer.learning_rate", f"must be > 0, got {self.optimizer['learning_rate']}")
        for b in ("beta1", "beta2"):
            if not 0 <= self.optimizer[b] < 1:
                raise ConfigError(f"optimizer.{b}", f"must lie in [0, 1), got {self.optimizer[b]}")
        t = self.training
        for key in ("batch_size", "epochs", "eval_every"):
            if t[key] < 1:
                raise ConfigError(f"training.{key}", f"must be >= 1, got {t[key]}")
        if t["max_steps"] is not None and t["max_steps"] < 1:
            raise ConfigError("training.max_steps", f"must be >= 1 or null, got {t['max_steps']}")
        if t["precision"] not in PRECISIONS:
            raise ConfigError("training.precision", f"expected one of {list(PRECISIONS)}, got {t['precision']!r}")
        if not 0 < t["threshold"] < 1:
            raise ConfigError("training.threshold", f"must lie in (0, 1), got {t['threshold']}")
        d = self.data
        if d["source"] not in ("synthetic", "directory"):
            raise ConfigError("data.source", f"expected 'synthetic' or 'directory', got {d['source']!r}")
        if d["source"] == "directory" and not d["root"]:
            raise ConfigError("data.root", "required when data.source is 'directory'")
        if d["source"] == "synthetic":
            for key in ("n_train", "n_val", "n_test"):
                if d[key] < 1:
                    raise ConfigError(f"data.{key}", f"must be >= 1, got {d[key]}")
            if d["size"] != self.model.image_size:
                raise ConfigError("data.size", f"must equal model.image_size ({self.model.image_size}), got {d['size']}")
        a = self.ablation
        if not a["axes"]:
            raise ConfigError("ablation.axes", f"need at least one of {list(ABLATION_AXES)}")
        if not a["loss_weights"]:
            raise ConfigError("ablation.loss_weights", "need at least one [lambda1, lambda2] pair")
        bad =[x for x in a["axes"] if x not in ABLATION_AXES]
        if bad:
            raise ConfigError("ablation.axes", f"unknown axis {bad[0]!r}; expected among {list(ABLATION_AXES)}")
        if a["epochs"] < 1 or a["n_samples"] < 1:
            raise ConfigError("ablation.epochs" if a["epochs"] < 1 else "ablation.n_samples", "must be >= 1")
        for i, pair in enumerate(a["loss_weights"]):
            if not (isinstance(pair, list) and len(pair) == 2):
                raise ConfigError(f"ablation.loss_weights[{i}]", f"expected [lambda1, lambda2], got {pair!r}")
            try:
                LossWeights(float(pair[0]), float(pair[1]))
            except ValueError as exc:
                raise ConfigError(f"ablation.loss_weights[{i}]", str(exc)) from None

    @property
    def dtype(self):
        return PRECISIONS[self.training["precision"]]

    def with_seed(self, seed: int) -> "RunConfig":
        out = copy.deepcopy(self)
        out.seed = seed
        out.model.seed = seed
        return out

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "optimizer": dict(self.optimizer),
            "training": dict(self.training),
            "loss": {"lambda1": self.loss.lambda1, "lambda2": self.loss.lambda2},
            "data": dict(self.data),
            "ablation": copy.deepcopy(self.ablation),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


def from_dict(raw) -> RunConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(key, "unknown key")
    seed = _check_type("seed", raw.get("seed", 0), int)
    model_raw = raw.get("model") or {}
    if not isinstance(model_raw, dict):
        raise ConfigError("model", "expected a mapping")
    model_raw = {"seed": seed, **model_raw}
    try:
        model = ModelConfig.from_dict(model_raw)
    except ConfigError as exc:
        if exc.field.startswith("model."):
            raise
        raise ConfigError(f"model.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except TypeError as exc:
        raise ConfigError("model", str(exc)) from None
    loss = _section("loss", raw.get("loss"))
    try:
        weights = LossWeights(loss["lambda1"], loss["lambda2"])
    except ValueError as exc:
        raise ConfigError("loss", str(exc)) from None
    cfg = RunConfig(
        model=model,
        optimizer=_section("optimizer", raw.get("optimizer")),
        training=_section("training", raw.get("training")),
        loss=weights,
        data=_section("data", raw.get("data")),
        ablation=_section("ablation", raw.get("ablation")),
        output_dir=_check_type("output_dir", raw.get("output_dir", "runs/default"), str),
        seed=seed,
    )
    cfg.validate()
    return cfg


def loads(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"not valid YAML ({exc})") from None
    return from_dict(raw)


def load(path: str) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path} ({exc})") from None
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def schema_dict() -> dict:
    """Plain description of every accepted key, for documentation and the committed schema file."""
    out = {"seed": "int", "output_dir": "str"}
    out["model"] = {k: type(v).__name__ for k, v in ModelConfig().to_dict().items()}
    for section, spec in SCHEMA.items():
        out[section] = {k: "/".join(x.__name__ for x in (t if isinstance(t, tuple) else (t,))).replace("NoneType", "null")
                        for k, (t, _) in spec.items()}
    return out

