"""Experiment configuration: schema, presets and YAML I/O with line diagnostics."""
import copy
import importlib
from typing import Annotated, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class InterBankSection(_Strict):
    a: float = 0.1
    q: float = 0.1
    c: float = 0.5
    eps: float = 0.5
    rho: float = 0.2
    sigma: float = 1.0
    N: int = Field(10, ge=1)


class PartitionSection(_Strict):
    n_steps: int = Field(40, ge=1)
    T: float = Field(1.0, gt=0)


class NetworkSection(_Strict):
    hidden: List[Annotated[int, Field(ge=1)]] = Field([40, 40, 40], min_length=1)
    activation: Literal["tanh", "relu"] = "tanh"
    batchnorm: bool = True
    representation: Literal["time", "per_step"] = "time"
    head: Literal["gradient", "direct"] = "gradient"
    momentum: float = Field(0.99, ge=0, lt=1)


class TrainSection(_Strict):
    steps: int = Field(3000, ge=0)
    batch: int = Field(256, ge=2)
    lr: float = Field(5e-4, gt=0)
    eval_every: int = Field(500, ge=1)


class DfpSection(_Strict):
    stages: int = Field(10, ge=1)
    mode: Literal["policy_update", "fictitious_play"] = "policy_update"
    warm_start: bool = True
    clip_bound: Optional[float] = Field(None, gt=0)
    early_stop_tol: Optional[float] = Field(None, gt=0)
    share_players: bool = True
    alpha0: Union[Literal["zero", "oracle"], float] = "zero"


class Delta0Section(_Strict):
    mode: Literal["fixed", "fixed_point"] = "fixed_point"
    value: float = Field(1.0, ge=0)
    batch: int = Field(4096, ge=2)
    max_iter: int = Field(20, ge=1)
    rel_tol: float = Field(0.05, gt=0)


class EvaluationSection(_Strict):
    J: int = Field(256, ge=2)
    eval_batch: int = Field(1024, ge=2)
    gap_steps: int = Field(2000, ge=0)
    gap_batch: int = Field(4096, ge=2)


class ExperimentConfig(_Strict):
    game: Literal["inter_bank", "custom"] = "inter_bank"
    custom_hook: Optional[str] = None
    inter_bank: InterBankSection = InterBankSection()
    partition: PartitionSection = PartitionSection()
    network: NetworkSection = NetworkSection()
    train: TrainSection = TrainSection()
    dfp: DfpSection = DfpSection()
    delta0: Delta0Section = Delta0Section()
    evaluation: EvaluationSection = EvaluationSection()
    output_dir: str = "runs"
    seed: int = 0
    deterministic: bool = False
    preset: Optional[Literal["ci", "full"]] = None

    @model_validator(mode="after")
    def _custom_needs_hook(self):
        if self.game == "custom" and not self.custom_hook:
            raise ValueError("game 'custom' needs custom_hook of the form 'module:function'")
        return self

    def to_dict(self):
        return self.model_dump(mode="json")

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


# Full preset: 30000 updates in total, split into 10 warm-started stages.
PRESETS = {
    "full": {
        "inter_bank": {"N": 10},
        "partition": {"n_steps": 40, "T": 1.0},
        "network": {"hidden": [40, 40, 40]},
        "train": {"steps": 3000, "batch": 256, "lr": 5e-4},
        "dfp": {"stages": 10},
    },
    "ci": {
        "inter_bank": {"N": 5},
        "partition": {"n_steps": 20, "T": 1.0},
        "network": {"hidden": [32, 32]},
        "train": {"steps": 8000, "batch": 256, "lr": 5e-4},
        "dfp": {"stages": 3},
    },
}


def _merge(base, update):
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _locate(node, loc):
    """Line (1-based) of the YAML node addressed by a pydantic error location."""
    line = None if node is None else node.start_mark.line + 1
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for key, value in node.value:
                if key.value == part:
                    nxt = value
                    line = key.start_mark.line + 1
                    break
            if nxt is None:
                return line
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def _format_errors(exc, node, source):
    lines = []
    for err in exc.errors():
        loc = tuple(err["loc"])
        where = _locate(node, loc) if node is not None else None
        path = ".".join(str(p) for p in loc) or "<root>"
        prefix = f"{source}:{where}: " if where is not None else f"{source}: "
        lines.append(f"{prefix}{path}: {err['msg']}")
    return "\n".join(lines)


def from_dict(data, preset=None, node=None, source="<config>"):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: the configuration must be a mapping")
    preset = preset or data.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"{source}: unknown preset {preset!r}")
    merged = _merge(PRESETS[preset], data) if preset else dict(data)
    if preset:
        merged["preset"] = preset
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, node, source)) from exc


def loads(text, preset=None, source="<config>"):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return from_dict(data, preset=preset, node=node, source=source)


def load(path, preset=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text, preset=preset, source=str(path))


def preset(name):
    return from_dict({}, preset=name)


# -- runtime objects --------------------------------------------------------------


def build_game(cfg):
    """``(game, params)``; ``params`` is ``None`` for a custom game."""
    from .systemic_risk import InterBankParams, build_game as build_inter_bank

    if cfg.game == "custom":
        module, _, name = cfg.custom_hook.partition(":")
        try:
            factory = getattr(importlib.import_module(module), name)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot import custom game hook {cfg.custom_hook!r}: {exc}") from exc
        return factory(cfg), None
    params = InterBankParams(T=cfg.partition.T, **cfg.inter_bank.model_dump())
    return build_inter_bank(params), params


def build_partition(cfg):
    from .sde import Partition

    return Partition.uniform(cfg.partition.T, cfg.partition.n_steps)


def build_dfp_config(cfg, delta0, alpha0=None):
    from .bsde import TrainConfig
    from .dfp import DfpConfig, NetSpec

    net = cfg.network
    return DfpConfig(
        stages=cfg.dfp.stages,
        mode=cfg.dfp.mode,
        train=TrainConfig(steps=cfg.train.steps, batch=cfg.train.batch, lr=cfg.train.lr,
                          seed=cfg.seed, eval_every=cfg.train.eval_every),
        nets=NetSpec(hidden=tuple(net.hidden), activation=net.activation, batchnorm=net.batchnorm,
                     representation=net.representation, head=net.head, momentum=net.momentum),
        delta0=float(delta0),
        alpha0=alpha0,
        clip_bound=cfg.dfp.clip_bound,
        warm_start=cfg.dfp.warm_start,
        early_stop_tol=cfg.dfp.early_stop_tol,
        share_players=cfg.dfp.share_players,
        eval_batch=cfg.evaluation.eval_batch,
        rse_paths=cfg.evaluation.J,
        seed=cfg.seed,
    )
