"""Experiment configuration: flat ``key = value`` text files with typed keys.

Unknown keys are rejected with their line number, so stale or misspelled
configs fail closed.  ``mode = pn_star`` degenerates the model into a plain
prototype network: mean prototypes, proximity loss only, no distillation.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .episodes import SamplerConfig
from .losses import LossWeights

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "write_config"]


class ConfigError(Exception):
    pass


def _int_tuple(text: str):
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def _bool(text: str):
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    # paths
    dataset_dir: str = ""
    manifest: str = "manifest.json"
    run_dir: str = "runs"
    # mode
    mode: str = "geometer"              # geometer | pn_star
    # split preparation
    base_class_count: int = 2
    novel_per_session: int = 1
    num_sessions: int = 5
    k_shot: int = 5
    split_seed: int = 0
    base_classes: tuple = ()            # explicit override; empty = pick largest classes
    novel_classes: tuple = ()           # explicit override, chunked by novel_per_session
    # model
    hidden_dim: int = 512
    embedding_dim: int = 64
    backbone_heads: int = 1
    class_attention_heads: int = 4
    dropout: float = 0.0
    # episodic sampling
    k_max: int = 10
    k_qry: int = 10
    old_query_bias: float = 0.7
    episodes_pretrain: int = 500
    episodes_finetune: int = 100
    n_way_pretrain: int = 0
    # loss weights
    lambda_p: float = 1.0
    lambda_u: float = 1.0
    lambda_s: float = 1.0
    lambda_kd: float = 1.0
    tau: float = 2.0
    alpha_pretrain: str = "uniform"     # uniform | inverse_frequency
    alpha_finetune: str = "inverse_frequency"
    logit_sign: str = "negative"        # negative | positive (ablation hook)
    # optimization
    lr_pretrain: float = 1e-3
    lr_finetune: float = 1e-4
    optimizer: str = "adam"             # adam | sgd
    freeze_backbone: bool = False
    # carried_prototypes: keep old prototype vectors frozen (teacher's values)
    # both inside finetune episodes and in the per-session model, instead of
    # recomputing them through the current encoder
    carried_prototypes: bool = False
    seeds: tuple = (0,)

    def __post_init__(self):
        if self.mode not in ("geometer", "pn_star"):
            raise ConfigError(f"mode must be geometer or pn_star, got {self.mode!r}")
        for key in ("alpha_pretrain", "alpha_finetune"):
            if getattr(self, key) not in ("uniform", "inverse_frequency"):
                raise ConfigError(f"{key} must be uniform or inverse_frequency")
        if self.logit_sign not in ("negative", "positive"):
            raise ConfigError("logit_sign must be negative or positive")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")

    @property
    def prototype_mode(self) -> str:
        return "mean" if self.mode == "pn_star" else "attention"

    @property
    def sign(self) -> float:
        return -1.0 if self.logit_sign == "negative" else 1.0

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(k_max=self.k_max, k_qry=self.k_qry,
                             old_query_bias=self.old_query_bias, n_way=self.n_way_pretrain)

    def loss_weights(self) -> LossWeights:
        if self.mode == "pn_star":
            return LossWeights(lambda_p=self.lambda_p, lambda_u=0.0, lambda_s=0.0,
                               lambda_kd=0.0, tau=self.tau)
        return LossWeights(lambda_p=self.lambda_p, lambda_u=self.lambda_u,
                           lambda_s=self.lambda_s, lambda_kd=self.lambda_kd, tau=self.tau)

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)


_PARSERS = {int: int, float: float, str: lambda s: s.strip(), bool: _bool, tuple: _int_tuple}


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"missing config file: {p}")
    type_of = {f.name: type(getattr(ExperimentConfig(), f.name)) for f in fields(ExperimentConfig)}
    values = {}
    for ln, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in type_of:
            raise ConfigError(f"{p}:{ln}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{p}:{ln}: duplicate key {key!r}")
        parser = _PARSERS[type_of[key]]
        try:
            values[key] = parser(value.strip())
        except ValueError as exc:
            raise ConfigError(f"{p}:{ln}: bad value for {key!r} ({exc})") from None
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{p}: {exc}") from None


def write_config(cfg: ExperimentConfig, path) -> None:
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
