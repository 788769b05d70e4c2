"""Model and training configuration, plus the flat key=value file format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError

SHRINKERS = ("none", "fixed", "ctc_greedy", "boundary")
STAGES = ("asr_pretrain", "mt_pretrain", "st_finetune", "single_stage")

LABEL_SMOOTHING = 0.1  # applied to the translation loss only


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 256
    acoustic_layers: int = 2
    semantic_layers: int = 2
    decoder_layers: int = 2
    subsample_factor: int = 2
    d_feat: int = 16
    source_vocab: int = 32
    target_vocab: int = 32
    mu: float = 1.0
    theta_infer: float = 0.4
    alpha: float = 1.0
    beta: float = 1.0
    shrinker: str = "boundary"
    forced_training: bool = True
    blank_weighting: bool = True
    fixed_rate: int = 3
    beam_size: int = 1

    def validate(self) -> None:
        for name in (
            "d_model", "n_heads", "ffn_dim", "acoustic_layers", "semantic_layers",
            "decoder_layers", "d_feat", "source_vocab", "target_vocab",
            "fixed_rate", "beam_size",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.subsample_factor not in (2, 4):
            raise ConfigError(f"subsample_factor must be 2 or 4, got {self.subsample_factor}")
        if not 0.0 < self.theta_infer < 1.0:
            raise ConfigError(f"theta_infer must lie in (0, 1), got {self.theta_infer}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights alpha and beta must be >= 0")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if self.shrinker not in SHRINKERS:
            raise ConfigError(f"shrinker must be one of {SHRINKERS}, got {self.shrinker!r}")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 500
    lr: float = 0.002
    warmup_steps: int = 200
    batch_frames: int = 1600
    save_every: int = 500
    log_every: int = 50
    corpus: str = ""

    def validate(self) -> None:
        if self.steps < 1 or self.warmup_steps < 1 or self.batch_frames < 1:
            raise ConfigError("steps, warmup_steps and batch_frames must be positive")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")


_BOOL_KEYS = {"forced_training", "blank_weighting"}
_INT_KEYS = {
    "d_model", "n_heads", "ffn_dim", "acoustic_layers", "semantic_layers",
    "decoder_layers", "subsample_factor", "d_feat", "source_vocab", "target_vocab",
    "fixed_rate", "beam_size", "seed", "steps", "warmup_steps", "batch_frames",
    "save_every", "log_every",
}
_FLOAT_KEYS = {"mu", "theta_infer", "alpha", "beta", "lr"}
_STR_KEYS = {"shrinker", "corpus"}

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key}: expected a boolean, got {raw!r}")
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key}: {exc}") from exc
    return raw


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse `key=value` lines; '#' starts a comment; unknown keys fail."""
    model_kw: dict = {}
    train_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _MODEL_KEYS:
            model_kw[key] = _coerce(key, raw)
        elif key in _TRAIN_KEYS:
            train_kw[key] = _coerce(key, raw)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    model = ModelConfig(**model_kw)
    train = TrainConfig(**train_kw)
    model.validate()
    train.validate()
    return model, train


def load_config(path: str) -> tuple[ModelConfig, TrainConfig]:
    with open(path) as fh:
        return parse_config_text(fh.read())


def config_snapshot(model: ModelConfig, train: TrainConfig) -> dict:
    snap = {f.name: getattr(model, f.name) for f in fields(ModelConfig)}
    snap.update({f.name: getattr(train, f.name) for f in fields(TrainConfig)})
    return snap


def override(cfg, **updates):
    """Apply CLI-style overrides, dropping None values."""
    updates = {k: v for k, v in updates.items() if v is not None}
    out = replace(cfg, **updates)
    out.validate()
    return out
