"""Plain-text config documents: dotted keys, one `section.key = value` per line.

`#` starts a comment.  Unknown keys are hard errors so typos cannot silently
fall back to defaults.  Loaders produce the validated config dataclasses and
renderers emit canonical documents (used for run-directory snapshots).
"""

from __future__ import annotations

from pathlib import Path

from .data import GenConfig
from .errors import ConfigError
from .margin import MARGIN_PRESETS, MarginParams
from .optim import SgdConfig
from .trainer import TrainConfig


def parse_document(text: str) -> dict[str, str]:
    """Raw key -> value strings; syntax and duplicate keys raise ConfigError."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or any(not piece.isidentifier() for piece in key.split(".")):
            raise ConfigError(f"line {lineno}: malformed key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_document(path) -> dict[str, str]:
    return parse_document(Path(path).read_text())


def _parse_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {value!r}") from None


def _parse_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {value!r}") from None


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    raise ConfigError(f"{key} must be true or false, got {value!r}")


def _parse_tuple(key: str, value: str, item):
    stripped = value.strip()
    if not stripped:
        return ()
    return tuple(item(key, part.strip()) for part in stripped.split(","))


_GEN_FIELDS = {
    "data.num_classes": ("num_classes", _parse_int),
    "data.samples_per_class": ("samples_per_class", _parse_int),
    "data.input_dim": ("input_dim", _parse_int),
    "data.easy_fraction": ("easy_fraction", _parse_float),
    "data.easy_noise": ("easy_noise", _parse_float),
    "data.hard_noise": ("hard_noise", _parse_float),
    "data.seed": ("seed", _parse_int),
}


def load_gen_config(doc: dict[str, str], seed_override: int | None = None) -> GenConfig:
    kwargs = {}
    for key, value in doc.items():
        if key not in _GEN_FIELDS:
            raise ConfigError(f"unknown key {key!r} in dataset config")
        attr, parser = _GEN_FIELDS[key]
        kwargs[attr] = parser(key, value)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return GenConfig(**kwargs)


_TRAIN_SIMPLE = {
    "train.variant": ("variant", str),
    "train.rounds": ("rounds", _parse_int),
    "train.epochs_per_round": ("epochs_per_round", _parse_int),
    "train.batch_size": ("batch_size", _parse_int),
    "train.alpha": ("alpha", _parse_float),
    "train.lambda": ("lam", _parse_float),
    "train.ema_momentum": ("ema_momentum", _parse_float),
    "train.hardness_epsilon": ("hardness_epsilon", _parse_float),
    "train.renormalize_weights": ("renormalize_weights", _parse_bool),
    "train.finetune_lr_scale": ("finetune_lr_scale", _parse_float),
    "train.finetune_epochs": ("finetune_epochs", _parse_int),
    "train.seed": ("seed", _parse_int),
    "model.hidden_width": ("hidden_width", _parse_int),
    "model.num_hidden": ("num_hidden", _parse_int),
    "model.embed_dim": ("embed_dim", _parse_int),
}

_SGD_FIELDS = {
    "sgd.learning_rate": ("learning_rate", _parse_float),
    "sgd.momentum": ("momentum", _parse_float),
    "sgd.weight_decay": ("weight_decay", _parse_float),
    "sgd.lr_drop_factor": ("lr_drop_factor", _parse_float),
}

_MARGIN_FIELDS = {
    "margin.m_s": ("m_s", _parse_float),
    "margin.m_a": ("m_a", _parse_float),
    "margin.m_c": ("m_c", _parse_float),
    "margin.base_scale": ("base_scale", _parse_float),
    "margin.theta_max": ("theta_max", _parse_float),
}


def load_train_config(doc: dict[str, str], seed_override: int | None = None) -> TrainConfig:
    train_kwargs: dict = {}
    sgd_kwargs: dict = {}
    margin_kwargs: dict = {}
    preset = None
    for key, value in doc.items():
        if key in _TRAIN_SIMPLE:
            attr, parser = _TRAIN_SIMPLE[key]
            train_kwargs[attr] = parser(key, value) if parser is not str else value.strip()
        elif key == "train.betas":
            train_kwargs["betas"] = _parse_tuple(key, value, _parse_float)
        elif key in _SGD_FIELDS:
            attr, parser = _SGD_FIELDS[key]
            sgd_kwargs[attr] = parser(key, value)
        elif key == "sgd.lr_drop_epochs":
            sgd_kwargs["lr_drop_epochs"] = _parse_tuple(key, value, _parse_int)
        elif key == "margin.preset":
            preset = value.strip()
            if preset not in MARGIN_PRESETS:
                raise ConfigError(
                    f"margin.preset must be one of {sorted(MARGIN_PRESETS)}, got {preset!r}"
                )
        elif key in _MARGIN_FIELDS:
            attr, parser = _MARGIN_FIELDS[key]
            margin_kwargs[attr] = parser(key, value)
        else:
            raise ConfigError(f"unknown key {key!r} in train config")

    if seed_override is not None:
        train_kwargs["seed"] = seed_override

    defaults = TrainConfig.__dataclass_fields__
    base_sgd = defaults["sgd"].default_factory()
    for attr in ("learning_rate", "momentum", "weight_decay",
                 "lr_drop_epochs", "lr_drop_factor"):
        sgd_kwargs.setdefault(attr, getattr(base_sgd, attr))
    sgd = SgdConfig(**sgd_kwargs)

    if preset is not None:
        base_margin = MarginParams.preset(preset)
    else:
        base_margin = defaults["margin"].default_factory()
    for attr in ("m_s", "m_a", "m_c", "base_scale", "theta_max"):
        margin_kwargs.setdefault(attr, getattr(base_margin, attr))
    margin = MarginParams(**margin_kwargs)

    return TrainConfig(sgd=sgd, margin=margin, **train_kwargs)


def render_gen_config(config: GenConfig) -> str:
    lines = [
        "# synthetic dataset configuration",
        f"data.num_classes = {config.num_classes}",
        f"data.samples_per_class = {config.samples_per_class}",
        f"data.input_dim = {config.input_dim}",
        f"data.easy_fraction = {config.easy_fraction!r}",
        f"data.easy_noise = {config.easy_noise!r}",
        f"data.hard_noise = {config.hard_noise!r}",
        f"data.seed = {config.seed}",
    ]
    return "\n".join(lines) + "\n"


def render_train_config(config: TrainConfig) -> str:
    sgd, margin = config.sgd, config.margin
    lines = [
        "# training configuration",
        f"train.variant = {config.variant}",
        f"train.rounds = {config.rounds}",
        f"train.epochs_per_round = {config.epochs_per_round}",
        f"train.batch_size = {config.batch_size}",
        f"train.alpha = {config.alpha!r}",
        f"train.lambda = {config.lam!r}",
        f"train.ema_momentum = {config.ema_momentum!r}",
        f"train.hardness_epsilon = {config.hardness_epsilon!r}",
        f"train.betas = {', '.join(repr(b) for b in config.betas)}",
        f"train.renormalize_weights = {'true' if config.renormalize_weights else 'false'}",
        f"train.finetune_lr_scale = {config.finetune_lr_scale!r}",
        f"train.finetune_epochs = {config.finetune_epochs}",
        f"train.seed = {config.seed}",
        f"sgd.learning_rate = {sgd.learning_rate!r}",
        f"sgd.momentum = {sgd.momentum!r}",
        f"sgd.weight_decay = {sgd.weight_decay!r}",
        f"sgd.lr_drop_epochs = {', '.join(str(e) for e in sgd.lr_drop_epochs)}",
        f"sgd.lr_drop_factor = {sgd.lr_drop_factor!r}",
        f"margin.m_s = {margin.m_s!r}",
        f"margin.m_a = {margin.m_a!r}",
        f"margin.m_c = {margin.m_c!r}",
        f"margin.base_scale = {margin.base_scale!r}",
        f"margin.theta_max = {margin.theta_max!r}",
        f"model.hidden_width = {config.hidden_width}",
        f"model.num_hidden = {config.num_hidden}",
        f"model.embed_dim = {config.embed_dim}",
    ]
    return "\n".join(lines) + "\n"
