"""Strict line-oriented run configuration.

Grammar (one statement per line)::

    line   := blank | comment | assign [comment]
    assign := SECTION "." KEY "=" VALUE
    comment:= "#" ...
    VALUE  := token | token ("," token)*

Names are ``[a-z_][a-z0-9_]*``. Values are unquoted; whitespace around
``=`` and ``,`` is ignored. Unknown keys, repeated keys and values of the
wrong type are errors carrying the line and column of the offending text.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .bank import K_ALL, RetrievalConfig
from .errors import ConfigError, InvalidArgumentError
from .losses import LossConfig
from .train import ABLATIONS, MODES, TrainConfig

_NAME = r"[a-z_][a-z0-9_]*"
_ASSIGN = re.compile(rf"\s*({_NAME})\.({_NAME})\s*=\s*")

WEIGHTINGS = ("ab", "a", "b", "none")


class _Bad(Exception):
    """Value conversion failure; offset is relative to the value start."""

    def __init__(self, msg, offset=0):
        super().__init__(msg)
        self.offset = offset


def _int(tok):
    try:
        return int(tok)
    except ValueError:
        raise _Bad(f"expected an integer, got {tok!r}") from None


def _float(tok):
    try:
        v = float(tok)
    except ValueError:
        raise _Bad(f"expected a number, got {tok!r}") from None
    if v != v or v in (float("inf"), float("-inf")):
        raise _Bad(f"expected a finite number, got {tok!r}")
    return v


def _bool(tok):
    if tok in ("true", "false"):
        return tok == "true"
    raise _Bad(f"expected true or false, got {tok!r}")


def _str(tok):
    if not tok:
        raise _Bad("empty value")
    return tok


def _kpos(tok):
    return K_ALL if tok == "all" else _int(tok)


def _opt(conv):
    return lambda tok: None if tok == "none" else conv(tok)


def _enum(*choices):
    def conv(tok):
        if tok not in choices:
            raise _Bad(f"expected one of {', '.join(choices)}; got {tok!r}")
        return tok
    return conv


def _list(conv, allow_empty=False):
    def parse(text):
        if not text.strip():
            if allow_empty:
                return ()
            raise _Bad("empty list")
        out, pos = [], 0
        for part in text.split(","):
            lead = len(part) - len(part.lstrip())
            try:
                out.append(conv(part.strip()))
            except _Bad as e:
                raise _Bad(str(e), pos + lead) from None
            pos += len(part) + 1
        return tuple(out)
    parse.is_list = True
    return parse


def _scalar(conv):
    def parse(text):
        if "," in text:
            raise _Bad("a single value is expected here", text.index(","))
        return conv(text.strip())
    return parse


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if v == K_ALL and isinstance(v, int):
        return "all"
    return str(v)


@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    path: str | None = None
    classes: int = 10
    per_class: int = 300
    dim: int = 16
    spread: float = 0.35
    noise: float = 0.1
    seed: int = 7
    test_fraction: float = 0.3


@dataclass(frozen=True)
class ModelConfig:
    teacher_hidden: tuple[int, ...] = (128, 128)
    student_hidden: tuple[int, ...] = (6,)
    peer_hidden: tuple[int, ...] = (6,)
    teacher_checkpoint: str | None = None


@dataclass(frozen=True)
class AblateConfig:
    seeds: int = 5
    rows: tuple[str, ...] = ("kd_only", "kd_picd", "kd_nicd", "full")
    weightings: tuple[str, ...] = WEIGHTINGS


@dataclass(frozen=True)
class SweepConfig:
    seeds: int = 1
    k_positive: tuple[int, ...] = (1, 5, 25, K_ALL)
    beta1: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    beta2: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    gamma_picd: tuple[float, ...] = (0.0, 1.0, 2.0, 4.0, 8.0)
    gamma_nicd: tuple[float, ...] = (0.0, 1.0, 5.0, 10.0, 20.0)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


_TRAIN_KEYS = {
    "epochs": _int, "batch_size": _int, "lr": _float, "lr_decay_epochs": _list(_int, allow_empty=True),
    "lr_decay_factor": _float, "momentum": _float, "weight_decay": _float, "seed": _int,
    "mode": _enum(*MODES), "ablation": _enum(*ABLATIONS), "online_mirror": _bool,
    "peer_seed": _opt(_int), "log_wall_time": _bool,
}

SCHEMA = {
    "data": {
        "source": _enum("blobs", "spirals", "file"), "path": _opt(_str), "classes": _int,
        "per_class": _int, "dim": _int, "spread": _float, "noise": _float, "seed": _int,
        "test_fraction": _float,
    },
    "model": {
        "teacher_hidden": _list(_int, allow_empty=True), "student_hidden": _list(_int, allow_empty=True),
        "peer_hidden": _list(_int, allow_empty=True),
        "teacher_checkpoint": _opt(_str),
    },
    "train": _TRAIN_KEYS,
    "loss": {
        "alpha": _float, "tau_kd": _float, "tau1": _float, "gamma_picd": _float, "gamma_nicd": _float,
        "use_a_weights": _bool, "use_b_weights": _bool, "scale_by_tau_sq": _bool, "tau_nicd": _float,
    },
    "retrieval": {
        "beta1": _float, "beta2": _float, "k_positive": _kpos, "n_negative": _int,
        "negative_strategy": _enum("hardest", "random"), "weight_scope": _enum("selected", "candidates"),
    },
    "ablate": {
        "seeds": _int, "rows": _list(_enum("kd_only", "kd_picd", "kd_nicd", "full", "ickd_all")),
        "weightings": _list(_enum(*WEIGHTINGS)),
    },
    "sweep": {
        "seeds": _int, "k_positive": _list(_kpos), "beta1": _list(_float), "beta2": _list(_float),
        "gamma_picd": _list(_float), "gamma_nicd": _list(_float),
    },
}

for _sec in SCHEMA.values():
    for _k, _conv in list(_sec.items()):
        if not getattr(_conv, "is_list", False):
            _sec[_k] = _scalar(_conv)


def _convert(section, key, raw, line, col):
    where = f"{section}.{key}"
    if section not in SCHEMA:
        raise ConfigError(f"unknown section {section!r} in key {where!r}", line, col, where)
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {where!r}", line, None if col is None else col + len(section) + 1, where)
    return SCHEMA[section][key](raw), where


def parse_assignments(text: str) -> dict:
    """Parse config text into ``{"section.key": value}``."""
    out = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        body = raw_line.split("#", 1)[0]
        if not body.strip():
            continue
        m = _ASSIGN.match(body)
        if not m:
            col = len(body) - len(body.lstrip()) + 1
            raise ConfigError("expected 'section.key = value'", lineno, col)
        section, key = m.group(1), m.group(2)
        key_col = m.start(1) + 1
        vstart = m.end()
        raw = body[vstart:].rstrip()
        try:
            value, where = _convert(section, key, raw, lineno, key_col)
        except _Bad as e:
            raise ConfigError(f"{section}.{key}: {e}", lineno, vstart + e.offset + 1, f"{section}.{key}") from None
        if where in out:
            raise ConfigError(f"duplicate key {where!r}", lineno, key_col, where)
        out[where] = value
    return out


def parse_override(text: str) -> tuple[str, object]:
    """Parse one ``section.key=value`` override as given to ``--set``."""
    m = _ASSIGN.match(text)
    if not m or "#" in text:
        raise ConfigError(f"malformed override {text!r}; expected section.key=value")
    section, key = m.group(1), m.group(2)
    try:
        value, where = _convert(section, key, text[m.end():].strip(), None, None)
    except _Bad as e:
        raise ConfigError(f"override {section}.{key}: {e}", key=f"{section}.{key}") from None
    except ConfigError as e:
        raise ConfigError(f"override: {e}", key=e.key) from None
    return where, value


def build(assignments: dict) -> RunConfig:
    """Turn flat assignments into a validated :class:`RunConfig`."""
    groups = {s: {} for s in SCHEMA}
    for dotted, value in assignments.items():
        s, k = dotted.split(".", 1)
        groups[s][k] = value
    try:
        train = TrainConfig(
            loss=LossConfig(**groups["loss"]),
            retrieval=RetrievalConfig(**groups["retrieval"]),
            **groups["train"],
        )
        cfg = RunConfig(
            DataConfig(**groups["data"]), ModelConfig(**groups["model"]), train,
            AblateConfig(**groups["ablate"]), SweepConfig(**groups["sweep"]),
        )
    except InvalidArgumentError as e:
        raise ConfigError(f"invalid configuration: {e}") from None
    d = cfg.data
    if d.source == "file" and not d.path:
        raise ConfigError("data.source = file requires data.path", key="data.path")
    if d.classes < 2 or d.per_class < 2 or d.dim < 1:
        raise ConfigError("data needs classes >= 2, per_class >= 2 and dim >= 1")
    if not 0.0 < d.test_fraction < 1.0:
        raise ConfigError("data.test_fraction must lie in (0, 1)", key="data.test_fraction")
    if cfg.ablate.seeds < 1 or cfg.sweep.seeds < 1:
        raise ConfigError("seed counts must be >= 1")
    return cfg


def load(text: str = "", overrides=(), seed: int | None = None) -> tuple[RunConfig, dict]:
    """Parse text plus ``--set`` overrides; returns the config and its flat form."""
    flat = parse_assignments(text)
    for item in overrides:
        key, value = parse_override(item)
        flat[key] = value
    if seed is not None:
        flat["train.seed"] = int(seed)
    return build(flat), flat


def snapshot(cfg: RunConfig) -> str:
    """Canonical text of every key, in schema order; parses back to ``cfg``."""
    lines = []
    sections = {
        "data": cfg.data, "model": cfg.model, "train": cfg.train, "loss": cfg.train.loss,
        "retrieval": cfg.train.retrieval, "ablate": cfg.ablate, "sweep": cfg.sweep,
    }
    for name, keys in SCHEMA.items():
        obj = sections[name]
        for k in keys:
            lines.append(f"{name}.{k} = {_fmt(getattr(obj, k))}")
    return "\n".join(lines) + "\n"


def with_train(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, **changes))

