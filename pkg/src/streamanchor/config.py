"""Plain-text run configuration: ``key = value`` lines with dotted sections.

Example::

    task = KWS
    seed = 0
    losses = FCEL, FFL, SAL, SA+FL, SAFL
    target_fpr = 0.02
    gen.n_sequences = 2860
    gen.seed = 0
    model.channels = 66
    train.epochs = 20
    train.lr0 = 0.005
    loss.gamma = 2
    loss.alpha = 0.25

Sections: ``gen.*`` (GenConfig), ``model.*`` (ModelConfig), ``train.*``
(TrainConfig), ``loss.*`` (shared focal parameters and the single-run loss
``loss.kind``). The top-level ``seed`` drives model initialisation and
training; ``gen.seed`` drives the data.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from .anchors import TaskKind
from .data import DEFAULT_RATIOS, GenConfig, default_gen_config
from .losses import LossKind, LossSpec
from .models import ModelConfig, ModelKind, default_model_config
from .trainer import TrainConfig

ALL_LOSSES = tuple(LossKind)

TASK_MODEL = {
    TaskKind.KWS: ModelKind.KWS_CNN,
    TaskKind.MTD: ModelKind.MTD_GRU,
    TaskKind.SOD: ModelKind.SOD_LSTM,
}

TRAIN_DEFAULTS = {
    TaskKind.KWS: dict(epochs=12, batch_size=32, lr0=0.005, schedule="cosine"),
    TaskKind.MTD: dict(epochs=12, batch_size=32, lr0=0.005, schedule="cosine"),
    TaskKind.SOD: dict(epochs=10, batch_size=32, lr0=0.001, schedule="cosine"),
}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"config field {field_name!r}: {message}")


@dataclass(frozen=True)
class RunConfig:
    task: TaskKind
    gen: GenConfig
    model: ModelConfig
    train: TrainConfig
    losses: tuple[LossSpec, ...] = ()
    target_fpr: float = 0.02
    seed: int = 0
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    out_dir: str | None = None

    def __post_init__(self):
        if not self.losses:
            raise ConfigError("losses", "loss list must be nonempty")
        if not 0.0 <= self.target_fpr <= 1.0:
            raise ConfigError("target_fpr", f"must be in [0, 1], got {self.target_fpr}")
        if self.model.input_dim != self.gen.dim:
            raise ConfigError("model.input_dim",
                              f"{self.model.input_dim} does not match gen.dim {self.gen.dim}")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, model=replace(self.model, seed=seed),
                       train=replace(self.train, seed=seed))


def default_run_config(task: TaskKind | str = TaskKind.KWS) -> RunConfig:
    task = TaskKind.parse(task)
    gen = default_gen_config(task)
    model = default_model_config(TASK_MODEL[task], input_dim=gen.dim)
    train = TrainConfig(task=task, loss=LossSpec(), **TRAIN_DEFAULTS[task])
    return RunConfig(task=task, gen=gen, model=model, train=train,
                     losses=tuple(LossSpec(k) for k in ALL_LOSSES))


def _coerce(name: str, text: str, example):
    text = text.strip()
    try:
        if isinstance(example, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(example, Enum):
            return type(example).parse(text)
        if isinstance(example, int):
            return int(text)
        if isinstance(example, float):
            return float(text)
        if isinstance(example, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if example and isinstance(example[0], int):
                return tuple(int(t) for t in items)
            return tuple(float(t) for t in items)
        if example is None:
            return None if text.lower() in ("none", "") else int(text)
        return text
    except ValueError as exc:
        raise ConfigError(name, str(exc)) from None


def _apply(obj, section: str, items: dict[str, str]):
    if not items:
        return obj
    fields = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, text in items.items():
        if key not in fields or key in ("loss", "task", "kind"):
            raise ConfigError(f"{section}.{key}", "unknown field")
        changes[key] = _coerce(f"{section}.{key}", text, getattr(obj, key))
    try:
        return replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        # validators name the offending field as "invalid <Class>.<field>"
        named = re.search(r"invalid \w+\.(\w+)", str(exc))
        key = named.group(1) if named and named.group(1) in changes else next(iter(changes))
        raise ConfigError(f"{section}.{key}", str(exc)) from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value in {source}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}", "empty key")
        if key in raw:
            raise ConfigError(key, "given twice")
        raw[key] = value

    try:
        task = TaskKind.parse(raw.pop("task", "KWS"))
    except ValueError as exc:
        raise ConfigError("task", str(exc)) from None
    base = default_run_config(task)
    sections: dict[str, dict[str, str]] = {"gen": {}, "model": {}, "train": {}, "loss": {}}
    top: dict[str, str] = {}
    for key, value in raw.items():
        if "." in key:
            sec, sub = key.split(".", 1)
            if sec not in sections:
                raise ConfigError(key, "unknown section")
            sections[sec][sub] = value
        else:
            top[key] = value

    try:
        gen = _apply(base.gen, "gen", sections["gen"])
        model_items = dict(sections["model"])
        model = _apply(replace(base.model, input_dim=gen.dim), "model", model_items)
        train = _apply(base.train, "train", sections["train"])

        loss_items = dict(sections["loss"])
        kind = LossKind.parse(loss_items.pop("kind")) if "kind" in loss_items else LossKind.FCEL
        shared = {}
        for key, text in loss_items.items():
            if key not in ("gamma", "alpha", "no_anchor_weight"):
                raise ConfigError(f"loss.{key}", "unknown field")
            shared[key] = _coerce(f"loss.{key}", text, 0.0)
        try:
            train = replace(train, loss=LossSpec(kind, **shared))
        except ValueError as exc:
            raise ConfigError("loss", str(exc)) from None

        unknown = set(top) - {"losses", "target_fpr", "seed", "ratios", "out_dir"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        losses = base.losses
        if "losses" in top:
            try:
                kinds = [LossKind.parse(t) for t in top["losses"].split(",") if t.strip()]
            except ValueError as exc:
                raise ConfigError("losses", str(exc)) from None
            losses = tuple(LossSpec(k, **shared) for k in kinds)
        elif shared:
            losses = tuple(LossSpec(s.kind, **shared) for s in losses)
        target_fpr = _coerce("target_fpr", top.get("target_fpr", "0.02"), 0.0)
        seed = _coerce("seed", top.get("seed", "0"), 0)
        ratios = _coerce("ratios", top.get("ratios", "0.7,0.15,0.15"), (0.0,))
        if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
            raise ConfigError("ratios", f"need three nonnegative values summing to 1, got {ratios}")
        cfg = RunConfig(task=task, gen=gen, model=model, train=train, losses=losses,
                        target_fpr=target_fpr, seed=seed, ratios=ratios,
                        out_dir=top.get("out_dir"))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("config", str(exc)) from None
    return cfg.with_seed(seed)


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    """Canonical ``key = value`` text for a config (round-trips through parse_config)."""
    lines = [f"task = {cfg.task.value}", f"seed = {cfg.seed}",
             "losses = " + ", ".join(s.kind.value for s in cfg.losses),
             f"target_fpr = {cfg.target_fpr!r}",
             "ratios = " + ", ".join(repr(r) for r in cfg.ratios)]
    for section, obj, skip in (("gen", cfg.gen, {"task"}), ("model", cfg.model, {"kind"}),
                               ("train", cfg.train, {"task", "loss"})):
        for f in dataclasses.fields(obj):
            if f.name in skip:
                continue
            value = getattr(obj, f.name)
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            elif value is None:
                value = "none"
            lines.append(f"{section}.{f.name} = {value}")
    spec = cfg.train.loss
    lines += [f"loss.kind = {spec.kind.value}", f"loss.gamma = {spec.gamma!r}",
              f"loss.alpha = {spec.alpha!r}", f"loss.no_anchor_weight = {spec.no_anchor_weight!r}"]
    return "\n".join(lines) + "\n"
