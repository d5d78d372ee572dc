"""Run configuration: schema, validation, overrides and hashing."""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

BP4D_AUS = ["AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU14", "AU15", "AU17", "AU23", "AU24"]
BACKBONES = ("toy-conv", "swin-like")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass
class SyntheticConfig:
    num_samples: int = 64
    seed: int = 0
    jitter: int = 1
    noise: float = 0.04


@dataclass
class DataConfig:
    au_ids: list[str] = field(default_factory=lambda: list(BP4D_AUS))
    train_dir: str | None = None
    eval_dir: str | None = None
    descriptions: str | None = None  # None -> bundled FACS descriptions
    vocab: str | None = None  # None -> bundled vocabulary
    batch_size: int = 8
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class SwinConfig:
    patch: int = 4
    embed_dim: int = 128
    depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    heads: list[int] = field(default_factory=lambda: [4, 8, 16, 32])
    window: int = 7


@dataclass
class ModelConfig:
    image_size: int = 32
    backbone: str = "toy-conv"
    raw_channels: int = 128
    width: int = 64
    toy_stages: int = 3
    swin: SwinConfig = field(default_factory=SwinConfig)


@dataclass
class TextConfig:
    width: int = 64
    layers: int = 4
    heads: int = 4
    trainable_layers: int = 2
    max_tokens: int = 32
    context_layers: int = 3
    context_heads: int = 8
    dropout: float = 0.0


@dataclass
class GraphConfig:
    k: int = 3


@dataclass
class LossConfig:
    lam: float = field(default=1e-5, metadata={"key": "lambda"})
    class_weights: bool = True


@dataclass
class StageConfig:
    lr: float = 1e-5
    epochs: int = 30
    max_steps: int | None = None


@dataclass
class EvalConfig:
    threshold: float = 0.5


@dataclass
class AblationConfig:
    no_ddca: bool = False
    no_cdca: bool = False
    no_text: bool = False
    no_aug: bool = False
    no_diff_loss: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    text: TextConfig = field(default_factory=TextConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(lr=1e-5))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(lr=1e-6))
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @property
    def num_aus(self) -> int:
        return len(self.data.au_ids)


# ---------------------------------------------------------------------------
# dict <-> dataclass


def _key(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
        return _from_dict(tp, value, path)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _from_dict(cls, data: dict, prefix: str = ""):
    fields = {_key(f): f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in fields:
            close = difflib.get_close_matches(str(key), list(fields), n=1)
            if not close and "." in str(key):
                close = difflib.get_close_matches(str(key).split(".")[0], list(fields), n=1)
            hint = f"; did you mean {(prefix + '.' if prefix else '') + close[0]!r}?" if close else ""
            raise ConfigError(path, f"unknown key{hint}")
        f = fields[key]
        kwargs[f.name] = _coerce(value, hints[f.name], path)
    return cls(**kwargs)


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[_key(f)] = to_dict(v) if dataclasses.is_dataclass(v) else (list(v) if isinstance(v, tuple) else v)
    return out


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        path = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out.update(flatten(v, path))
        else:
            out[path] = v
    return out


# ---------------------------------------------------------------------------
# validation and hashing


def check(cfg: RunConfig, base_dir: Path | None = None) -> RunConfig:
    """Semantic checks beyond types; raises ConfigError naming the key."""
    n = cfg.num_aus
    if n < 1:
        raise ConfigError("data.au_ids", "at least one AU is required")
    if len(set(cfg.data.au_ids)) != n:
        raise ConfigError("data.au_ids", "duplicate AU ids")
    if cfg.loss.lam < 0:
        raise ConfigError("loss.lambda", f"must be >= 0, got {cfg.loss.lam}")
    for name in ("stage1", "stage2"):
        st = getattr(cfg, name)
        if st.lr <= 0:
            raise ConfigError(f"{name}.lr", f"must be > 0, got {st.lr}")
        if st.epochs < 1:
            raise ConfigError(f"{name}.epochs", f"must be >= 1, got {st.epochs}")
        if st.max_steps is not None and st.max_steps < 1:
            raise ConfigError(f"{name}.max_steps", "must be >= 1")
    if n > 1 and not 1 <= cfg.graph.k <= n - 1:
        raise ConfigError("graph.k", f"must lie in [1, {n - 1}], got {cfg.graph.k}")
    if cfg.model.backbone not in BACKBONES:
        raise ConfigError("model.backbone", f"must be one of {BACKBONES}")
    if cfg.data.batch_size < 1:
        raise ConfigError("data.batch_size", "must be >= 1")
    if cfg.model.width % cfg.text.context_heads:
        raise ConfigError("text.context_heads", "must divide model.width")
    if cfg.text.width % cfg.text.heads:
        raise ConfigError("text.heads", "must divide text.width")
    if not 0 <= cfg.text.trainable_layers <= cfg.text.layers:
        raise ConfigError("text.trainable_layers", "must lie in [0, text.layers]")
    if cfg.model.backbone == "toy-conv" and cfg.model.image_size % (2 ** cfg.model.toy_stages):
        raise ConfigError("model.image_size", "must be divisible by 2**model.toy_stages")
    if cfg.model.backbone == "swin-like":
        sw = cfg.model.swin
        out = sw.embed_dim * 2 ** (len(sw.depths) - 1)
        if cfg.model.raw_channels != out:
            raise ConfigError("model.raw_channels", f"swin-like backbone emits {out} channels, got {cfg.model.raw_channels}")
        if len(sw.heads) != len(sw.depths):
            raise ConfigError("model.swin.heads", "needs one entry per stage")
        if cfg.model.image_size % (sw.patch * 2 ** (len(sw.depths) - 1)):
            raise ConfigError("model.image_size", "must be divisible by patch * 2**(stages - 1)")
    if not 0 <= cfg.eval.threshold:
        raise ConfigError("eval.threshold", "must be >= 0")
    for key in ("train_dir", "eval_dir", "descriptions", "vocab"):
        value = getattr(cfg.data, key)
        if value is None:
            continue
        p = Path(value)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
            setattr(cfg.data, key, str(p))
        if key in ("descriptions", "vocab") and not p.exists():
            raise ConfigError(f"data.{key}", f"path does not exist: {p}")
    return cfg


def from_dict(data: dict | None, base_dir: Path | None = None) -> RunConfig:
    return check(_from_dict(RunConfig, data or {}), base_dir)


def validate_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("", f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("", "top level of the config must be a mapping")
    return from_dict(data, path.parent.resolve())


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Return a new config with dotted-key overrides applied and re-validated."""
    data = to_dict(cfg)
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for i, p in enumerate(parts):
            if p not in node or (i < len(parts) - 1 and not isinstance(node[p], dict)):
                close = difflib.get_close_matches(p, list(node), n=1)
                hint = f"; did you mean {'.'.join(parts[:i] + close)!r}?" if close else ""
                raise ConfigError(dotted, f"unknown key{hint}")
            if i < len(parts) - 1:
                node = node[p]
        node[parts[-1]] = value
    return from_dict(data)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def config_hash(cfg: RunConfig) -> str:
    return _digest(to_dict(cfg))


def architecture(cfg: RunConfig) -> dict:
    """The subset of the config that fixes parameter shapes and semantics."""
    d = to_dict(cfg)
    return {"au_ids": d["data"]["au_ids"], "vocab": d["data"]["vocab"], "model": d["model"],
            "text": d["text"], "graph": d["graph"]}


def model_hash(cfg: RunConfig) -> str:
    return _digest(architecture(cfg))


def diff_configs(a: dict, b: dict) -> list[str]:
    fa, fb = flatten(a), flatten(b)
    lines = []
    for k in sorted(set(fa) | set(fb)):
        if fa.get(k, "<missing>") != fb.get(k, "<missing>"):
            lines.append(f"{k}: {fa.get(k, '<missing>')!r} != {fb.get(k, '<missing>')!r}")
    return lines


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
