"""Experiment configuration: model/train/sample dataclasses, presets, and the
flat dotted-key JSON document they serialize to.

A config document looks like::

    {
      "preset": "B/16",
      "model.n_reg": 32,
      "model.dual.mode": "compact_dual",
      "model.dual.dualize": ["adaln", "mlp", "rmsnorm"],
      "train.lr": 0.0001
    }

``preset`` is optional and seeds every ``model.*`` field before the remaining
keys are applied. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Literal

CondMode = Literal["none", "registers", "in_context"]
DualMode = Literal["single", "full_dual", "compact_dual"]
DUAL_COMPONENTS = ("adaln", "mlp", "attention", "rmsnorm")
TIME_DISTS = ("uniform", "logit_normal")


class ConfigError(ValueError):
    """Raised for unparsable documents or configs violating an invariant."""


@dataclass(frozen=True)
class DualConfig:
    mode: DualMode = "single"
    dualize: frozenset[str] = frozenset()
    # Full-dual adaLN copies live in every block, not only aux-bearing ones.
    adaln_full_dual_all_layers: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dualize", frozenset(self.dualize))

    def has(self, component: str) -> bool:
        return self.mode != "single" and component in self.dualize


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 8
    width: int = 64
    heads: int = 4
    mlp_hidden: int = 171
    patch: int = 4
    image: int = 32
    channels: int = 3
    num_classes: int = 4
    cond_mode: CondMode = "none"
    n_reg: int = 0
    reg_start: int = 0
    reg_end: int = 0
    dual: DualConfig = field(default_factory=DualConfig)
    lora_rank: int = 128
    freq_dim: int = 256
    norm_eps: float = 1e-6

    @property
    def grid(self) -> int:
        return self.image // self.patch

    @property
    def n_patch(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def has_aux(self) -> bool:
        return self.cond_mode != "none" and self.n_reg > 0

    def aux_in_block(self, layer: int) -> bool:
        return self.has_aux and self.reg_start <= layer <= self.reg_end

    def tokens_in_block(self, layer: int) -> int:
        return self.n_patch + (self.n_reg if self.aux_in_block(layer) else 0)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 2000
    lr: float = 1e-4
    warmup: int = 500
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    label_dropout: float = 0.1
    seed: int = 0
    time_dist: str = "logit_normal"
    time_mu: float = 0.0
    time_sigma: float = 1.0
    per_class: int = 64
    log_every: int = 50
    ckpt_every: int = 500


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 50
    guidance: float = 1.0
    seed: int = 0


# Standard ViT widths; SwiGLU inner size round(8/3 * width) keeps per-block
# MLP mass equal to a 4x GELU MLP.
_SIZES = {
    "B": dict(depth=12, width=768, heads=12, mlp_hidden=2048),
    "L": dict(depth=24, width=1024, heads=16, mlp_hidden=2730),
    "H": dict(depth=32, width=1280, heads=16, mlp_hidden=3413),
}
PRESET_NAMES = ("B/16", "L/16", "H/16", "B/32", "L/32", "toy")


def preset(name: str) -> ModelConfig:
    """Return a named architecture preset.

    The ImageNet presets are in-context models (32 duplicated class tokens
    starting a third of the way into the network), matching the baselines of
    the dual-stream tables. ``toy`` is a desk-scale model without aux tokens.
    """
    if name == "toy":
        return ModelConfig(depth=8, width=64, heads=4, mlp_hidden=171, image=32, patch=4,
                           num_classes=4)
    try:
        size, patch = name.split("/")
        dims = _SIZES[size]
        patch = int(patch)
    except (ValueError, KeyError):
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}") from None
    if patch not in (16, 32):
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
    depth = dims["depth"]
    return ModelConfig(
        **dims,
        patch=patch,
        image=256 if patch == 16 else 512,
        channels=3,
        num_classes=1000,
        cond_mode="in_context",
        n_reg=32,
        reg_start=depth // 3,
        reg_end=depth - 1,
    )


def validate(model: ModelConfig, train: TrainConfig | None = None,
             sample: SampleConfig | None = None) -> None:
    """Raise ConfigError naming the first violated invariant."""

    def fail(msg):
        raise ConfigError(msg)

    for name in ("depth", "width", "heads", "mlp_hidden", "patch", "image", "channels", "lora_rank",
                 "freq_dim"):
        if getattr(model, name) <= 0:
            fail(f"model.{name} must be > 0")
    if model.image % model.patch:
        fail("model.image must be divisible by model.patch")
    if model.width % model.heads:
        fail("model.heads must divide model.width")
    if model.freq_dim % 2:
        fail("model.freq_dim must be even")
    if model.norm_eps <= 0:
        fail("model.norm_eps must be > 0")
    if model.num_classes < 0:
        fail("model.num_classes must be >= 0")
    if model.cond_mode not in ("none", "registers", "in_context"):
        fail(f"model.cond_mode {model.cond_mode!r} not in none|registers|in_context")
    if model.cond_mode == "in_context" and model.num_classes <= 0:
        fail("model.cond_mode in_context requires model.num_classes > 0")
    if model.n_reg < 0:
        fail("model.n_reg must be >= 0")
    if model.n_reg > 0 and not (0 <= model.reg_start <= model.reg_end < model.depth):
        fail("0 <= model.reg_start <= model.reg_end < model.depth violated")
    if model.n_reg > 0 and model.cond_mode == "none":
        fail("model.n_reg > 0 requires model.cond_mode registers or in_context")

    dual = model.dual
    if dual.mode not in ("single", "full_dual", "compact_dual"):
        fail(f"model.dual.mode {dual.mode!r} not in single|full_dual|compact_dual")
    unknown = set(dual.dualize) - set(DUAL_COMPONENTS)
    if unknown:
        fail(f"model.dual.dualize has unknown components {sorted(unknown)}")
    if dual.mode == "single" and dual.dualize:
        fail("model.dual.mode single requires an empty model.dual.dualize")
    if dual.mode != "single" and not model.has_aux:
        fail("dual-stream modes need auxiliary tokens (cond_mode != none, n_reg > 0)")

    if train is not None:
        for name in ("batch_size", "steps", "lr", "per_class", "log_every", "ckpt_every",
                     "time_sigma"):
            if getattr(train, name) <= 0:
                fail(f"train.{name} must be > 0")
        if train.warmup < 0:
            fail("train.warmup must be >= 0")
        if train.weight_decay < 0:
            fail("train.weight_decay must be >= 0")
        if train.seed < 0:
            fail("train.seed must be >= 0")
        if not 0 < train.ema_decay < 1:
            fail("train.ema_decay must lie in (0, 1)")
        if not 0 <= train.label_dropout < 1:
            fail("train.label_dropout must lie in [0, 1)")
        if train.time_dist not in TIME_DISTS:
            fail(f"train.time_dist {train.time_dist!r} not in {TIME_DISTS}")
    if sample is not None:
        if sample.steps <= 0:
            fail("sample.steps must be > 0")
        if sample.guidance < 0:
            fail("sample.guidance must be >= 0")
        if sample.seed < 0:
            fail("sample.seed must be >= 0")


# --- flat dotted-key serialization -------------------------------------------------

def _flatten(prefix: str, obj) -> dict[str, Any]:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}.{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(_flatten(key, value))
        elif isinstance(value, frozenset):
            out[key] = [c for c in DUAL_COMPONENTS if c in value]
        else:
            out[key] = value
    return out


def to_flat(model: ModelConfig, train: TrainConfig | None = None,
            sample: SampleConfig | None = None) -> dict[str, Any]:
    out = _flatten("model", model)
    if train is not None:
        out.update(_flatten("train", train))
    if sample is not None:
        out.update(_flatten("sample", sample))
    return out


def serialize(model: ModelConfig, train: TrainConfig | None = None,
              sample: SampleConfig | None = None) -> str:
    return json.dumps(to_flat(model, train, sample), indent=2) + "\n"


def config_hash(model: ModelConfig, train: TrainConfig | None = None,
                sample: SampleConfig | None = None) -> str:
    blob = json.dumps(to_flat(model, train, sample), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(key: str, current, value):
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(current, frozenset):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return frozenset(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _apply(obj, path: list[str], value, key: str):
    name = path[0]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, name)
    if len(path) > 1:
        return replace(obj, **{name: _apply(current, path[1:], value, key)})
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"config key {key!r} names a group, not a field")
    return replace(obj, **{name: _coerce(key, current, value)})


def from_flat(doc: dict[str, Any]) -> tuple[ModelConfig, TrainConfig, SampleConfig]:
    """Build and validate configs from a flat dotted-key mapping."""
    doc = dict(doc)
    model = preset(doc.pop("preset")) if "preset" in doc else ModelConfig()
    groups = {"model": model, "train": TrainConfig(), "sample": SampleConfig()}
    for key, value in doc.items():
        head, *rest = key.split(".")
        if head not in groups or not rest:
            raise ConfigError(f"unknown config key {key!r}")
        groups[head] = _apply(groups[head], rest, value, key)
    validate(groups["model"], groups["train"], groups["sample"])
    return groups["model"], groups["train"], groups["sample"]


def apply_overrides(doc: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``key=value`` strings; values parse as JSON when possible."""
    doc = dict(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc[key.strip()] = value
    return doc


PRESET_DIR = Path(__file__).parent / "presets"


def resolve_config_path(path: str | Path) -> Path:
    """Find a config file; bare preset names resolve to the bundled presets."""
    p = Path(path)
    for candidate in (p, p.with_suffix(".json")):
        if candidate.is_file():
            return candidate
    for candidate in (PRESET_DIR / p.name, PRESET_DIR / (p.name + ".json")):
        if candidate.is_file():
            return candidate
    raise ConfigError(f"config file {str(path)!r} not found")


def read_document(path: str | Path) -> dict[str, Any]:
    p = resolve_config_path(path)
    text = p.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object of dotted keys")
    return doc


def load_config(path: str | Path, overrides: list[str] | None = None
                ) -> tuple[ModelConfig, TrainConfig, SampleConfig]:
    doc = apply_overrides(read_document(path), overrides or [])
    return from_flat(doc)
