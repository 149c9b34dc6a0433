"""Experiment configuration: YAML file plus ``key=value`` overrides.

The resolved configuration is a nested dict with sections ``schedule``,
``bias``, ``world``, ``distill`` and ``bench`` and two top-level keys,
``seed`` and ``output_dir``.  Unknown keys are rejected with the line they
came from.  The config hash is a digest of the canonical JSON form of
everything except ``output_dir``, so it identifies what was computed rather
than where it was written.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields

import numpy as np
import yaml

from .distill import AdaptiveMoment, DistillConfig, PlainSGD
from .oracle import BiasConfig
from .scene import WorldConfig
from .schedule import TimestepAnnealer


class ConfigError(ValueError):
    """Bad config file or override; carries the offending key."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where = f"{key}"
            if line is not None:
                where += f" (line {line})"
            where += ": "
        super().__init__(where + message)
        self.key = key
        self.line = line


def _dataclass_defaults(cls, skip=()):
    out = {}
    for f in fields(cls):
        if f.name in skip or f.name.startswith("_"):
            continue
        v = getattr(cls(), f.name)
        out[f.name] = v.value if hasattr(v, "value") else v
    return out


DEFAULTS = {
    "seed": 0,
    "output_dir": "results",
    "schedule": {"t_max": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "bias": _dataclass_defaults(BiasConfig),
    "world": _dataclass_defaults(WorldConfig),
    "distill": {
        **_dataclass_defaults(DistillConfig, skip=("optimizer", "annealer", "seed")),
        "optimizer": "adam",
        "adam_beta1": 0.9,
        "adam_beta2": 0.95,
        "adam_eps": 1e-8,
        "t_hi_start": 0.98,
        "t_hi_end": 0.5,
        "t_lo_start": 0.02,
        "t_lo_end": 0.02,
        "anneal_steps": None,
    },
    "bench": {
        "n_seeds": 10,
        "T_levels": [50, 100, 200, 300],
        "predictors": ["exact", "train_matched", "inference_zero"],
        "eta": 0.0,
        "gap_n": 100_000,
        "gap_dim": 48,
        "lambdas": [0.0, 0.5, 1.0],
        "alpha_step": 2.5,
        "engines": ["sds", "usd", "dds", "csd", "vsd_lite", "noop",
                    "sds@off", "usd@off", "usd+rv0.1"],
        "variance_n": 10_000,
        "variance_t_frac": 0.6,
        "sampler_seeds": 50,
        "sampler_steps": 50,
        "sampler_pose_offset": float(np.pi / 16),
        "sampler_world_seed": 0,
        "figures": True,
    },
}

# keys whose default is None but which accept integers
_OPTIONAL_INT = {("distill", "anneal_steps")}


def _line_map(text: str) -> dict:
    """Map dotted keys to 1-based line numbers using the YAML node tree."""
    lines = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix):
        if not isinstance(node, yaml.MappingNode):
            return
        for k, v in node.value:
            key = f"{prefix}{k.value}"
            lines[key] = k.start_mark.line + 1
            walk(v, key + ".")

    walk(root, "")
    return lines


def _coerce(key: str, value, default, optional_int: bool):
    if value is None:
        if default is None:
            return None
        raise ConfigError("value may not be empty", key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key)
        return value
    if isinstance(default, int) or optional_int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) \
                or int(value) != value:
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return int(value)
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms such as 1e-3 as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"expected a number, got {value!r}", key) from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            # allow vector-valued offsets
            if isinstance(value, list) and all(isinstance(x, (int, float)) for x in value):
                return [float(x) for x in value]
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", key)
        return value
    return value


def _merge(cfg: dict, data: dict, lines: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", prefix.rstrip(".") or "<root>")
    for k, v in data.items():
        key = f"{prefix}{k}"
        if k not in cfg:
            raise ConfigError("unknown key", key, lines.get(key))
        default = cfg[k]
        if isinstance(default, dict):
            _merge(default, v, lines, key + ".")
        else:
            section = prefix.rstrip(".")
            try:
                cfg[k] = _coerce(key, v, DEFAULTS_FLAT.get(key, default),
                                 (section, k) in _OPTIONAL_INT)
            except ConfigError as e:
                raise ConfigError(str(e).split(": ", 1)[-1], key, lines.get(key)) from None


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


DEFAULTS_FLAT = _flatten(DEFAULTS)


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value {raw!r}: {e}", key) from None
    return key, value


def load_config(path=None, overrides=(), text: str | None = None) -> dict:
    """Resolve defaults, then the YAML file (or ``text``), then overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None and text is None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from None
    if text:
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            line = mark.line + 1 if mark is not None else None
            raise ConfigError(f"YAML parse error: {getattr(e, 'problem', e)}",
                              "<file>", line) from None
        if data is not None:
            _merge(cfg, data, _line_map(text))
    for item in overrides:
        key, value = parse_override(item)
        parts = key.split(".")
        nested = value
        for p in reversed(parts):
            nested = {p: nested}
        _merge(cfg, nested, {})
    validate(cfg)
    return cfg


def validate(cfg: dict):
    """Build every typed object once so bad values fail before any work."""
    try:
        bias_config(cfg)
        world_config(cfg)
        distill_config(cfg)
        sched_args(cfg)
        from .schedule import make_linear_schedule
        make_linear_schedule(*sched_args(cfg))
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    b = cfg["bench"]
    if b["n_seeds"] < 1 or b["sampler_seeds"] < 1:
        raise ConfigError("seed counts must be >= 1", "bench.n_seeds")
    for T in b["T_levels"]:
        if not isinstance(T, int) or not 1 <= T <= cfg["schedule"]["t_max"]:
            raise ConfigError(f"noise level {T!r} outside [1, t_max]", "bench.T_levels")


def config_hash(cfg: dict) -> str:
    payload = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# typed views

def sched_args(cfg: dict) -> tuple:
    s = cfg["schedule"]
    return (s["t_max"], s["beta_start"], s["beta_end"])


def bias_config(cfg: dict) -> BiasConfig:
    b = cfg["bias"]
    as_t = lambda v: tuple(v) if isinstance(v, list) else v  # noqa: E731
    return BiasConfig(gamma=b["gamma"], mean_offset=as_t(b["mean_offset"]),
                      var_scale=b["var_scale"],
                      offset_trainmatched=as_t(b["offset_trainmatched"]),
                      offset_zero=as_t(b["offset_zero"]), mode=b["mode"])


def world_config(cfg: dict) -> WorldConfig:
    return WorldConfig(**cfg["world"])


def distill_config(cfg: dict) -> DistillConfig:
    d = dict(cfg["distill"])
    opt_name = d.pop("optimizer")
    b1, b2, eps = d.pop("adam_beta1"), d.pop("adam_beta2"), d.pop("adam_eps")
    if opt_name == "adam":
        opt = AdaptiveMoment(b1, b2, eps)
    elif opt_name == "sgd":
        opt = PlainSGD()
    else:
        raise ConfigError(f"unknown optimizer {opt_name!r} (adam or sgd)",
                          "distill.optimizer")
    window = [d.pop(k) for k in ("t_hi_start", "t_hi_end", "t_lo_start", "t_lo_end")]
    anneal = d.pop("anneal_steps")
    if anneal is None:
        anneal = d["steps"] // 2
    annealer = TimestepAnnealer(*window, anneal_steps=anneal)
    return DistillConfig(optimizer=opt, annealer=annealer, seed=cfg["seed"], **d)
