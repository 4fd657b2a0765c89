"""Experiment configuration: conditions, scales, presets, and a small
JSON-with-includes config file format.

Conditions:
  baseline                 no pre-training; continuous code; decoder trained
                           from scratch on the supervised data
  envlearn                 pre-trained decoder, continuous code
  envlearn+discrete        pre-trained decoder, discrete code
  envlearn+discrete+match  discrete code plus the encoder-matching loss
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

from .models import BlockArch, LangArch, ReprSpec, StringArch
from .training import EnvLearnConfig, LangLearnConfig


class ConfigError(Exception):
    pass


CONDITIONS = ("baseline", "envlearn", "envlearn+discrete",
              "envlearn+discrete+match")
TASKS = ("blocks", "strings")
SCALES = ("desk", "paper")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "blocks"
    condition: str = "envlearn+discrete+match"
    scale: str = "desk"
    repr_spec: ReprSpec = ReprSpec.discrete(10, 10)
    env_learn: EnvLearnConfig = EnvLearnConfig()
    lang_learn: LangLearnConfig = LangLearnConfig()
    block_arch: BlockArch = BlockArch(conv_dim=64, ff_dim=200, dropout=0.1,
                                      pooling="max", enc_conv_dim=200)
    string_arch: StringArch = StringArch(char_embed_dim=16, hidden_dim=96,
                                         ff_dim=96)
    lang_arch: LangArch = LangArch(word_embed_dim=32, hidden_dim=64)
    seeds: tuple = (0, 1, 2)
    data_seed: int = 0       # evaluation data is shared across model seeds
    # blocks online protocol
    num_sessions: int = 20
    session_length: int = 40
    # strings sweep protocol
    sweep_sizes: tuple = (10, 20, 50, 100, 200, 500, 1000)
    # paths
    data_dir: str = "runs/data"
    checkpoint_dir: str = "runs/checkpoints"
    results_dir: str = "runs/results"
    # analysis
    consistency_samples: int = 1000

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task: expected one of {TASKS}, got {self.task!r}")
        if self.condition not in CONDITIONS:
            raise ConfigError(
                f"condition: expected one of {CONDITIONS}, got {self.condition!r}")
        if self.scale not in SCALES:
            raise ConfigError(f"scale: expected one of {SCALES}, got {self.scale!r}")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        if self.condition.endswith("+match"):
            if self.lang_learn.lam <= 0:
                raise ConfigError(
                    "lang_learn.lam: encoder matching condition requires lam > 0")
            if self.repr_spec.mode != "discrete":
                raise ConfigError(
                    "repr_spec.mode: encoder matching condition requires a "
                    "discrete code (continuous-l2 matching is exposed via "
                    "lam > 0 with condition 'envlearn')")
        elif self.lang_learn.lam > 0 and self.condition in (
                "baseline", "envlearn+discrete"):
            raise ConfigError(
                f"lang_learn.lam: condition {self.condition!r} forbids the "
                "matching term (lam must be 0)")
        if self.condition == "baseline" and self.uses_pretraining:
            raise ConfigError("internal: baseline cannot use pre-training")
        if "discrete" in self.condition and self.repr_spec.mode != "discrete":
            raise ConfigError(
                f"repr_spec.mode: condition {self.condition!r} requires a "
                "discrete code")
        if self.condition in ("baseline", "envlearn") \
                and self.repr_spec.mode != "continuous":
            raise ConfigError(
                f"repr_spec.mode: condition {self.condition!r} requires a "
                "continuous code")
        return self

    @property
    def uses_pretraining(self):
        return self.condition != "baseline"

    @property
    def decoder_frozen(self):
        # blocks language learning fixes the decoder; strings fine-tunes it.
        # The baseline has no pre-training and always trains its decoder.
        if self.condition == "baseline":
            return False
        return self.task == "blocks"

    def run_id(self, seed):
        return f"{self.task}-{self.scale}-{self.condition}-s{seed}"

    def checkpoint_path(self, seed=None):
        name = f"{self.task}-{self.scale}-{self.repr_spec.mode}" \
            f"-{self.repr_spec.flat_dim}"
        if seed is not None:
            name += f"-s{seed}"
        return os.path.join(self.checkpoint_dir, name + ".agck")

    def to_dict(self):
        d = asdict(self)
        d["repr_spec"] = self.repr_spec.to_dict()
        return d


def _from_dict(d):
    d = dict(d)
    nested = {
        "repr_spec": lambda v: ReprSpec.from_dict(v),
        "env_learn": lambda v: EnvLearnConfig(**v),
        "lang_learn": lambda v: LangLearnConfig(**v),
        "block_arch": lambda v: BlockArch(**v),
        "string_arch": lambda v: StringArch(**v),
        "lang_arch": lambda v: LangArch(**v),
    }
    for key, build in nested.items():
        if key in d and isinstance(d[key], dict):
            try:
                d[key] = build(d[key])
            except TypeError as e:
                raise ConfigError(f"{key}: {e}") from e
    for key in ("seeds", "sweep_sizes"):
        if key in d and isinstance(d[key], list):
            d[key] = tuple(d[key])
    try:
        return ExperimentConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _deep_merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path, overrides=None):
    """JSON config with optional single inheritance.

    Keys: either "preset": <name> or "include": <relative path> supplies the
    base; remaining keys override it field-by-field (nested dicts merge).
    `overrides` (a dict) is applied last; used for CLI flags and
    ACTGROUND_* environment variables.
    """
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return _resolve(raw, os.path.dirname(path), overrides)


def _resolve(raw, base_dir, overrides=None):
    base = {}
    if "preset" in raw:
        name = raw.pop("preset")
        if name not in PRESETS:
            raise ConfigError(
                f"preset: unknown {name!r}, have {sorted(PRESETS)}")
        base = PRESETS[name]().to_dict()
    elif "include" in raw:
        inc = os.path.join(base_dir, raw.pop("include"))
        with open(inc, encoding="utf-8") as f:
            base = _resolve(json.load(f), os.path.dirname(inc)).to_dict()
    merged = _deep_merge(base, raw)
    if overrides:
        merged = _deep_merge(merged, overrides)
    return _from_dict(merged).validate()


def env_overrides(environ=None):
    """ACTGROUND_<FIELD>=value overrides for top-level scalar fields."""
    environ = os.environ if environ is None else environ
    out = {}
    for key, value in environ.items():
        if not key.startswith("ACTGROUND_"):
            continue
        name = key[len("ACTGROUND_"):].lower()
        if name not in ExperimentConfig.__dataclass_fields__:
            raise ConfigError(f"{key}: no such config field")
        current = getattr(ExperimentConfig(), name)
        if isinstance(current, bool):
            out[name] = value.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            out[name] = int(value)
        elif isinstance(current, tuple):
            out[name] = tuple(int(x) for x in value.split(","))
        else:
            out[name] = value
    return out


# ---------------------------------------------------------------------------
# presets


def _blocks_desk(condition="envlearn+discrete+match"):
    cont = condition in ("baseline", "envlearn")
    return ExperimentConfig(
        task="blocks",
        condition=condition,
        scale="desk",
        repr_spec=ReprSpec.continuous(100) if cont else ReprSpec.discrete(10, 10),
        env_learn=EnvLearnConfig(total_batches=20_000),
        lang_learn=LangLearnConfig(
            lam=0.01 if condition.endswith("+match") else 0.0,
            decoder_frozen=condition != "baseline"),
    )


def _blocks_paper(condition="envlearn+discrete+match"):
    cont = condition in ("baseline", "envlearn")
    return replace(
        _blocks_desk(condition),
        scale="paper",
        repr_spec=ReprSpec.continuous(600) if cont else ReprSpec.discrete(20, 30),
        env_learn=EnvLearnConfig(total_batches=500_000),
        block_arch=BlockArch(pooling="max"),
        lang_arch=LangArch(),
        consistency_samples=10_000,
    )


def _strings_desk(condition="envlearn+discrete+match"):
    cont = condition in ("baseline", "envlearn")
    return ExperimentConfig(
        task="strings",
        condition=condition,
        scale="desk",
        repr_spec=ReprSpec.continuous(100) if cont else ReprSpec.discrete(10, 10),
        env_learn=EnvLearnConfig(total_batches=20_000, lr=0.002),
        lang_learn=LangLearnConfig(
            lam=0.01 if condition.endswith("+match") else 0.0,
            decoder_frozen=False),
        string_arch=StringArch(char_embed_dim=32, hidden_dim=256, ff_dim=256,
                               feed_context=True),
        sweep_sizes=(10, 50, 1000),
    )


def _strings_paper(condition="envlearn+discrete+match"):
    cont = condition in ("baseline", "envlearn")
    return replace(
        _strings_desk(condition),
        scale="paper",
        repr_spec=ReprSpec.continuous(20) if cont else ReprSpec.discrete(20, 30),
        env_learn=EnvLearnConfig(total_batches=500_000),
        string_arch=StringArch(),
        lang_arch=LangArch(),
        sweep_sizes=(10, 20, 50, 100, 200, 500, 1000),
    )


PRESETS = {
    "blocks-desk": _blocks_desk,
    "blocks-paper": _blocks_paper,
    "strings-desk": _strings_desk,
    "strings-paper": _strings_paper,
}


def preset(name, condition=None):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, have {sorted(PRESETS)}")
    if condition is None:
        return PRESETS[name]().validate()
    return PRESETS[name](condition).validate()
