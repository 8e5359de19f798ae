"""Flat key = value config files mirroring the model and training fields.

Lines are `key = value`; blank lines and #-comments are ignored. Keys are
matched against the selected family's model config, the training config, and
the corpus generation knobs; anything else is an error.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .models import FAMILIES, default_config
from .training import TrainConfig

CORPUS_KEYS = {
    "feature_dim": int,
    "adult_train_size": int,
    "adult_valid_size": int,
    "adult_test_size": int,
    "child_train_size": int,
    "child_valid_size": int,
    "child_test_words_size": int,
    "child_test_sentences_size": int,
}


class ConfigError(ValueError):
    pass


def parse_kv_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path} line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path} line {lineno}: empty key")
            values[key] = value
    return values


def write_kv_file(path, values: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in values.items():
            fh.write(f"{key} = {value}\n")


def coerce(key, text, typ):
    try:
        if typ is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot read {text!r} as {typ.__name__}")


def _field_types(dc_cls):
    return {f.name: f.type for f in dataclasses.fields(dc_cls)}


_PY_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def split_config(kv: dict, family: str):
    """Partition a parsed file into (model config, train kwargs, corpus kwargs)."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown model family {family!r}")
    cfg_cls = FAMILIES[family][0]
    model_fields = _field_types(cfg_cls)
    train_fields = _field_types(TrainConfig)
    model_kw, train_kw, corpus_kw = {}, {}, {}
    for key, text in kv.items():
        if key == "family":
            continue
        if key in model_fields:
            typ = _PY_TYPES.get(model_fields[key], float)
            model_kw[key] = coerce(key, text, typ)
        elif key in train_fields:
            typ = _PY_TYPES.get(train_fields[key], float)
            train_kw[key] = coerce(key, text, typ)
        elif key in CORPUS_KEYS:
            corpus_kw[key] = coerce(key, text, CORPUS_KEYS[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    base = dataclasses.asdict(default_config(family))
    base.update(model_kw)
    return cfg_cls(**base), train_kw, corpus_kw


def default_train_kwargs(family: str, stage: str) -> dict:
    """Published training recipes per family; finetune is the TL stage."""
    if family == "rnn-ctc":
        kw = dict(lr_schedule="divide10_after_2", learning_rate=9e-5, batch_size=100)
        if stage == "finetune":
            kw.update(learning_rate=1e-4, batch_size=50)
        return kw
    if family in ("las", "las-ctc"):
        kw = dict(lr_schedule="halve_on_plateau", learning_rate=1e-4, batch_size=16,
                  l2_rate=1e-5, scheduled_sampling_rate=0.10)
        if family == "las-ctc":
            kw["lambda_ctc"] = 0.2
        return kw
    kw = dict(lr_schedule="noam", beta1=0.9, beta2=0.98, epsilon=1e-9,
              warmup_steps=4000, batch_size=16)
    if family == "transformer-ctc":
        kw["lambda_ctc"] = 0.3
    return kw


def make_train_config(family: str, stage: str, overrides: dict, seed: int) -> TrainConfig:
    kw = default_train_kwargs(family, stage)
    kw.update(overrides)
    kw["seed"] = seed
    return TrainConfig(**kw)


def load_config(path, family: str):
    kv = parse_kv_file(path) if path else {}
    file_family = kv.get("family")
    if file_family and family and file_family != family:
        raise ConfigError(f"config family {file_family!r} conflicts with --family {family!r}")
    family = family or file_family
    if not family:
        raise ConfigError("no model family given (flag --family or config key)")
    model_cfg, train_kw, corpus_kw = split_config(kv, family)
    return family, model_cfg, train_kw, corpus_kw


def describe(values: dict) -> dict:
    """Stable stringification for run.meta files."""
    return {k: (str(v).lower() if isinstance(v, bool) else str(v))
            for k, v in values.items()}
