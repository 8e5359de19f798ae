"""Model families and the checkpoint-facing factory."""

from __future__ import annotations

from dataclasses import asdict

from .base import AcousticModel, PaddedBatch, pad_batch
from .las import LasConfig, LasModel, dot_product_attention
from .rnn_ctc import RnnCtcConfig, RnnCtcModel
from .transformer import TransformerConfig, TransformerModel

FAMILIES = {
    "rnn-ctc": (RnnCtcConfig, RnnCtcModel, {}),
    "las": (LasConfig, LasModel, {"ctc_head": False}),
    "las-ctc": (LasConfig, LasModel, {"ctc_head": True}),
    "transformer": (TransformerConfig, TransformerModel, {"ctc_head": False}),
    "transformer-ctc": (TransformerConfig, TransformerModel, {"ctc_head": True}),
}


def default_config(family: str):
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}; pick one of {sorted(FAMILIES)}")
    cls, _, fixed = FAMILIES[family]
    return cls(**fixed)


def build_model(family: str, config=None, seed: int = 0) -> AcousticModel:
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}; pick one of {sorted(FAMILIES)}")
    cfg_cls, model_cls, fixed = FAMILIES[family]
    if config is None:
        config = cfg_cls(**fixed)
    elif isinstance(config, dict):
        config = cfg_cls(**{**config, **fixed})
    elif not isinstance(config, cfg_cls):
        raise ValueError(f"config type {type(config).__name__} does not fit family {family}")
    for key, value in fixed.items():
        if getattr(config, key) != value:
            raise ValueError(f"family {family} requires {key}={value}")
    model = model_cls(config, seed)
    model.family = family
    return model


def config_dict(model: AcousticModel) -> dict:
    return asdict(model.config)
