"""Model hyperparameters and their JSON round trip."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Tuple

from ..errors import InvalidArgumentError
from ..losses import BC_MODES


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    model_dim: int = 64
    heads: int = 4
    enc_layers_stage1: int = 3
    enc_layers_stage2: int = 1
    dec_layers: int = 2
    scd_layers: int = 2
    vocab_size: int = 20
    subsample: int = 4
    bc_mode: str = "complement"
    bc_layers: Tuple[str, ...] = ()  # empty = default sites, see below
    clamp_eps: float = 1e-3
    seed: int = 0
    baseline_sot: bool = False  # ablation: plain one-stream decoder, no SCD branch

    def __post_init__(self):
        for f in (
            "feature_dim",
            "model_dim",
            "heads",
            "enc_layers_stage1",
            "enc_layers_stage2",
            "dec_layers",
            "scd_layers",
            "vocab_size",
            "subsample",
        ):
            if int(getattr(self, f)) <= 0:
                raise InvalidArgumentError(f"{f} must be positive")
        if self.model_dim % self.heads:
            raise InvalidArgumentError("heads must divide model_dim")
        if self.bc_mode not in BC_MODES:
            raise InvalidArgumentError(f"bc_mode must be one of {BC_MODES}")
        if not (0 < self.clamp_eps < 1):
            raise InvalidArgumentError("clamp_eps must lie in (0, 1)")
        if not self.bc_layers:
            object.__setattr__(self, "bc_layers", self.default_bc_layers())
        object.__setattr__(self, "bc_layers", tuple(self.bc_layers))
        valid = self.attention_sites()
        for site in self.bc_layers:
            if site not in valid:
                raise InvalidArgumentError(f"unknown cross-attention site {site!r}")

    @property
    def effective_dec_layers(self) -> int:
        # the ablation folds the SCD budget into the decoder for parameter parity
        return self.dec_layers + self.scd_layers if self.baseline_sot else self.dec_layers

    def attention_sites(self) -> Tuple[str, ...]:
        dec = tuple(f"dec{i}" for i in range(self.effective_dec_layers))
        if self.baseline_sot:
            return dec
        return dec + tuple(f"scd{j}" for j in range(self.scd_layers))

    def default_bc_layers(self) -> Tuple[str, ...]:
        if self.baseline_sot:
            return (f"dec{self.effective_dec_layers - 1}",)
        last_dec = f"dec{self.dec_layers - 1}"
        return (last_dec,) + tuple(f"scd{j}" for j in range(self.scd_layers))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise InvalidArgumentError(f"unknown config fields: {sorted(unknown)}")
    if "bc_layers" in d:
        d = dict(d, bc_layers=tuple(d["bc_layers"]))
    return ModelConfig(**d)


def load_config(path) -> ModelConfig:
    with open(path, encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"{path}: malformed JSON: {e}") from e
    if not isinstance(d, dict):
        raise InvalidArgumentError(f"{path}: config must be a JSON object")
    return config_from_dict(d)
