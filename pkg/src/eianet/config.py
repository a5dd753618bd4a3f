"""Run configuration: every hyperparameter and ablation switch in one place."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .errors import ConfigError

DIV_SIGNS = ("negated", "literal")


@dataclass
class RunConfig:
    K: int = 10
    d: int = 64
    image_size: int = 32
    widths: Tuple[int, ...] = (16, 32, 64)
    use_attention: bool = True
    use_etf: bool = True
    M: int = 4
    alpha: Optional[float] = None  # None means 0.1 * M
    logit_scale: float = 16.0
    label_smoothing: float = 0.1
    lr_source: float = 0.01
    lr_adapt: float = 0.001
    epochs_source: int = 50
    epochs_adapt: int = 20
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    div_sign: str = "negated"
    source_test_fraction: float = 0.2

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        if self.alpha is None:
            self.alpha = 0.1 * self.M
        self.alpha = float(self.alpha)
        self.validate()

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if self.d < self.K:
            raise ConfigError(f"feature dimension d={self.d} must be >= K={self.K}")
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        for name in ("lr_source", "lr_adapt", "logit_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must lie in [0, 1) and weight_decay must be >= 0")
        if self.epochs_source < 0 or self.epochs_adapt < 0 or self.batch_size < 1:
            raise ConfigError("epoch counts must be >= 0 and batch_size >= 1")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError(f"widths must be a non-empty list of positive ints, got {self.widths}")
        pools = len(self.widths) - 1
        if self.image_size % (2**pools):
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by 2**{pools} (one pool per extra block)"
            )
        if self.div_sign not in DIV_SIGNS:
            raise ConfigError(f"div_sign must be one of {DIV_SIGNS}, got {self.div_sign!r}")
        if not 0 < self.source_test_fraction < 1:
            raise ConfigError("source_test_fraction must lie in (0, 1)")

    @property
    def feature_map_size(self) -> int:
        return self.image_size // 2 ** (len(self.widths) - 1)

    def replace(self, **changes) -> "RunConfig":
        if "M" in changes and "alpha" not in changes:
            changes["alpha"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out["widths"] = list(self.widths)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)
