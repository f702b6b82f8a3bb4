"""Model configuration: the knobs, a flat text format, and a fingerprint.

The on-disk grammar is one ``key = value`` pair per line.  Blank lines and
``#`` comments are ignored; keys may appear at most once.  Value syntax:

    input_size              HxW, e.g. ``224x224``
    width_multiplier        real in (0, 1]
    middle_branches         comma-separated block counts, e.g. ``1,2,3``
    cbam_enabled            ``true`` / ``false``
    self_attention_enabled  ``true`` / ``false``
    middle_flow_kind        ``fused`` / ``original_xception``
    num_classes             positive int
    attention_d_k           int or ``auto``
    attention_d_v           int or ``auto``
    attention_f_out         int or ``auto``
    cbam_reduction          positive int
    cbam_kernel             odd positive int
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    """Raised for malformed config text or inconsistent settings."""


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (224, 224)
    width_multiplier: float = 1.0
    middle_branches: tuple[int, ...] = (1, 2, 3)
    cbam_enabled: bool = True
    self_attention_enabled: bool = True
    middle_flow_kind: str = "fused"
    num_classes: int = 2
    attention_d_k: int | None = None   # None = derived from the attention input width
    attention_d_v: int | None = None
    attention_f_out: int | None = None  # None = the scaled top width
    cbam_reduction: int = 16
    cbam_kernel: int = 7

    def validate(self) -> "ModelConfig":
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ConfigError(f"input_size must be positive, got {self.input_size}")
        if not (0.0 < self.width_multiplier <= 1.0):
            raise ConfigError(f"width_multiplier must lie in (0, 1], got {self.width_multiplier}")
        if self.middle_flow_kind not in ("fused", "original_xception"):
            raise ConfigError(f"middle_flow_kind must be 'fused' or 'original_xception', "
                              f"got {self.middle_flow_kind!r}")
        if self.middle_flow_kind == "fused":
            if len(self.middle_branches) == 0:
                raise ConfigError("fused middle flow needs a non-empty branch list")
            if any(n < 1 for n in self.middle_branches):
                raise ConfigError(f"branch lengths must be >= 1, got {self.middle_branches}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if self.cbam_reduction < 1:
            raise ConfigError(f"cbam_reduction must be >= 1, got {self.cbam_reduction}")
        if self.cbam_kernel < 1 or self.cbam_kernel % 2 == 0:
            raise ConfigError(f"cbam_kernel must be odd and positive, got {self.cbam_kernel}")
        for name in ("attention_d_k", "attention_d_v", "attention_f_out"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1 or auto, got {v}")
        return self

    def scale_width(self, channels: int) -> int:
        """Nearest integer to ``channels * width_multiplier``, at least 1."""
        return max(1, int(math.floor(channels * self.width_multiplier + 0.5)))


_BOOL_WORDS = {"true": True, "false": False}


def _parse_value(key: str, raw: str):
    try:
        if key == "input_size":
            h, w = raw.lower().split("x")
            return (int(h), int(w))
        if key == "width_multiplier":
            return float(raw)
        if key == "middle_branches":
            return tuple(int(p) for p in raw.split(",") if p.strip() != "")
        if key in ("cbam_enabled", "self_attention_enabled"):
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError
            return _BOOL_WORDS[raw.lower()]
        if key == "middle_flow_kind":
            return raw
        if key in ("attention_d_k", "attention_d_v", "attention_f_out"):
            return None if raw.lower() == "auto" else int(raw)
        # remaining keys are plain ints
        return int(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_model_config(text: str) -> ModelConfig:
    """Parse the flat key=value grammar into a validated ModelConfig."""
    known = {f.name for f in fields(ModelConfig)}
    seen: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen[key] = _parse_value(key, raw)
    return ModelConfig(**seen).validate()


def config_to_text(cfg: ModelConfig) -> str:
    """Canonical serialisation; parse(config_to_text(cfg)) == cfg."""
    def fmt(name, value):
        if name == "input_size":
            return f"{value[0]}x{value[1]}"
        if name == "middle_branches":
            return ",".join(str(v) for v in value)
        if isinstance(value, bool):
            return "true" if value else "false"
        if value is None:
            return "auto"
        if isinstance(value, float):
            return repr(value)
        return str(value)

    lines = [f"{f.name} = {fmt(f.name, getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def config_fingerprint(cfg: ModelConfig) -> bytes:
    """32-byte digest of the canonical config text, stored in weight files."""
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).digest()


def load_model_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model_config(fh.read())
