from __future__ import annotations

from dataclasses import asdict, dataclass, fields

MIL_SCHEMES = ("noisy_or", "max", "mean", "gap")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_proposals: int = 40
    dim: int = 64
    heads: int = 8
    stages: int = 6
    roi_size: int = 7
    dynamic_dim: int = 16
    ffn_dim: int = 128
    backbone_channels: tuple = (16, 32)
    dropout: float = 0.1
    mil_scheme: str = "noisy_or"
    dual_heads: bool = True
    multi_view: bool = True
    image_size: tuple = (128, 128)

    def validate(self, strict: bool = True) -> "ModelConfig":
        """Check invariants. ``strict`` pins the cascade depth to six stages."""
        if self.num_proposals < 1:
            raise ConfigError("num_proposals must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if strict and self.stages != 6:
            raise ConfigError(f"the cascade has 6 stages, got {self.stages}")
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.mil_scheme not in MIL_SCHEMES:
            raise ConfigError(f"unknown MIL scheme {self.mil_scheme!r}")
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ConfigError(f"image size {self.image_size} not divisible by 8")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        kw = dict(d)
        for key in ("backbone_channels", "image_size"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)
