"""Model hyperparameters and their validation."""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture + matching hyperparameters, stored in the weight archive manifest.

    c_coarse/c_fine: channel counts of the stride-8 and stride-2 feature maps.
    n_c: number of global-local attention blocks in the coarse stage.
    n_f: self/cross attention iterations in the fine stage.
    s1: query block side (coarse cells) for flow-guided local attention.
    s2: sampled key/value grid side.
    r: sigma multiplier defining the local sampling span.
    heads: attention head count.
    theta: coarse match confidence threshold.
    window: fine refinement window side (odd).
    alpha: flow-loss weight in the total loss.
    tps_lambda: TPS regularization used at registration time.
    """

    c_coarse: int = 64
    c_fine: int = 32
    n_c: int = 4
    n_f: int = 1
    s1: int = 4
    s2: int = 8
    r: float = 3.0
    heads: int = 4
    theta: float = 0.2
    window: int = 25
    alpha: float = 0.25
    tps_lambda: float = 0.2

    def __post_init__(self):
        if self.window % 2 == 0 or self.window < 3:
            raise ConfigError(f"window must be odd and >= 3, got {self.window}")
        if not (0.0 < self.theta < 1.0):
            raise ConfigError(f"theta must lie in (0,1), got {self.theta}")
        if self.r <= 0:
            raise ConfigError(f"r must be positive, got {self.r}")
        if self.s2 < 1:
            raise ConfigError(f"s2 must be >= 1, got {self.s2}")
        if self.tps_lambda < 0:
            raise ConfigError(f"tps_lambda must be >= 0, got {self.tps_lambda}")
        if self.c_coarse % self.heads or self.c_fine % self.heads:
            raise ConfigError("heads must divide c_coarse and c_fine")
        if self.c_coarse % 2 or self.c_fine % 2:
            raise ConfigError("channel counts must be even (positional encoding)")
        if self.n_c < 0 or self.n_f < 0:
            raise ConfigError("layer counts must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_overrides(self, **kw) -> "ModelConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


# Small configuration used by gradient checks and the toy training loop.
TOY = ModelConfig(c_coarse=8, c_fine=8, n_c=2, n_f=1, s1=4, s2=4, r=3.0,
                  heads=2, theta=0.2, window=5, alpha=0.25, tps_lambda=0.2)
