"""Training hyperparameters."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import ConfigError


@dataclass(frozen=True)
class DecaConfig:
    """Hyperparameters shared by every trainer.

    ``c1`` and ``c2`` are the additive penalties that stand in for ``-log 0``.
    Binary mode: ``c1`` replaces ``-log(1 - h')`` in the DP step and ``c2``
    replaces ``-log h`` in the DN step (the constants some write as C_0/C_1).
    Multi-class mode: ``c1``/``c2`` are the shared C_{k1}/C_{k2}; per-class pairs
    in ``c_per_class`` override them.
    """

    alpha: float = 0.5
    c1: float = 10.0
    c2: float = 10.0
    c_per_class: tuple[tuple[float, float], ...] | None = None
    lr: float = 0.001
    epochs: int = 50
    epochs_phase1: int | None = None
    reg: float = 0.0
    batch_size: int = 2048
    seed: int = 0
    seed2: int | None = None
    eps: float = 1e-7
    patience: int = 10
    val_k: int = 20
    sampler: str = "uniform"
    tce_drop_max: float = 0.2
    tce_warmup: int = 10
    itlm_keep: float = 0.8
    itlm_rounds: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigError("C constants must be positive")
        if self.c_per_class is not None:
            object.__setattr__(self, "c_per_class",
                               tuple((float(a), float(b)) for a, b in self.c_per_class))
            if any(a <= 0 or b <= 0 for a, b in self.c_per_class):
                raise ConfigError("C constants must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size and patience must be positive")
        if self.epochs_phase1 is not None and not 0 <= self.epochs_phase1 <= self.epochs:
            raise ConfigError("epochs_phase1 must lie in [0, epochs]")
        if self.reg < 0:
            raise ConfigError("reg must be non-negative")
        if not 0 < self.eps < 0.5:
            raise ConfigError("eps must lie in (0, 0.5)")
        if self.prior_seed == self.main_seed:
            raise ConfigError("the prior seed and the main seed must differ")
        if self.sampler not in ("uniform", "wbpr"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if not 0.0 <= self.tce_drop_max < 1.0:
            raise ConfigError("tce_drop_max must lie in [0, 1)")
        if not 0.0 < self.itlm_keep <= 1.0:
            raise ConfigError("itlm_keep must lie in (0, 1]")

    @property
    def prior_seed(self) -> int:
        return self.seed

    @property
    def main_seed(self) -> int:
        return self.seed + 1 if self.seed2 is None else self.seed2

    @property
    def phase1_epochs(self) -> int:
        return self.epochs if self.epochs_phase1 is None else self.epochs_phase1

    def constants_for(self, k: int) -> tuple[float, float]:
        if self.c_per_class is None:
            return self.c1, self.c2
        if not 0 <= k < len(self.c_per_class):
            raise ConfigError(f"no C constants for class {k}")
        return self.c_per_class[k]

    def replace(self, **changes) -> DecaConfig:
        return DecaConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["c_per_class"] is not None:
            d["c_per_class"] = [list(p) for p in d["c_per_class"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DecaConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown DecaConfig fields: {sorted(unknown)}")
        return cls(**d)
