"""Per-batch IR ratio policies: fixed, curriculum and variable."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("fixed", "curriculum", "variable")


@dataclass
class RhoPolicy:
    """Stateful sampler returning the IR patch fraction for each batch.

    The generator is consumed only by uniform draws, so a curriculum policy
    past its warmup replays exactly the sequence of a variable policy with
    the same seed.
    """

    kind: str = "variable"
    fixed_value: float = 0.5
    warmup_epochs: int = 0
    warmup_value: float = 0.25
    rng_seed: int = 0
    epoch: int = 0
    step: int = 0
    _rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown rho policy kind {self.kind!r}; expected one of {KINDS}")
        for name in ("fixed_value", "warmup_value"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        self._rng = np.random.default_rng(self.rng_seed)

    @classmethod
    def fixed(cls, value: float, rng_seed: int = 0) -> "RhoPolicy":
        return cls(kind="fixed", fixed_value=value, rng_seed=rng_seed)

    @classmethod
    def curriculum(cls, warmup_value: float, warmup_epochs: int, rng_seed: int = 0) -> "RhoPolicy":
        return cls(kind="curriculum", warmup_value=warmup_value, warmup_epochs=warmup_epochs,
                   rng_seed=rng_seed)

    @classmethod
    def variable(cls, rng_seed: int = 0) -> "RhoPolicy":
        return cls(kind="variable", rng_seed=rng_seed)

    @classmethod
    def from_dict(cls, spec: dict, rng_seed: int = 0) -> "RhoPolicy":
        spec = dict(spec)
        spec.setdefault("rng_seed", rng_seed)
        return cls(**spec)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "fixed":
            out["fixed_value"] = self.fixed_value
        elif self.kind == "curriculum":
            out["warmup_value"] = self.warmup_value
            out["warmup_epochs"] = self.warmup_epochs
        return out

    def label(self) -> str:
        if self.kind == "fixed":
            return f"fixed[{self.fixed_value:g}]"
        if self.kind == "curriculum":
            return f"curriculum[{self.warmup_value:g}/{self.warmup_epochs}ep]"
        return "variable"

    def next_rho(self) -> float:
        self.step += 1
        if self.kind == "fixed":
            return float(self.fixed_value)
        if self.kind == "curriculum" and self.epoch < self.warmup_epochs:
            return float(self.warmup_value)
        return float(self._rng.random())

    def advance_epoch(self) -> "RhoPolicy":
        self.epoch += 1
        return self


def next_rho(policy: RhoPolicy) -> float:
    return policy.next_rho()


def advance_epoch(policy: RhoPolicy) -> RhoPolicy:
    return policy.advance_epoch()
