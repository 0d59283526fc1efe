"""Mixed-precision execution policy."""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff.precision import FULL32, HALF16, check_precision


@dataclass(frozen=True)
class PrecisionPolicy:
    """Which quantities may run in half16.

    BN-statistics divergence and the pixel gradients are pinned to full32;
    constructing a policy that narrows either raises.
    """

    params: str = FULL32
    logits_and_ce: str = FULL32
    bn_divergence: str = FULL32
    pixel_grads: str = FULL32

    def __post_init__(self):
        check_precision(self.params)
        check_precision(self.logits_and_ce)
        if self.bn_divergence != FULL32 or self.pixel_grads != FULL32:
            raise ValueError("bn_divergence and pixel_grads are always full32")

    @classmethod
    def named(cls, name: str) -> "PrecisionPolicy":
        """``full32`` or ``half16`` (params and logits/CE narrowed)."""
        if name == FULL32:
            return cls()
        if name == HALF16:
            return cls(params=HALF16, logits_and_ce=HALF16)
        raise ValueError(f"unknown precision policy {name!r}")

    @property
    def name(self) -> str:
        return HALF16 if HALF16 in (self.params, self.logits_and_ce) else FULL32


FULL = PrecisionPolicy()
MIXED = PrecisionPolicy.named(HALF16)
