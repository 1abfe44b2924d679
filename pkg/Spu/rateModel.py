"""Event-rate and bandwidth budget of a twelve-module ring.

A flat detector face of side d at radius R sees d^2 / (4 pi R^2) of the isotropic photon flux.
"""

from dataclasses import dataclass
import math

import pandas as pd

from Spu.eventModel import DomainError

BQ_PER_UCI = 37_000


@dataclass(frozen=True)
class RateParams:
    detector_side_mm: float = 25.6
    ring_radius_mm: float = 55.0
    activity_bq: float = 7.4e6
    singles_per_decay: int = 2
    detection_efficiency: float = 0.80
    blocks_per_module: int = 4
    modules: int = 12
    bytes_per_event: int = 16
    max_rate_per_block_hz: float = 1e6

    def __post_init__(self):
        for name in ("ring_radius_mm", "singles_per_decay", "blocks_per_module", "modules", "bytes_per_event"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("detector_side_mm", "activity_bq", "max_rate_per_block_hz"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.detection_efficiency <= 1:
            raise DomainError(f"detection efficiency {self.detection_efficiency} outside [0, 1]")

    @classmethod
    def fromMicroCurie(cls, uci, **kwargs):
        return cls(activity_bq=uci * BQ_PER_UCI, **kwargs)


@dataclass(frozen=True)
class SystemRates:
    cr1_hz: float
    cr2_hz: float
    avg_mbps: float
    max_mbps: float


def hitProbability(p=RateParams()):
    return p.detector_side_mm**2 / (4 * math.pi * p.ring_radius_mm**2)


def systemRates(p=RateParams(), hitProb=None):
    """Ring and per-module singles rates and the per-module uplink bandwidth.

    hitProb overrides the computed hit probability (e.g. the rounded 0.0172).
    """
    hit = hitProbability(p) if hitProb is None else hitProb
    singles = p.activity_bq * p.singles_per_decay
    cr1 = singles * (hit * p.blocks_per_module * p.modules) * p.detection_efficiency
    cr2 = cr1 / p.modules
    bitsPerEvent = p.bytes_per_event * 8
    return SystemRates(
        cr1_hz=cr1,
        cr2_hz=cr2,
        avg_mbps=cr2 * bitsPerEvent / 1e6,
        max_mbps=p.max_rate_per_block_hz * p.blocks_per_module * bitsPerEvent / 1e6,
    )


def budgetTable(p=RateParams()):
    rates = systemRates(p)
    hit = hitProbability(p)
    rounded = systemRates(p, hitProb=round(hit, 4))
    rows = [
        ("Activity", f"{p.activity_bq / BQ_PER_UCI:.0f} uCi = {p.activity_bq / 1e6:.2f} MBq"),
        ("Singles rate", f"{p.activity_bq * p.singles_per_decay / 1e6:.2f} M/s"),
        ("Block hit probability", f"{hit * 100:.2f}%"),
        ("Ring count rate (CR1)", f"{rates.cr1_hz / 1e6:.2f} M/s"),
        (f"Ring count rate (CR1, hit rounded to {round(hit, 4) * 100:.2f}%)", f"{rounded.cr1_hz / 1e6:.2f} M/s"),
        ("Module count rate (CR2)", f"{rates.cr2_hz / 1e6:.2f} M/s"),
        ("Average module uplink", f"{rates.cr2_hz * p.bytes_per_event / 1e6:.2f} MB/s = {rates.avg_mbps:.0f} Mbps"),
        (
            "Maximum module uplink",
            f"{p.max_rate_per_block_hz * p.blocks_per_module * p.bytes_per_event / 1e6:.0f} MB/s"
            f" = {rates.max_mbps:.0f} Mbps",
        ),
    ]
    return pd.DataFrame(rows, columns=["quantity", "value"]).set_index("quantity")
