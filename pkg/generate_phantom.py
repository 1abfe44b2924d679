# generates synthetic detector events with known crystal, photopeak and timing ground truth
from dataclasses import dataclass
import argparse

import numpy as np

from Spu.corrections import PeakLut, TimeOffsetLut
from Spu.eventModel import EVENT_DTYPE, GRID, N_BLOCKS, N_CRYSTALS, N_MODULES, U16_MAX, DomainError, writeEvents

DEFAULT_GAIN = 4000
FIRST_EVENT_PS = 1_000_000


def crystalCentroids():
    """(u, v) light centroid of every crystal on the unit square, u along x (columns)."""
    row, col = np.divmod(np.arange(N_CRYSTALS), GRID)
    return np.stack([(col + 0.5) / GRID, (row + 0.5) / GRID], axis=1)


@dataclass(frozen=True)
class PhantomSpec:
    """Ground truth per crystal plus the sampling of the event stream.

    gains are the photopeak raw energy sums, timeDelays the per-crystal TDC delay in ps
    (the correcting LUT holds their negation). endSplit is the range the share of light
    reaching end 1 is drawn from. crystals, when given, replaces the random crystal draw.
    """

    events: int = 100_000
    seed: int = 1
    noise: float = 0.0
    gains: tuple = None
    timeDelays: tuple = None
    centroids: tuple = None
    endSplit: tuple = (0.5, 0.5)
    photopeakFraction: float = 1.0
    moduleId: int = 0
    blocks: int = N_BLOCKS
    eventSpacingPs: int = 1000
    crystals: tuple = None

    def __post_init__(self):
        if self.events < 0:
            raise DomainError(f"event count must be >= 0, got {self.events}")
        if self.noise < 0:
            raise DomainError(f"noise must be >= 0, got {self.noise}")
        if not 0 <= self.endSplit[0] <= self.endSplit[1] <= 1:
            raise DomainError(f"end split {self.endSplit} must satisfy 0 <= low <= high <= 1")
        if not 0 <= self.photopeakFraction <= 1:
            raise DomainError(f"photopeak fraction {self.photopeakFraction} outside [0, 1]")
        if not 0 <= self.moduleId < N_MODULES or not 1 <= self.blocks <= N_BLOCKS:
            raise DomainError(f"module {self.moduleId} / {self.blocks} block(s) out of range")
        if self.eventSpacingPs < 0:
            raise DomainError("event spacing must be >= 0")
        gains = self.gainArray()
        # Every integral must stay a u16, even when all light of an end lands on one channel.
        if gains.min() < 1 or gains.max() > U16_MAX:
            raise DomainError(f"gains must lie in 1..{U16_MAX}")
        delays = self.delayArray()
        if (delays < -FIRST_EVENT_PS).any() or (np.abs(delays) >= 1 << 31).any():
            raise DomainError(f"time delays must lie in -{FIRST_EVENT_PS}..2^31-1 ps")
        centroids = self.centroidArray()
        if centroids.shape != (N_CRYSTALS, 2) or centroids.min() < 0 or centroids.max() > 1:
            raise DomainError("centroids must be 529 (u, v) pairs inside the unit square")
        if self.crystals is not None and len(self.crystals) and not 0 <= min(self.crystals) <= max(self.crystals) < N_CRYSTALS:
            raise DomainError("crystal ids outside 0..528")

    def gainArray(self):
        return np.full(N_CRYSTALS, DEFAULT_GAIN, dtype=np.int64) if self.gains is None else np.asarray(self.gains, dtype=np.int64)

    def delayArray(self):
        return np.zeros(N_CRYSTALS, dtype=np.int64) if self.timeDelays is None else np.asarray(self.timeDelays, dtype=np.int64)

    def centroidArray(self):
        return crystalCentroids() if self.centroids is None else np.asarray(self.centroids, dtype=float)

    def peakLut(self):
        return PeakLut(self.gainArray())

    def timeLut(self):
        return TimeOffsetLut(-self.delayArray())


def splitIntegers(weights, totals):
    """Integer parts of totals * weights (rows of weights sum to 1) that add up to totals
    exactly, by largest remainder."""
    exact = weights * totals[:, None]
    parts = np.floor(exact).astype(np.int64)
    deficit = totals - parts.sum(axis=1)
    order = np.argsort(-(exact - parts), axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(weights.shape[1]), order.shape), axis=1)
    return parts + (rank < deficit[:, None])


def generateEvents(spec):
    """Returns (events, ground-truth crystal ids)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.events if spec.crystals is None else len(spec.crystals)
    if spec.crystals is None:
        crystals = rng.integers(0, N_CRYSTALS, n)
    else:
        crystals = np.asarray(spec.crystals, dtype=np.int64)
    gains = spec.gainArray()[crystals]
    photopeak = rng.random(n) < spec.photopeakFraction
    energy = np.where(photopeak, gains, np.rint(gains * rng.uniform(0.2, 0.9, n)).astype(np.int64))

    split = rng.uniform(*spec.endSplit, n) if spec.endSplit[0] < spec.endSplit[1] else np.full(n, spec.endSplit[0])
    end1 = np.rint(energy * split).astype(np.int64)
    end2 = energy - end1

    u, v = spec.centroidArray()[crystals].T
    # End 1 channels A1 B1 C1 D1 and end 2 channels A2 B2 C2 D2, mirrored.
    w1 = np.stack([u * v, (1 - u) * v, (1 - u) * (1 - v), u * (1 - v)], axis=1)
    w2 = np.stack([u * (1 - v), (1 - u) * (1 - v), (1 - u) * v, u * v], axis=1)
    integrals = np.concatenate([splitIntegers(w1, end1), splitIntegers(w2, end2)], axis=1)
    if spec.noise:
        integrals = integrals + np.rint(rng.normal(0, spec.noise, integrals.shape) * integrals).astype(np.int64)
        integrals = np.clip(integrals, 0, U16_MAX)

    events = np.zeros(n, dtype=EVENT_DTYPE)
    events["module_id"] = spec.moduleId
    events["block_id"] = rng.integers(0, spec.blocks, n)
    events["integrals"] = integrals
    trueTimes = FIRST_EVENT_PS + np.arange(n, dtype=np.int64) * spec.eventSpacingPs
    events["tdc_time"] = trueTimes + spec.delayArray()[crystals]
    return events, crystals


def writeFile(events, path):
    return writeEvents(events, path)


def main(args=None, **kwargs):
    parser = argparse.ArgumentParser(description="Writes a synthetic light-sharing phantom event file.")
    parser.add_argument("out", help="Event file to write")
    parser.add_argument("-n", "--events", type=int, default=100_000, help="Number of events")
    parser.add_argument("-s", "--seed", type=int, default=1, help="Random seed")
    parser.add_argument("--noise", type=float, default=0.0, help="Relative gaussian noise per channel")
    parser.add_argument("--photopeak", type=float, default=1.0, help="Fraction of events at the photopeak")
    parser.add_argument("--module", type=int, default=0, help="Module id written into the events")
    args = parser.parse_args(args)
    spec = PhantomSpec(
        events=args.events, seed=args.seed, noise=args.noise, photopeakFraction=args.photopeak, moduleId=args.module
    )
    events, _ = generateEvents(spec)
    writeFile(events, args.out)
    print(f"Wrote {len(events)} events to {args.out}")
    return events


if __name__ == "__main__":
    main()
