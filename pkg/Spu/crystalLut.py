"""Crystal look-up tables.

A full CLT stores one crystal ID per raw (x, y): 512 x 512 ten-bit words per block. A separable
full CLT can be stored as two boundary CLTs instead. For every horizontal line y, keep the 22 x
coordinates where the column component of the 2D crystal ID steps up. For every vertical line x,
keep the 22 y coordinates where the row component steps up. A stored boundary is the first
coordinate of the next region, so lookup counts boundaries <= the coordinate.
"""

from dataclasses import dataclass
from fractions import Fraction
import logging
import math

import numpy as np
import pandas as pd

from filePath import lockedWrite
from Spu.eventModel import (
    GRID,
    N_BOUNDARIES,
    N_CRYSTALS,
    RAW_MAX,
    RAW_SIZE,
    CrystalId,
    DomainError,
    NotSeparable,
    crystal2dToId,
    packHeader,
    readLutFile,
    roundHalfUp,
)

logger = logging.getLogger("SPULogger")

FULL_MAGIC = b"PCLF"
BOUNDARY_MAGIC = b"PCLB"
MEGABIT = 1 << 20


def _readOnly(array, dtype):
    array = np.array(array, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class FullClt:
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.shape != (RAW_SIZE, RAW_SIZE):
            raise DomainError(f"full CLT must be {RAW_SIZE}x{RAW_SIZE}, got {cells.shape}")
        if cells.min() < 0 or cells.max() >= N_CRYSTALS:
            raise DomainError(f"full CLT holds ids outside 0..{N_CRYSTALS - 1}")
        missing = np.flatnonzero(np.bincount(cells.ravel(), minlength=N_CRYSTALS) == 0)
        if missing.size:
            raise DomainError(
                f"full CLT does not cover {missing.size} crystal(s), first missing id {missing[0]}"
            )
        object.__setattr__(self, "cells", _readOnly(cells, np.uint16))

    def __eq__(self, other):
        return isinstance(other, FullClt) and np.array_equal(self.cells, other.cells)


@dataclass(frozen=True, eq=False)
class BoundaryClt:
    xBoundaries: np.ndarray  # indexed [y][i]
    yBoundaries: np.ndarray  # indexed [x][i]

    def __post_init__(self):
        for name in ("xBoundaries", "yBoundaries"):
            b = np.asarray(getattr(self, name))
            if b.shape != (RAW_SIZE, N_BOUNDARIES):
                raise DomainError(f"{name} must be {RAW_SIZE}x{N_BOUNDARIES}, got {b.shape}")
            checkBoundaryLine(b, name)
            object.__setattr__(self, name, _readOnly(b, np.uint16))

    def __eq__(self, other):
        return (
            isinstance(other, BoundaryClt)
            and np.array_equal(self.xBoundaries, other.xBoundaries)
            and np.array_equal(self.yBoundaries, other.yBoundaries)
        )

    def withLine(self, direction, line, values):
        # Copy with one line replaced; what LOAD_BOUNDARY_CLT_LINE applies.
        xb, yb = np.array(self.xBoundaries), np.array(self.yBoundaries)
        (xb if direction == 0 else yb)[line] = values
        return BoundaryClt(xb, yb)


def checkBoundaryLine(b, name="boundaries"):
    b = np.atleast_2d(np.asarray(b, dtype=np.int64))
    if b.shape[-1] != N_BOUNDARIES:
        raise DomainError(f"{name}: a line holds {N_BOUNDARIES} boundaries, got {b.shape[-1]}")
    if b.min() < 1 or b.max() > RAW_MAX:
        raise DomainError(f"{name}: boundaries must lie in 1..{RAW_MAX}")
    if (np.diff(b, axis=-1) <= 0).any():
        line = int(np.flatnonzero((np.diff(b, axis=-1) <= 0).any(axis=-1))[0])
        raise DomainError(f"{name}: line {line} is not strictly increasing")


@dataclass(frozen=True)
class MemoryFootprint:
    full_bits: int
    boundary_bits: int

    @property
    def ratio(self):
        return Fraction(self.full_bits, self.boundary_bits)

    @property
    def fullMb(self):
        return self.full_bits / MEGABIT

    @property
    def boundaryMb(self):
        return self.boundary_bits / MEGABIT


def fullLookup(clt, pos):
    return CrystalId(clt.cells[pos.y, pos.x])


def fullLookups(clt, x, y):
    return clt.cells[np.asarray(y), np.asarray(x)].astype(np.int64)


def _components(cells):
    cells = np.asarray(cells, dtype=np.int64)
    return cells // GRID, cells % GRID


def _describeLine(values):
    # First reason a component sequence is not 0,1,...,22 in unit steps.
    if values[0] != 0:
        return f"starts at component {values[0]}"
    steps = np.diff(values)
    bad = np.flatnonzero((steps < 0) | (steps > 1))
    if bad.size:
        at = int(bad[0])
        return f"steps {values[at]} -> {values[at + 1]} at {at + 1}"
    return f"ends at component {values[-1]} instead of {GRID - 1}"


def _lineBoundaries(components, direction, axis):
    steps = np.diff(components, axis=1)
    bad = (
        (components[:, 0] != 0)
        | (steps < 0).any(axis=1)
        | (steps > 1).any(axis=1)
        | ((steps == 1).sum(axis=1) != N_BOUNDARIES)
    )
    if bad.any():
        line = int(np.flatnonzero(bad)[0])
        msg = f"{direction} line {axis}={line} is not separable: {_describeLine(components[line])}"
        logger.error(msg)
        raise NotSeparable(msg)
    _, at = np.nonzero(steps == 1)
    return (at + 1).reshape(RAW_SIZE, N_BOUNDARIES)


def decompose(clt):
    """Full CLT -> boundary CLT.

    The 1D ids are split into (row, col). The col component is projected on every
    horizontal line and the row component on every vertical line. Each line's 22
    unit steps become its boundaries.
    """
    rows, cols = _components(clt.cells)
    xb = _lineBoundaries(cols, "horizontal", "y")
    yb = _lineBoundaries(np.ascontiguousarray(rows.T), "vertical", "x")
    return BoundaryClt(xb, yb)


def boundaryLookup(b, pos):
    # 22-wide compare then popcount, one bank per direction.
    col = int(np.count_nonzero(b.xBoundaries[pos.y] <= pos.x))
    row = int(np.count_nonzero(b.yBoundaries[pos.x] <= pos.y))
    return crystal2dToId(row, col)


def boundaryLookups(b, x, y):
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    col = np.count_nonzero(b.xBoundaries[y] <= x[:, None], axis=1)
    row = np.count_nonzero(b.yBoundaries[x] <= y[:, None], axis=1)
    return row * GRID + col


def expand(b):
    # Boundary CLT -> dense table, all 262,144 positions.
    y, x = np.divmod(np.arange(RAW_SIZE * RAW_SIZE), RAW_SIZE)
    return boundaryLookups(b, x, y).reshape(RAW_SIZE, RAW_SIZE)


def countMismatches(full, b):
    return int(np.count_nonzero(expand(b) != full.cells))


def footprint(nBits, kCrystals):
    if nBits < 1:
        raise DomainError(f"n must be >= 1, got {nBits}")
    side = math.isqrt(kCrystals) if kCrystals > 0 else 0
    if kCrystals < 4 or side * side != kCrystals:
        raise DomainError(f"k must be a perfect square >= 4, got {kCrystals}")
    idBits = (kCrystals - 1).bit_length()
    full = (1 << (2 * nBits)) * idBits
    boundary = 2 * (1 << nBits) * (side - 1) * nBits
    return MemoryFootprint(full, boundary)


def memoryBudget(blocks=4, nBits=9, kCrystals=529, peakBits=16, timeBits=32, histBits=10, energyBins=256):
    """Memory table for `blocks` blocks in Mb (2^20 bits): dense CLTs and separate histogram
    RAMs versus boundary CLTs and one histogram RAM shared by the flood and energy modes."""
    fp = footprint(nBits, kCrystals)
    flood = (1 << (2 * nBits)) * histBits * blocks
    energy = kCrystals * energyBins * histBits * blocks
    rows = {
        "CLTs": (fp.full_bits * blocks, fp.boundary_bits * blocks),
        "Crystal based time offset correction LUTs": (kCrystals * timeBits * blocks,) * 2,
        "Photon peak LUTs": (kCrystals * peakBits * blocks,) * 2,
        "Flood map histogram": (flood, max(flood, energy)),
        "Energy spectrum histogram": (energy, 0),
    }
    df = pd.DataFrame.from_dict(rows, orient="index", columns=["not optimized", "optimized"])
    df.loc["Total"] = df.sum()
    return df / MEGABIT


def uniformEdges():
    # Region j covers [round(512 j / 23), round(512 (j + 1) / 23)).
    return np.array([roundHalfUp(RAW_SIZE * j, GRID) for j in range(GRID + 1)])


def cltFromBoundaries(xb, yb):
    """Dense CLT induced by per-line boundaries (always separable)."""
    coords = np.arange(RAW_SIZE)
    cols = np.count_nonzero(np.asarray(xb)[:, None, :] <= coords[None, :, None], axis=2)
    rows = np.count_nonzero(np.asarray(yb)[:, None, :] <= coords[None, :, None], axis=2).T
    return FullClt(rows * GRID + cols)


def uniformGridClt():
    inner = uniformEdges()[1:-1]
    lines = np.tile(inner, (RAW_SIZE, 1))
    return cltFromBoundaries(lines, lines)


def jitteredClt(rng, amplitude=4):
    """Uniform grid whose boundaries wander smoothly by up to `amplitude` pixels from line to
    line. Region widths stay >= 22 - 2 * amplitude, so every crystal keeps a region."""
    inner = uniformEdges()[1:-1]
    t = np.arange(RAW_SIZE)[:, None] / RAW_SIZE

    def wander():
        amp = rng.uniform(0, amplitude, N_BOUNDARIES)
        freq = rng.integers(1, 4, N_BOUNDARIES)
        phase = rng.uniform(0, 2 * np.pi, N_BOUNDARIES)
        return inner + np.rint(amp * np.sin(2 * np.pi * freq * t + phase)).astype(np.int64)

    return cltFromBoundaries(wander(), wander())


def saveFullClt(clt, path):
    return lockedWrite(path, packHeader(FULL_MAGIC) + clt.cells.astype("<u2").tobytes())


def loadFullClt(path):
    payload = readLutFile(path, FULL_MAGIC, RAW_SIZE * RAW_SIZE * 2)
    return FullClt(np.frombuffer(payload, dtype="<u2").reshape(RAW_SIZE, RAW_SIZE))


def saveBoundaryClt(b, path):
    body = b.xBoundaries.astype("<u2").tobytes() + b.yBoundaries.astype("<u2").tobytes()
    return lockedWrite(path, packHeader(BOUNDARY_MAGIC) + body)


def loadBoundaryClt(path):
    size = RAW_SIZE * N_BOUNDARIES
    payload = readLutFile(path, BOUNDARY_MAGIC, 2 * size * 2)
    values = np.frombuffer(payload, dtype="<u2")
    if (values >> 9).any():
        raise DomainError(f"{path}: boundary values use more than 9 bits")
    return BoundaryClt(
        values[:size].reshape(RAW_SIZE, N_BOUNDARIES),
        values[size:].reshape(RAW_SIZE, N_BOUNDARIES),
    )
