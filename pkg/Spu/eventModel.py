"""Shared event types, identifier arithmetic and errors for the singles processing unit.

Crystal IDs are row-major over the 23x23 LYSO array: row = id // 23, col = id % 23.
Event files are headerless runs of 26-byte little-endian records
(module_id u8, block_id u8, 8 x u16 integrals A1 B1 C1 D1 A2 B2 C2 D2, u64 time in ps).
"""

from dataclasses import dataclass
import os
import struct

import numpy as np

from filePath import lockedWrite

GRID = 23
N_CRYSTALS = GRID * GRID
N_BOUNDARIES = GRID - 1
RAW_BITS = 9
RAW_SIZE = 1 << RAW_BITS
RAW_MAX = RAW_SIZE - 1
DOI_MAX = 15
N_MODULES = 12
N_BLOCKS = 4
U16_MAX = 0xFFFF
U64_MAX = (1 << 64) - 1

EVENT_DTYPE = np.dtype(
    [
        ("module_id", "u1"),
        ("block_id", "u1"),
        ("integrals", "<u2", (8,)),
        ("tdc_time", "<u8"),
    ]
)
EVENT_SIZE = EVENT_DTYPE.itemsize


class SpuError(Exception):
    pass


class DomainError(SpuError, ValueError):
    pass


class ZeroSumEvent(SpuError):
    pass


class ClockUnderflow(SpuError):
    pass


class NotSeparable(SpuError):
    pass


class AlreadyActive(SpuError):
    pass


class NotActive(SpuError):
    pass


class AddressError(SpuError):
    pass


class PacketError(SpuError):
    pass


class CommandError(SpuError):
    pass


class LutFileError(SpuError):
    pass


def roundHalfUp(num, den):
    # Exact round(num / den) with .5 going up. Works on ints and int64 arrays (den > 0).
    return (2 * num + den) // (2 * den)


class CrystalId(int):
    """Row-major index into the 23x23 crystal array."""

    def __new__(cls, value):
        value = int(value)
        if not 0 <= value < N_CRYSTALS:
            raise DomainError(f"crystal id {value} outside 0..{N_CRYSTALS - 1}")
        return super().__new__(cls, value)

    @property
    def row(self):
        return int(self) // GRID

    @property
    def col(self):
        return int(self) % GRID


class Doi(int):
    def __new__(cls, value):
        value = int(value)
        if not 0 <= value <= DOI_MAX:
            raise DomainError(f"DOI {value} outside 0..{DOI_MAX}")
        return super().__new__(cls, value)


def crystalIdTo2d(crystalId):
    crystalId = CrystalId(crystalId)
    return crystalId.row, crystalId.col


def crystal2dToId(row, col):
    if not 0 <= row < GRID or not 0 <= col < GRID:
        raise DomainError(f"crystal component ({row}, {col}) outside 0..{GRID - 1}")
    return CrystalId(row * GRID + col)


def checkIds(moduleId, blockId):
    if not 0 <= moduleId < N_MODULES:
        raise DomainError(f"module id {moduleId} outside 0..{N_MODULES - 1}")
    if not 0 <= blockId < N_BLOCKS:
        raise DomainError(f"block id {blockId} outside 0..{N_BLOCKS - 1}")


@dataclass(frozen=True)
class ChannelIntegrals:
    a1: int
    b1: int
    c1: int
    d1: int
    a2: int
    b2: int
    c2: int
    d2: int

    def __post_init__(self):
        for name, value in zip(("a1", "b1", "c1", "d1", "a2", "b2", "c2", "d2"), self):
            if not 0 <= value <= U16_MAX:
                raise DomainError(f"integral {name}={value} outside 0..{U16_MAX}")

    def __iter__(self):
        return iter(
            (self.a1, self.b1, self.c1, self.d1, self.a2, self.b2, self.c2, self.d2)
        )

    @property
    def s1(self):
        return self.a1 + self.b1 + self.c1 + self.d1

    @property
    def s2(self):
        return self.a2 + self.b2 + self.c2 + self.d2

    @property
    def valid(self):
        return self.s1 > 0 and self.s2 > 0

    @classmethod
    def fromSequence(cls, values):
        return cls(*(int(v) for v in values))


@dataclass(frozen=True)
class RawPosition:
    x: int
    y: int

    def __post_init__(self):
        if not 0 <= self.x <= RAW_MAX or not 0 <= self.y <= RAW_MAX:
            raise DomainError(f"raw position ({self.x}, {self.y}) outside 0..{RAW_MAX}")


@dataclass(frozen=True)
class RawEvent:
    module_id: int
    block_id: int
    integrals: ChannelIntegrals
    tdc_time: int

    def __post_init__(self):
        checkIds(self.module_id, self.block_id)
        if not 0 <= self.tdc_time <= U64_MAX:
            raise DomainError(f"tdc time {self.tdc_time} is not an unsigned 64-bit value")


@dataclass(frozen=True)
class SinglesRecord:
    module_id: int
    block_id: int
    crystal: CrystalId
    doi: Doi
    energy_kev: int
    time_ps: int

    def __post_init__(self):
        checkIds(self.module_id, self.block_id)
        object.__setattr__(self, "crystal", CrystalId(self.crystal))
        object.__setattr__(self, "doi", Doi(self.doi))
        if not 0 <= self.energy_kev <= U16_MAX:
            raise DomainError(f"energy {self.energy_kev} keV outside 0..{U16_MAX}")
        if not 0 <= self.time_ps <= U64_MAX:
            raise DomainError(f"time {self.time_ps} is not an unsigned 64-bit value")


def eventsToArray(events):
    # RawEvent sequence -> EVENT_DTYPE array
    out = np.zeros(len(events), dtype=EVENT_DTYPE)
    for n, ev in enumerate(events):
        out[n] = (ev.module_id, ev.block_id, tuple(ev.integrals), ev.tdc_time)
    return out


def eventFromRow(row):
    return RawEvent(
        int(row["module_id"]),
        int(row["block_id"]),
        ChannelIntegrals.fromSequence(row["integrals"]),
        int(row["tdc_time"]),
    )


def readEvents(path):
    size = os.path.getsize(path)
    if size % EVENT_SIZE:
        raise LutFileError(
            f"{path}: {size} bytes is not a whole number of {EVENT_SIZE}-byte events"
        )
    return np.fromfile(path, dtype=EVENT_DTYPE)


def writeEvents(events, path):
    lockedWrite(path, np.ascontiguousarray(events, dtype=EVENT_DTYPE).tobytes())


# 16-byte header shared by every LUT/CLT file: magic, version, n bits, k crystals, reserved.
HEADER_FORMAT = "<4sHHII"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
FILE_VERSION = 1


def packHeader(magic, nBits=RAW_BITS, kCrystals=N_CRYSTALS):
    return struct.pack(HEADER_FORMAT, magic, FILE_VERSION, nBits, kCrystals, 0)


def readLutFile(path, magic, payloadSize):
    """Reads a LUT/CLT file, checks its header and returns the payload bytes."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise LutFileError(f"{path}: {e}") from e
    if len(data) < HEADER_SIZE:
        raise LutFileError(f"{path}: truncated header ({len(data)} bytes)")
    fileMagic, version, nBits, kCrystals, _ = struct.unpack_from(HEADER_FORMAT, data)
    if fileMagic != magic:
        raise LutFileError(f"{path}: magic {fileMagic!r}, expected {magic!r}")
    if version != FILE_VERSION:
        raise LutFileError(f"{path}: unsupported version {version}")
    if nBits != RAW_BITS or kCrystals != N_CRYSTALS:
        raise LutFileError(
            f"{path}: built for n={nBits}, k={kCrystals}; this unit uses n={RAW_BITS}, k={N_CRYSTALS}"
        )
    payload = data[HEADER_SIZE:]
    if len(payload) != payloadSize:
        raise LutFileError(f"{path}: payload is {len(payload)} bytes, expected {payloadSize}")
    return payload
