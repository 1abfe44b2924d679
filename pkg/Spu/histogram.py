"""Online flood-map and energy-spectrum histograms.

Each block owns one 10-bit, 512x512-deep counter RAM shared by both modes. Starting a
session zeroes the whole RAM. Each event reads a counter, adds one and writes it back;
the increment that would pass 1023 instead raises the full flag and terminates the session.
"""

from enum import Enum
import logging

import numpy as np

from Spu.eventModel import (
    N_CRYSTALS,
    RAW_SIZE,
    AddressError,
    AlreadyActive,
    DomainError,
    NotActive,
)

logger = logging.getLogger("SPULogger")

COUNTER_MAX = (1 << 10) - 1
FLOOD_BINS = RAW_SIZE * RAW_SIZE
ENERGY_BINS_PER_CRYSTAL = 256
ENERGY_BINS = N_CRYSTALS * ENERGY_BINS_PER_CRYSTAL
MAX_SCALE_SHIFT = 11


class HistMode(Enum):
    FLOOD = "flood"
    ENERGY = "energy"

    @property
    def bins(self):
        return FLOOD_BINS if self is HistMode.FLOOD else ENERGY_BINS


class Accumulate(Enum):
    ACCEPTED = "accepted"
    TERMINATED = "terminated"


def floodAddr(pos):
    return pos.y * RAW_SIZE + pos.x


def floodAddrs(x, y):
    return np.asarray(y, dtype=np.int64) * RAW_SIZE + np.asarray(x, dtype=np.int64)


def _checkShift(scaleShift):
    if not 0 <= scaleShift <= MAX_SCALE_SHIFT:
        raise DomainError(f"energy scale shift {scaleShift} outside 0..{MAX_SCALE_SHIFT}")


def energyAddr(crystal, rawEnergy, scaleShift=4):
    # Bins the uncorrected sum, the spectrum is what the photopeak LUT is derived from.
    _checkShift(scaleShift)
    return int(crystal) * ENERGY_BINS_PER_CRYSTAL + min(
        ENERGY_BINS_PER_CRYSTAL - 1, int(rawEnergy) >> scaleShift
    )


def energyAddrs(crystals, rawEnergy, scaleShift=4):
    _checkShift(scaleShift)
    bins = np.minimum(ENERGY_BINS_PER_CRYSTAL - 1, np.asarray(rawEnergy, dtype=np.int64) >> scaleShift)
    return np.asarray(crystals, dtype=np.int64) * ENERGY_BINS_PER_CRYSTAL + bins


class BlockHistogram:
    """Shared histogram RAM of one detector block."""

    # Every RAM ever allocated, across all instances.
    allocations = 0

    def __init__(self, blockId=0):
        self.blockId = blockId
        self.bins = np.zeros(FLOOD_BINS, dtype=np.uint16)
        self.bufferAllocations = 1
        BlockHistogram.allocations += 1
        self.mode = HistMode.FLOOD
        self.full_flag = False
        self.active = False
        self.accepted = 0

    def start(self, mode):
        if self.active:
            raise AlreadyActive(f"block {self.blockId} histogram already running in {self.mode.value} mode")
        self.bins.fill(0)
        self.mode = HistMode(mode)
        self.full_flag = False
        self.active = True
        self.accepted = 0
        logger.info(f"Block {self.blockId} {self.mode.value} histogram started")

    def stop(self):
        # Counts stay readable.
        self.active = False

    def reset(self):
        self.bins.fill(0)
        self.full_flag = False
        self.active = False
        self.accepted = 0

    def _checkAddr(self, addr):
        if not self.active:
            raise NotActive(f"block {self.blockId} histogram is not active")
        limit = self.mode.bins
        bad = (np.asarray(addr) < 0) | (np.asarray(addr) >= limit)
        if np.any(bad):
            raise AddressError(f"address outside 0..{limit - 1} for {self.mode.value} mode")

    def _terminate(self, addr):
        self.full_flag = True
        self.active = False
        logger.warning(
            f"Block {self.blockId} {self.mode.value} histogram full at address {addr}, "
            f"terminated after {self.accepted} counts"
        )

    def accumulate(self, addr):
        self._checkAddr(addr)
        if self.bins[addr] >= COUNTER_MAX:
            self._terminate(addr)
            return Accumulate.TERMINATED
        self.bins[addr] += 1
        self.accepted += 1
        return Accumulate.ACCEPTED

    def accumulateMany(self, addrs):
        """Feeds addresses in order, exactly as repeated accumulate() calls would.

        Returns the number accepted; if that is less than len(addrs) the next address
        terminated the session and the rest were never seen.
        """
        addrs = np.asarray(addrs, dtype=np.int64)
        if addrs.size == 0:
            return 0
        self._checkAddr(addrs)
        # Value each counter holds when its event arrives: stored count plus earlier
        # occurrences of the same address within this batch.
        order = np.argsort(addrs, kind="stable")
        sortedAddrs = addrs[order]
        starts = np.r_[0, np.flatnonzero(np.diff(sortedAddrs)) + 1]
        groupStart = np.repeat(starts, np.diff(np.r_[starts, addrs.size]))
        seen = np.empty(addrs.size, dtype=np.int64)
        seen[order] = np.arange(addrs.size) - groupStart
        overflow = np.flatnonzero(self.bins[addrs].astype(np.int64) + seen >= COUNTER_MAX)
        taken = int(overflow[0]) if overflow.size else addrs.size
        np.add.at(self.bins, addrs[:taken], 1)
        self.accepted += taken
        if taken < addrs.size:
            self._terminate(int(addrs[taken]))
        return taken

    def read(self):
        # Ascending-address counter stream for the current mode.
        return self.bins[: self.mode.bins].copy()

    def readChunks(self, chunkBins):
        stream = self.read()
        for index, start in enumerate(range(0, stream.size, chunkBins)):
            yield index, stream[start : start + chunkBins]

    def floodImage(self):
        return self.bins.reshape(RAW_SIZE, RAW_SIZE).copy()

    def spectra(self):
        return self.bins[:ENERGY_BINS].reshape(N_CRYSTALS, ENERGY_BINS_PER_CRYSTAL).copy()


def crystalSpectrum(spectra, crystal):
    return np.asarray(spectra).reshape(N_CRYSTALS, ENERGY_BINS_PER_CRYSTAL)[crystal]
