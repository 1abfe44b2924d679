"""Per-crystal corrections: photopeak rescale to 511 keV, TDC offset, energy window."""

from dataclasses import dataclass

import numpy as np

from filePath import lockedWrite
from Spu.eventModel import (
    N_CRYSTALS,
    U16_MAX,
    U64_MAX,
    ClockUnderflow,
    CrystalId,
    DomainError,
    packHeader,
    readLutFile,
    roundHalfUp,
)

PEAK_MAGIC = b"PPKL"
TIME_MAGIC = b"PTOL"
PHOTOPEAK_KEV = 511
DEFAULT_WINDOW = (350, 650)


@dataclass(frozen=True, eq=False)
class PeakLut:
    peaks: np.ndarray

    def __post_init__(self):
        peaks = np.asarray(self.peaks)
        if peaks.shape != (N_CRYSTALS,):
            raise DomainError(f"peak LUT needs {N_CRYSTALS} entries, got {peaks.shape}")
        if peaks.min() <= 0 or peaks.max() > U16_MAX:
            raise DomainError(f"peak LUT entries must lie in 1..{U16_MAX}")
        peaks = np.array(peaks, dtype=np.uint16)
        peaks.setflags(write=False)
        object.__setattr__(self, "peaks", peaks)

    def withEntry(self, crystal, peak):
        peaks = np.array(self.peaks)
        peaks[CrystalId(crystal)] = peak
        return PeakLut(peaks)

    @classmethod
    def uniform(cls, peak):
        return cls(np.full(N_CRYSTALS, peak))


@dataclass(frozen=True, eq=False)
class TimeOffsetLut:
    offsets: np.ndarray

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.int64)
        if offsets.shape != (N_CRYSTALS,):
            raise DomainError(f"time LUT needs {N_CRYSTALS} entries, got {offsets.shape}")
        if (np.abs(offsets) >= 1 << 31).any():
            raise DomainError("time offsets must satisfy |offset| < 2^31 ps")
        offsets = offsets.astype(np.int32)
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)

    def withEntry(self, crystal, offset):
        offsets = np.array(self.offsets, dtype=np.int64)
        offsets[CrystalId(crystal)] = offset
        return TimeOffsetLut(offsets)

    @classmethod
    def zeros(cls):
        return cls(np.zeros(N_CRYSTALS, dtype=np.int64))


@dataclass(frozen=True)
class EnergyWindow:
    low_kev: int = DEFAULT_WINDOW[0]
    high_kev: int = DEFAULT_WINDOW[1]

    def __post_init__(self):
        if not 0 <= self.low_kev <= self.high_kev <= U16_MAX:
            raise DomainError(
                f"energy window [{self.low_kev}, {self.high_kev}] must satisfy 0 <= low <= high <= {U16_MAX}"
            )


def sumEnergy(ch):
    return sum(int(v) for v in ch)


def sumEnergies(integrals):
    return np.asarray(integrals, dtype=np.int64).sum(axis=1)


def correctEnergy(rawEnergy, crystal, lut):
    # raw == peak lands on exactly 511
    kev = roundHalfUp(int(rawEnergy) * PHOTOPEAK_KEV, int(lut.peaks[CrystalId(crystal)]))
    return min(kev, U16_MAX)


def correctEnergies(rawEnergy, crystals, lut):
    peaks = lut.peaks[crystals].astype(np.int64)
    kev = roundHalfUp(np.asarray(rawEnergy, dtype=np.int64) * PHOTOPEAK_KEV, peaks)
    return np.minimum(kev, U16_MAX)


def correctTime(timePs, crystal, lut):
    corrected = int(timePs) + int(lut.offsets[CrystalId(crystal)])
    if corrected < 0:
        raise ClockUnderflow(f"time {timePs} ps with crystal {crystal} offset goes negative")
    return min(corrected, U64_MAX)


def correctTimes(timePs, crystals, lut):
    """Returns (corrected uint64 times, underflow mask). Underflowed entries are 0 and times
    past 2^64 - 1 saturate, as in correctTime."""
    timePs = np.asarray(timePs, dtype=np.uint64)
    offsets = lut.offsets[crystals].astype(np.int64)
    # Only negative offsets can underflow, and only when |offset| > time.
    underflow = (offsets < 0) & (timePs < (-offsets).astype(np.uint64))
    corrected = timePs + offsets.astype(np.uint64)  # wraps modulo 2^64, same as signed add
    corrected[underflow] = 0
    headroom = np.uint64(U64_MAX) - timePs
    corrected[(offsets > 0) & (headroom < offsets.clip(min=0).astype(np.uint64))] = np.uint64(U64_MAX)
    return corrected, underflow


def passWindow(energyKev, window):
    return window.low_kev <= energyKev <= window.high_kev


def passWindows(energyKev, window):
    energyKev = np.asarray(energyKev)
    return (energyKev >= window.low_kev) & (energyKev <= window.high_kev)


def savePeakLut(lut, path):
    return lockedWrite(path, packHeader(PEAK_MAGIC) + lut.peaks.astype("<u2").tobytes())


def loadPeakLut(path):
    payload = readLutFile(path, PEAK_MAGIC, N_CRYSTALS * 2)
    return PeakLut(np.frombuffer(payload, dtype="<u2"))


def saveTimeLut(lut, path):
    return lockedWrite(path, packHeader(TIME_MAGIC) + lut.offsets.astype("<i4").tobytes())


def loadTimeLut(path):
    payload = readLutFile(path, TIME_MAGIC, N_CRYSTALS * 4)
    return TimeOffsetLut(np.frombuffer(payload, dtype="<i4"))
