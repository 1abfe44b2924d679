from Spu.eventModel import AddressError, AlreadyActive, DomainError, NotActive, RawPosition
from Spu.histogram import (
    COUNTER_MAX,
    ENERGY_BINS,
    FLOOD_BINS,
    Accumulate,
    BlockHistogram,
    HistMode,
    crystalSpectrum,
    energyAddr,
    energyAddrs,
    floodAddr,
    floodAddrs,
)
import numpy as np
import pytest


def test_addresses():
    assert floodAddr(RawPosition(10, 1)) == 522
    assert floodAddr(RawPosition(511, 511)) == FLOOD_BINS - 1
    assert energyAddr(2, 3000) == 699
    # Sums past the last bin pile into bin 255.
    assert energyAddr(528, 8 * 65535) == ENERGY_BINS - 1
    assert energyAddr(0, 3000, scaleShift=0) == 255
    assert list(floodAddrs([10, 511], [1, 511])) == [522, FLOOD_BINS - 1]
    assert list(energyAddrs([2, 528], [3000, 8 * 65535])) == [699, ENERGY_BINS - 1]
    with pytest.raises(DomainError):
        energyAddr(0, 0, scaleShift=12)


def test_energy_mode_fits_the_flood_ram():
    assert ENERGY_BINS == 135_424
    assert ENERGY_BINS < FLOOD_BINS == 262_144


def test_start_zeroes_and_requires_stop():
    hist = BlockHistogram()
    hist.start(HistMode.FLOOD)
    hist.accumulate(5)
    with pytest.raises(AlreadyActive):
        hist.start(HistMode.ENERGY)
    hist.stop()
    assert hist.read()[5] == 1
    hist.start(HistMode.ENERGY)
    assert hist.read().sum() == 0
    assert hist.read().size == ENERGY_BINS


def test_inactive_and_bad_addresses():
    hist = BlockHistogram()
    with pytest.raises(NotActive):
        hist.accumulate(0)
    hist.start(HistMode.ENERGY)
    with pytest.raises(AddressError):
        hist.accumulate(ENERGY_BINS)
    with pytest.raises(AddressError):
        hist.accumulateMany([0, -1])


def test_overflow_terminates_the_session():
    hist = BlockHistogram()
    hist.start(HistMode.FLOOD)
    for _ in range(COUNTER_MAX):
        assert hist.accumulate(699) is Accumulate.ACCEPTED
    # The 1024th identical event.
    assert hist.accumulate(699) is Accumulate.TERMINATED
    assert hist.full_flag and not hist.active
    assert hist.read()[699] == 1023
    with pytest.raises(NotActive):
        hist.accumulate(1)


def test_batch_overflow_stops_at_the_same_event():
    hist = BlockHistogram()
    hist.start(HistMode.FLOOD)
    addrs = np.r_[np.arange(10), np.full(1100, 42), np.arange(10)]
    taken = hist.accumulateMany(addrs)
    assert taken == 10 + COUNTER_MAX
    assert hist.full_flag
    assert hist.read()[42] == 1023
    assert hist.read()[:10].sum() == 10
    assert hist.accepted == taken


def test_batch_equals_sequential():
    rng = np.random.default_rng(4)
    addrs = rng.integers(0, 100, 150_000)
    one, many = BlockHistogram(), BlockHistogram()
    one.start(HistMode.ENERGY)
    many.start(HistMode.ENERGY)
    accepted = 0
    for a in addrs:
        if one.accumulate(int(a)) is Accumulate.TERMINATED:
            break
        accepted += 1
    assert many.accumulateMany(addrs) == accepted
    assert (one.read() == many.read()).all()
    assert one.full_flag == many.full_flag


def test_counts_are_conserved():
    rng = np.random.default_rng(8)
    hist = BlockHistogram()
    hist.start(HistMode.FLOOD)
    n = 1_000_000
    addrs = floodAddrs(rng.integers(0, 512, n), rng.integers(0, 512, n))
    assert hist.accumulateMany(addrs[:400_000]) == 400_000
    assert hist.accumulateMany(addrs[400_000:]) == n - 400_000
    assert not hist.full_flag
    assert int(hist.read().sum()) == n
    assert int(hist.floodImage().sum()) == n
    assert (hist.read() == np.bincount(addrs, minlength=FLOOD_BINS)).all()


def test_flood_after_energy_starts_from_zero():
    rng = np.random.default_rng(9)
    hist = BlockHistogram()
    hist.start(HistMode.ENERGY)
    addrs = energyAddrs(rng.integers(0, 529, 200_000), rng.integers(0, 4096, 200_000))
    assert hist.accumulateMany(addrs) == 200_000
    # The energy session stays below its 135,424 bins of the shared RAM.
    assert not hist.bins[ENERGY_BINS:].any()
    assert int(hist.bins[:ENERGY_BINS].sum()) == 200_000
    hist.stop()
    hist.start(HistMode.FLOOD)
    assert hist.read().size == FLOOD_BINS
    assert not hist.read().any()
    hist.accumulate(floodAddr(RawPosition(3, 0)))
    assert int(hist.read().sum()) == 1 and hist.read()[3] == 1


def test_read_chunks_cover_the_stream():
    hist = BlockHistogram()
    hist.start(HistMode.ENERGY)
    hist.accumulateMany([0, 1000, ENERGY_BINS - 1])
    chunks = list(hist.readChunks(512))
    assert [i for i, _ in chunks] == list(range(len(chunks)))
    assert len(chunks) == 265
    assert np.concatenate([c for _, c in chunks]).sum() == 3
    assert chunks[-1][1].size == ENERGY_BINS - 264 * 512


def test_spectra_view():
    hist = BlockHistogram()
    hist.start(HistMode.ENERGY)
    hist.accumulate(energyAddr(2, 3000))
    spectrum = crystalSpectrum(hist.spectra(), 2)
    assert spectrum[187] == 1 and spectrum.sum() == 1


def test_one_ram_per_block():
    before = BlockHistogram.allocations
    hist = BlockHistogram()
    hist.start(HistMode.FLOOD)
    hist.stop()
    hist.start(HistMode.ENERGY)
    hist.reset()
    assert BlockHistogram.allocations == before + 1
    assert hist.bufferAllocations == 1
