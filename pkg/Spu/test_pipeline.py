from Spu.corrections import EnergyWindow, TimeOffsetLut
from Spu.eventModel import EVENT_DTYPE, ChannelIntegrals, DomainError, RawEvent, SinglesRecord, eventsToArray
from Spu.histogram import HistMode
from Spu.pipeline import (
    BlockFifo,
    BlockStats,
    Disposition,
    Mode,
    Spu,
    SpuConfig,
    TokenRing,
    arbitrate,
    benchmarkThroughput,
    syntheticBatch,
)
from Spu.transport import (
    ALL_BLOCKS,
    PACKET_FORMAT,
    PACKET_SIZE,
    STATUS_FIELDS,
    EnergyRecord,
    Opcode,
    RawPositionRecord,
    decodeHistChunk,
    decodePacket,
    decodeStatus,
    encodeCommand,
    makeCommand,
)
import struct
import unittest

import numpy as np
import pytest


def events(*specs):
    # (block, channel value or 8 values, time) -> EVENT_DTYPE array
    out = []
    for block, value, t in specs:
        values = [value] * 8 if isinstance(value, int) else value
        out.append(RawEvent(0, block, ChannelIntegrals(*values), t))
    return eventsToArray(out)


def decoded(spu):
    data = b"".join(d for d in spu.datagrams if len(d) % PACKET_SIZE == 0 and d[0] in (1, 2, 3))
    return [decodePacket(data[i : i + PACKET_SIZE]) for i in range(0, len(data), PACKET_SIZE)]


def cmd(opcode, block, *values, module=0):
    return encodeCommand(makeCommand(opcode, module, block, *values))


class TestTokenRing(unittest.TestCase):
    def fifos(self, sizes):
        out = [BlockFifo(b) for b in range(4)]
        for b, size in enumerate(sizes):
            for n in range(size):
                out[b].push((b, n))
        return out

    def test_single_non_empty_fifo(self):
        ring = TokenRing()
        assert arbitrate(ring, self.fifos([0, 0, 1, 0])) == (2, (2, 0))
        assert ring.token == 3

    def test_round_robin(self):
        ring = TokenRing()
        fifos = self.fifos([2, 2, 2, 2])
        assert [ring.arbitrate(fifos)[0] for _ in range(4)] == [0, 1, 2, 3]
        assert ring.token == 0

    def test_empty_leaves_token(self):
        ring = TokenRing(token=2)
        assert ring.arbitrate(self.fifos([0, 0, 0, 0])) is None
        assert ring.token == 2

    def test_fifo_order_preserved(self):
        ring = TokenRing()
        fifos = self.fifos([3, 0, 0, 0])
        assert [ring.arbitrate(fifos)[1] for _ in range(3)] == [(0, 0), (0, 1), (0, 2)]

    def test_fairness_when_backlogged(self):
        rng = np.random.default_rng(12)
        ring = TokenRing(token=int(rng.integers(4)))
        fifos = self.fifos([512, 5, 5, 5])
        grants = np.zeros(4, dtype=np.int64)
        for step in range(100_000):
            block, _ = ring.arbitrate(fifos)
            grants[block] += 1
            # Keep every FIFO non-empty; block 0 stays full.
            fifos[block].push((block, step))
            if step % 4 == 3:
                assert grants.max() - grants.min() == 0
        assert grants.max() - grants.min() <= 1


def test_fifo_drops_newest():
    fifo = BlockFifo(1, capacity=2)
    assert fifo.push("a") and fifo.push("b")
    assert not fifo.push("c")
    assert fifo.drop_count == 1
    assert [fifo.pop(), fifo.pop()] == ["a", "b"]
    with pytest.raises(DomainError):
        BlockFifo(0, capacity=0)


def test_mode_codes():
    assert [m.code for m in Mode] == [0, 1, 2, 3, 4]
    assert Mode.fromCode(3) is Mode.ENERGY_ONLINE
    assert Mode.FLOOD_ONLINE.histMode is HistMode.FLOOD
    assert Mode.REGULAR_PACKAGE.histMode is None
    with pytest.raises(DomainError):
        Mode.fromCode(5)


def test_block_stats_sum():
    stats = BlockStats()
    stats.add(np.array([0, 0, 1, 5, 7], dtype=np.uint8))
    assert stats.ingested == 5 and stats.packaged == 2 and stats.hist_inactive == 1
    assert list(stats.asDict()) == list(STATUS_FIELDS)


class TestRegularMode(unittest.TestCase):
    def test_photopeak_event_is_packaged_at_511(self):
        spu = Spu()
        # Eight channels of 500 sum to the default 4000 photopeak; equal light hits the centre.
        assert spu.processEvent(RawEvent(0, 2, ChannelIntegrals(*[500] * 8), 123_456)) is Disposition.PACKAGED
        spu.flush()
        assert decoded(spu) == [SinglesRecord(0, 2, 264, 8, 511, 123_456)]

    def test_rejections(self):
        cfg = SpuConfig(timeLuts=(TimeOffsetLut.zeros().withEntry(264, -500),) * 4)
        spu = Spu(cfg)
        disp = spu.processBatch(
            events(
                (0, [500, 500, 500, 500, 0, 0, 0, 0], 10_000),
                (1, 100, 10_000),
                (2, 500, 100),
                (3, 500, 10_000),
            )
        )
        assert list(disp) == [
            Disposition.ZERO_SUM_REJECTED,
            Disposition.WINDOW_REJECTED,
            Disposition.CLOCK_UNDERFLOW,
            Disposition.PACKAGED,
        ]
        spu.flush()
        assert [r.time_ps for r in decoded(spu)] == [9_500]

    def test_dispositions_are_exhaustive(self):
        rng = np.random.default_rng(31)
        batch = np.zeros(20_000, dtype=EVENT_DTYPE)
        batch["block_id"] = rng.integers(0, 4, batch.size)
        batch["integrals"] = rng.integers(0, 900, (batch.size, 8))
        batch["integrals"][::7, 4:] = 0
        batch["tdc_time"] = rng.integers(0, 1000, batch.size)
        cfg = SpuConfig(timeLuts=(TimeOffsetLut(-np.arange(529)),) * 4)
        spu = Spu(cfg, linkCreditPerEvent=0.5, fifoDepth=16)
        disp = spu.processBatch(batch)
        drained = spu.flush()
        counts = np.bincount(disp, minlength=len(Disposition))
        assert counts.sum() == batch.size
        status = spu.status()["blocks"]
        assert sum(b["ingested"] for b in status) == batch.size
        for d in Disposition:
            assert sum(b[d.counter] for b in status) == counts[d]
        assert counts[Disposition.FIFO_DROPPED] > 0
        assert len(decoded(spu)) == counts[Disposition.PACKAGED]
        assert drained <= 4 * 16

    def test_backlog_keeps_per_block_order(self):
        spu = Spu(linkCreditPerEvent=0.3, fifoDepth=512)
        specs = [(n % 4, 500, 1_000 + n) for n in range(400)]
        disp = spu.processBatch(events(*specs))
        assert (disp == Disposition.PACKAGED).all()
        assert spu.status()["fifo_depth"] != [0, 0, 0, 0]
        spu.flush()
        records = decoded(spu)
        assert len(records) == 400
        for block in range(4):
            times = [r.time_ps for r in records if r.block_id == block]
            assert times == sorted(times)

    def test_full_fifo_drops(self):
        spu = Spu(linkCreditPerEvent=0.25, fifoDepth=4)
        disp = spu.processBatch(events(*[(0, 500, n) for n in range(100)]))
        assert (disp == Disposition.FIFO_DROPPED).sum() == spu.fifos[0].drop_count > 0
        spu.flush()
        assert len(decoded(spu)) == (disp == Disposition.PACKAGED).sum()

    def test_datagrams_hold_whole_packets(self):
        spu = Spu()
        spu.processBatch(events(*[(n % 4, 500, n) for n in range(200)]))
        # Only full datagrams leave before a flush.
        assert [len(d) for d in spu.datagrams] == [1472, 1472]
        spu.flush()
        assert [len(d) for d in spu.datagrams] == [1472, 1472, 16 * 16]

    def test_parallel_matches_serial(self):
        rng = np.random.default_rng(5)
        batch = syntheticBatch(rng, 5000)
        serial, parallel = Spu(), Spu(parallel=True)
        try:
            assert (serial.processBatch(batch) == parallel.processBatch(batch)).all()
            serial.flush()
            parallel.flush()
            assert serial.datagrams == parallel.datagrams
        finally:
            parallel.close()

    def test_bad_block_id(self):
        batch = events((0, 500, 0))
        batch["block_id"] = 4
        with pytest.raises(DomainError):
            Spu().processBatch(batch)

    def test_bad_module_id(self):
        for moduleId in (12, 17):
            batch = events((0, 500, 0))
            batch["module_id"] = moduleId
            spu = Spu()
            with pytest.raises(DomainError):
                spu.processBatch(batch)
            assert spu.datagrams == []

    def test_packets_are_big_endian_on_the_wire(self):
        spu = Spu()
        spu.processBatch(events((2, 500, 123_456)))
        spu.flush()
        # module 0, block 2, crystal 264, doi 8, 511 keV
        assert spu.datagrams == [struct.pack(PACKET_FORMAT, 0x01, 0x08, 264, 0x80, 511, 123_456, 0)]
        assert spu.datagrams[0][2:4] == b"\x01\x08"


class TestOtherModes(unittest.TestCase):
    def test_flood_online_overflow(self):
        spu = Spu()
        spu.setMode(Mode.FLOOD_ONLINE)
        spu.command(cmd(Opcode.HIST_START, 1))
        disp = spu.processBatch(events(*[(1, 500, n) for n in range(1024)]))
        assert (disp[:1023] == Disposition.HISTOGRAMMED).all()
        assert disp[1023] == Disposition.HIST_TERMINATED
        assert spu.histograms[1].full_flag
        assert spu.processEvent(RawEvent(0, 1, ChannelIntegrals(*[500] * 8), 0)) is Disposition.HIST_INACTIVE
        # Other blocks never started.
        assert spu.processEvent(RawEvent(0, 0, ChannelIntegrals(*[500] * 8), 0)) is Disposition.HIST_INACTIVE
        assert spu.status()["histogram_full"] == [False, True, False, False]

    def test_online_flood_readout(self):
        spu = Spu(histChunkBins=733)
        spu.setMode(Mode.FLOOD_ONLINE)
        spu.command(cmd(Opcode.HIST_START, ALL_BLOCKS))
        spu.processBatch(events(*[(0, 500, n) for n in range(10)], (0, [900, 0, 0, 900, 900, 0, 0, 900], 11)))
        replies = spu.command(cmd(Opcode.HIST_READ, 0))
        chunks = [decodeHistChunk(r) for r in replies]
        stream = np.concatenate([c.bins for c in chunks])
        assert stream.size == 512 * 512
        assert stream[256 * 512 + 256] == 10
        assert stream[256 * 512 + 511] == 1
        assert stream.sum() == 11
        assert spu.uplink.controlDatagrams == len(replies)

    def test_energy_online_uses_raw_sum(self):
        spu = Spu()
        spu.setMode(Mode.ENERGY_ONLINE)
        spu.command(cmd(Opcode.HIST_START, 3))
        assert spu.processEvent(RawEvent(0, 3, ChannelIntegrals(*[375] * 8), 0)) is Disposition.HISTOGRAMMED
        spectra = spu.histograms[3].spectra()
        assert spectra[264, 3000 >> 4] == 1

    def test_flood_offline_sends_raw_positions(self):
        spu = Spu(SpuConfig(mode=Mode.FLOOD_OFFLINE))
        spu.processBatch(events((2, [100, 50, 25, 25, 80, 40, 40, 40], 77)))
        spu.flush()
        assert decoded(spu) == [RawPositionRecord(0, 2, 313, 294, 8, 77)]

    def test_energy_offline_sends_raw_energy(self):
        spu = Spu(SpuConfig(mode=Mode.ENERGY_OFFLINE, timeLuts=(TimeOffsetLut.zeros().withEntry(264, -5),) * 4))
        spu.processBatch(events((1, 9000, 3)))
        spu.flush()
        # Raw TDC time, no offset and no window.
        assert decoded(spu) == [EnergyRecord(0, 1, 264, 8, 72_000, 3)]

    def test_mode_switch_flushes_and_stops(self):
        spu = Spu(linkCreditPerEvent=0.1)
        spu.processBatch(events(*[(0, 500, n) for n in range(20)]))
        assert len(spu.fifos[0]) > 0
        spu.setMode(Mode.FLOOD_OFFLINE)
        assert len(spu.fifos[0]) == 0
        assert len(decoded(spu)) == 20
        spu.setMode(Mode.FLOOD_ONLINE)
        spu.command(cmd(Opcode.HIST_START, 0))
        spu.processEvent(RawEvent(0, 0, ChannelIntegrals(*[500] * 8), 0))
        spu.setMode(Mode.REGULAR_PACKAGE)
        assert not spu.histograms[0].active
        assert spu.histograms[0].read().sum() == 1


class TestCommands(unittest.TestCase):
    def test_configuration_commands(self):
        spu = Spu()
        spu.command(
            cmd(Opcode.SET_ENERGY_WINDOW, ALL_BLOCKS, 400, 600)
            + cmd(Opcode.LOAD_PEAK_ENTRY, 1, 264, 3000)
            + cmd(Opcode.LOAD_TIME_ENTRY, 2, 264, 250)
            + cmd(Opcode.SET_MODE, ALL_BLOCKS, Mode.ENERGY_OFFLINE.code)
        )
        cfg = spu.config
        assert cfg.window == EnergyWindow(400, 600)
        assert cfg.peakLuts[1].peaks[264] == 3000 and cfg.peakLuts[0].peaks[264] == 4000
        assert cfg.timeLuts[2].offsets[264] == 250 and cfg.timeLuts[3].offsets[264] == 0
        assert cfg.mode is Mode.ENERGY_OFFLINE
        assert spu.downlinkStats.commands == 4 and spu.downlinkStats.naks == 0

    def test_boundary_line_command(self):
        spu = Spu()
        line = list(range(20, 20 + 22 * 20, 20))
        spu.command(cmd(Opcode.LOAD_BOUNDARY_CLT_LINE, 0, 0, 256, *line))
        assert list(spu.config.clts[0].xBoundaries[256]) == line
        assert list(spu.config.clts[1].xBoundaries[256]) != line
        # Non-increasing line is refused and the table stays.
        spu.command(cmd(Opcode.LOAD_BOUNDARY_CLT_LINE, 0, 0, 256, *line[::-1]))
        assert spu.downlinkStats.naks == 1
        assert list(spu.config.clts[0].xBoundaries[256]) == line

    def test_regular_event_after_peak_update(self):
        spu = Spu()
        spu.command(cmd(Opcode.LOAD_PEAK_ENTRY, 0, 264, 4400))
        spu.processEvent(RawEvent(0, 0, ChannelIntegrals(*[550] * 8), 9))
        spu.flush()
        assert decoded(spu)[0].energy_kev == 511

    def test_status_reply(self):
        spu = Spu()
        spu.processBatch(events((0, 500, 1), (0, 100, 2), (2, 500, 3)))
        replies = spu.command(cmd(Opcode.STATUS, ALL_BLOCKS))
        assert len(replies) == 4
        module, block, counters = decodeStatus(replies[0])
        assert (module, block) == (0, 0)
        assert counters["ingested"] == 2 and counters["packaged"] == 1 and counters["window_rejected"] == 1

    def test_naks_and_foreign_modules(self):
        spu = Spu()
        spu.command(cmd(Opcode.HIST_START, 0))
        assert spu.downlinkStats.naks == 1
        spu.command(cmd(Opcode.SET_MODE, 0, 1, module=5))
        assert spu.downlinkStats.ignored == 1
        assert spu.config.mode is Mode.REGULAR_PACKAGE
        spu.setMode(Mode.FLOOD_ONLINE)
        spu.command(cmd(Opcode.HIST_START, 0) + cmd(Opcode.HIST_START, 0))
        assert spu.downlinkStats.naks == 2
        spu.command(cmd(Opcode.HIST_RESET, 0) + cmd(Opcode.HIST_START, 0))
        assert spu.downlinkStats.naks == 2
        assert spu.histograms[0].active

    def test_swap_config(self):
        spu = Spu()
        spu.swapConfig(SpuConfig(moduleId=3, window=EnergyWindow(0, 100)))
        assert spu.processEvent(RawEvent(3, 0, ChannelIntegrals(*[500] * 8), 0)) is Disposition.WINDOW_REJECTED


def test_config_validation():
    with pytest.raises(DomainError):
        SpuConfig(clts=())
    with pytest.raises(DomainError):
        SpuConfig(scaleShift=12)
    with pytest.raises(DomainError):
        Spu(linkCreditPerEvent=0)


def test_benchmark_reports_a_rate():
    result = benchmarkThroughput(seconds=0.2, blocks=4, batchSize=4096)
    assert result["events"] >= 4096
    assert result["packaged"] == result["events"]
    assert result["rate"] > 0
