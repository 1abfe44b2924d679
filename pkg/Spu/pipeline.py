"""Per-block singles dataflow, mode switching, block FIFOs and the token-ring arbiter.

Events are processed in numpy batches. A batch is split by block, each block's slice runs
positioning, crystal lookup, corrections and either packaging or histogramming, then the
packaged events of all blocks are merged back into arrival order and pass through the
block FIFOs and the arbiter one grant at a time. The arbiter is clocked by a link credit
that grows by `linkCreditPerEvent` per ingested event; every whole credit is one grant.
"""

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from enum import Enum, IntEnum
import logging
import threading
import time

import numpy as np

from Spu.corrections import (
    EnergyWindow,
    PeakLut,
    TimeOffsetLut,
    correctEnergies,
    correctTimes,
    passWindows,
    sumEnergies,
)
from Spu.crystalLut import BoundaryClt, boundaryLookups, uniformEdges
from Spu.eventModel import (
    EVENT_DTYPE,
    N_BLOCKS,
    N_MODULES,
    RAW_SIZE,
    AlreadyActive,
    CommandError,
    DomainError,
    eventsToArray,
)
from Spu.histogram import BlockHistogram, HistMode, energyAddrs, floodAddrs
from Spu.positioning import computePositions
from Spu.transport import (
    MAX_PAYLOAD,
    PACKET_DTYPE,
    DownlinkStats,
    Opcode,
    Uplink,
    encodeHistChunks,
    encodeStatus,
    packEnergyOffline,
    packFloodOffline,
    packRegular,
    receiveDownlink,
)

logger = logging.getLogger("SPULogger")

FIFO_DEPTH = 512


class Mode(Enum):
    REGULAR_PACKAGE = "regular"
    FLOOD_ONLINE = "flood-online"
    FLOOD_OFFLINE = "flood-offline"
    ENERGY_ONLINE = "energy-online"
    ENERGY_OFFLINE = "energy-offline"

    @property
    def code(self):
        return list(Mode).index(self)

    @classmethod
    def fromCode(cls, code):
        try:
            return list(Mode)[code]
        except IndexError:
            raise DomainError(f"mode code {code} outside 0..{len(Mode) - 1}")

    @property
    def histMode(self):
        # Histogram the mode accumulates online, None for packet-producing modes.
        return {Mode.FLOOD_ONLINE: HistMode.FLOOD, Mode.ENERGY_ONLINE: HistMode.ENERGY}.get(self)


class Disposition(IntEnum):
    PACKAGED = 0
    WINDOW_REJECTED = 1
    ZERO_SUM_REJECTED = 2
    CLOCK_UNDERFLOW = 3
    FIFO_DROPPED = 4
    HISTOGRAMMED = 5
    HIST_TERMINATED = 6
    HIST_INACTIVE = 7

    @property
    def counter(self):
        return _COUNTERS[self]


_COUNTERS = {
    Disposition.PACKAGED: "packaged",
    Disposition.WINDOW_REJECTED: "window_rejected",
    Disposition.ZERO_SUM_REJECTED: "zero_sum",
    Disposition.CLOCK_UNDERFLOW: "underflow",
    Disposition.FIFO_DROPPED: "fifo_dropped",
    Disposition.HISTOGRAMMED: "histogrammed",
    Disposition.HIST_TERMINATED: "hist_terminated",
    Disposition.HIST_INACTIVE: "hist_inactive",
}

# Stage output for events that still have to go through a FIFO.
_QUEUED = 255


@dataclass
class BlockStats:
    ingested: int = 0
    packaged: int = 0
    window_rejected: int = 0
    zero_sum: int = 0
    underflow: int = 0
    fifo_dropped: int = 0
    histogrammed: int = 0
    hist_terminated: int = 0
    hist_inactive: int = 0

    def add(self, dispositions):
        counts = np.bincount(dispositions, minlength=len(Disposition))
        self.ingested += int(dispositions.size)
        for disp in Disposition:
            name = disp.counter
            setattr(self, name, getattr(self, name) + int(counts[disp]))

    def asDict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


class BlockFifo:
    """Bounded packet queue of one block; a full FIFO drops the newest packet."""

    def __init__(self, blockId=0, capacity=FIFO_DEPTH):
        if capacity < 1:
            raise DomainError(f"FIFO depth must be >= 1, got {capacity}")
        self.blockId = blockId
        self.capacity = capacity
        self.queue = deque()
        self.drop_count = 0

    def __len__(self):
        return len(self.queue)

    def push(self, packet):
        if len(self.queue) >= self.capacity:
            self.drop_count += 1
            if self.drop_count == 1 or self.drop_count % 1000 == 0:
                logger.warning(f"Block {self.blockId} FIFO full, {self.drop_count} packet(s) dropped")
            return False
        self.queue.append(packet)
        return True

    def pop(self):
        return self.queue.popleft()


class TokenRing:
    def __init__(self, token=0):
        self.token = token

    def arbitrate(self, fifos):
        """One grant: the first non-empty FIFO from the token on, in ring order.

        Returns (block_id, packet) and moves the token past that block, or None with
        the token unchanged when every FIFO is empty.
        """
        for step in range(len(fifos)):
            block = (self.token + step) % len(fifos)
            if len(fifos[block]):
                self.token = (block + 1) % len(fifos)
                return block, fifos[block].pop()
        return None


def arbitrate(ring, fifos):
    return ring.arbitrate(fifos)


def uniformBoundaryClt():
    lines = np.tile(uniformEdges()[1:-1], (RAW_SIZE, 1))
    return BoundaryClt(lines, lines)


@dataclass(frozen=True)
class SpuConfig:
    """Immutable configuration snapshot; commands build a new one and swap it in."""

    moduleId: int = 0
    mode: Mode = Mode.REGULAR_PACKAGE
    window: EnergyWindow = field(default_factory=EnergyWindow)
    clts: tuple = field(default_factory=lambda: (uniformBoundaryClt(),) * N_BLOCKS)
    peakLuts: tuple = field(default_factory=lambda: (PeakLut.uniform(4000),) * N_BLOCKS)
    timeLuts: tuple = field(default_factory=lambda: (TimeOffsetLut.zeros(),) * N_BLOCKS)
    scaleShift: int = 4
    alternateY: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        for name, kind in (("clts", BoundaryClt), ("peakLuts", PeakLut), ("timeLuts", TimeOffsetLut)):
            tables = tuple(getattr(self, name))
            if len(tables) != N_BLOCKS or not all(isinstance(t, kind) for t in tables):
                raise DomainError(f"{name} needs one {kind.__name__} per block ({N_BLOCKS})")
            object.__setattr__(self, name, tables)
        if not 0 <= self.scaleShift <= 11:
            raise DomainError(f"energy scale shift {self.scaleShift} outside 0..11")

    def withBlockTable(self, name, blocks, update):
        # Copy with update(table) applied to the named per-block table of each listed block.
        tables = list(getattr(self, name))
        for block in blocks:
            tables[block] = update(tables[block])
        return replace(self, **{name: tuple(tables)})


def _blockStage(cfg, blockId, rows, hist):
    """Dispositions of one block's events plus the packets still headed for the FIFO.

    Returns (dispositions, queued local indices, packets); queued entries are _QUEUED in
    dispositions.
    """
    n = rows.size
    disp = np.full(n, _QUEUED, dtype=np.uint8)
    empty = np.zeros(0, dtype=PACKET_DTYPE)
    if n == 0:
        return disp, np.zeros(0, dtype=np.int64), empty
    integrals = rows["integrals"]
    x, y, doi, valid = computePositions(integrals, cfg.alternateY)
    disp[~valid] = Disposition.ZERO_SUM_REJECTED
    idx = np.flatnonzero(valid)
    x, y, doi = x[idx], y[idx], doi[idx]
    times = rows["tdc_time"][idx]
    moduleIds = rows["module_id"][idx]
    mode = cfg.mode

    if mode is Mode.FLOOD_OFFLINE:
        return disp, idx, packFloodOffline(moduleIds, blockId, x, y, doi, times)

    crystals = boundaryLookups(cfg.clts[blockId], x, y)
    raw = sumEnergies(integrals[idx])

    if mode is Mode.ENERGY_OFFLINE:
        return disp, idx, packEnergyOffline(moduleIds, blockId, crystals, doi, raw, times)

    if mode is Mode.REGULAR_PACKAGE:
        corrected, underflow = correctTimes(times, crystals, cfg.timeLuts[blockId])
        kev = correctEnergies(raw, crystals, cfg.peakLuts[blockId])
        inWindow = passWindows(kev, cfg.window)
        disp[idx[underflow]] = Disposition.CLOCK_UNDERFLOW
        disp[idx[~underflow & ~inWindow]] = Disposition.WINDOW_REJECTED
        keep = ~underflow & inWindow
        packets = packRegular(moduleIds[keep], blockId, crystals[keep], doi[keep], kev[keep], corrected[keep])
        return disp, idx[keep], packets

    if mode is Mode.FLOOD_ONLINE:
        addrs = floodAddrs(x, y)
    else:
        addrs = energyAddrs(crystals, raw, cfg.scaleShift)
    disp[idx] = Disposition.HIST_INACTIVE
    if hist.active and hist.mode is mode.histMode:
        taken = hist.accumulateMany(addrs)
        disp[idx[:taken]] = Disposition.HISTOGRAMMED
        if taken < idx.size:
            disp[idx[taken]] = Disposition.HIST_TERMINATED
    return disp, np.zeros(0, dtype=np.int64), empty


class Spu:
    """One singles processing unit: four blocks sharing an arbiter and an uplink.

    Batches, commands and mode switches are serialized by one lock, so configuration
    changes and histogram readout always happen between events.
    """

    def __init__(
        self,
        config=None,
        uplink=None,
        fifoDepth=FIFO_DEPTH,
        linkCreditPerEvent=1.0,
        histChunkBins=512,
        parallel=False,
    ):
        if linkCreditPerEvent <= 0:
            raise DomainError(f"link credit per event must be > 0, got {linkCreditPerEvent}")
        self.config = config if config is not None else SpuConfig()
        if uplink is None:
            self.datagrams = []
            uplink = Uplink(self.datagrams.append)
        self.uplink = uplink
        self.linkCreditPerEvent = linkCreditPerEvent
        self.histChunkBins = histChunkBins
        self.parallel = parallel
        self.fifos = [BlockFifo(b, fifoDepth) for b in range(N_BLOCKS)]
        self.ring = TokenRing()
        self.histograms = [BlockHistogram(b) for b in range(N_BLOCKS)]
        self.stats = [BlockStats() for _ in range(N_BLOCKS)]
        self.downlinkStats = DownlinkStats()
        self.credit = 0.0
        self._pending = bytearray()
        self._lock = threading.Lock()
        self._executor = None

    # ------------------------------------------------------------ events

    def processBatch(self, events):
        """Runs a batch of EVENT_DTYPE records, returns their dispositions (uint8 codes)."""
        events = np.asarray(events, dtype=EVENT_DTYPE)
        if events.size and events["block_id"].max() >= N_BLOCKS:
            raise DomainError(f"block id outside 0..{N_BLOCKS - 1}")
        if events.size and events["module_id"].max() >= N_MODULES:
            raise DomainError(f"module id outside 0..{N_MODULES - 1}")
        with self._lock:
            cfg = self.config
            blockIds = events["block_id"]
            members = [np.flatnonzero(blockIds == b) for b in range(N_BLOCKS)]

            def stage(b):
                return _blockStage(cfg, b, events[members[b]], self.histograms[b])

            if self.parallel:
                if self._executor is None:
                    self._executor = ThreadPoolExecutor(max_workers=N_BLOCKS)
                results = list(self._executor.map(stage, range(N_BLOCKS)))
            else:
                results = [stage(b) for b in range(N_BLOCKS)]

            disp = np.empty(events.size, dtype=np.uint8)
            queuedAt, queuedPackets = [], []
            for b, (blockDisp, queued, packets) in enumerate(results):
                disp[members[b]] = blockDisp
                queuedAt.append(members[b][queued])
                queuedPackets.append(packets)
            queuedAt = np.concatenate(queuedAt)
            order = np.argsort(queuedAt, kind="stable")
            queuedAt = queuedAt[order]
            # concatenate hands back native byte order
            packets = np.concatenate(queuedPackets).astype(PACKET_DTYPE)[order]
            self._queue(disp, blockIds, queuedAt, packets)

            for b in range(N_BLOCKS):
                self.stats[b].add(disp[members[b]])
        return disp

    def processEvent(self, ev):
        return Disposition(self.processBatch(eventsToArray([ev]))[0])

    def _queue(self, disp, blockIds, queuedAt, packets):
        n = disp.size
        if self.linkCreditPerEvent >= 1 and not any(len(f) for f in self.fifos):
            # At least one grant follows every event and nothing is backlogged, so each
            # packet leaves right after it is queued, in arrival order.
            disp[queuedAt] = Disposition.PACKAGED
            if queuedAt.size:
                self.ring.token = (int(blockIds[queuedAt[-1]]) + 1) % N_BLOCKS
                self._emit(packets.tobytes())
            self.credit += self.linkCreditPerEvent * n
            self.credit -= int(self.credit)
            return
        granted = []
        nextQueued = 0
        for j in range(n):
            if nextQueued < queuedAt.size and queuedAt[nextQueued] == j:
                block = int(blockIds[j])
                ok = self.fifos[block].push(packets[nextQueued].tobytes())
                disp[j] = Disposition.PACKAGED if ok else Disposition.FIFO_DROPPED
                nextQueued += 1
            self.credit += self.linkCreditPerEvent
            while self.credit >= 1:
                self.credit -= 1
                grant = self.ring.arbitrate(self.fifos)
                if grant is not None:
                    granted.append(grant[1])
        self._emit(b"".join(granted))

    def _emit(self, packetBytes):
        self._pending += packetBytes
        whole = len(self._pending) // MAX_PAYLOAD * MAX_PAYLOAD
        if whole:
            self.uplink.sendPackets(bytes(self._pending[:whole]))
            del self._pending[:whole]

    def _flush(self):
        drained = []
        while (grant := self.ring.arbitrate(self.fifos)) is not None:
            drained.append(grant[1])
        self._pending += b"".join(drained)
        if self._pending:
            self.uplink.sendPackets(bytes(self._pending))
            self._pending.clear()
        return len(drained)

    def flush(self):
        """Drains every FIFO through the arbiter and sends the partial datagram."""
        with self._lock:
            return self._flush()

    # ------------------------------------------------------------ control

    def _setMode(self, mode):
        mode = Mode(mode)
        self._flush()
        for hist in self.histograms:
            hist.stop()
        self.config = replace(self.config, mode=mode)
        logger.info(f"Module {self.config.moduleId} switched to {mode.value} mode")

    def setMode(self, mode):
        with self._lock:
            self._setMode(mode)

    def swapConfig(self, config):
        with self._lock:
            if config.mode is not self.config.mode:
                self._flush()
            self.config = config
            logger.info(f"Module {config.moduleId} configuration replaced")

    def handleCommand(self, cmd):
        """Applies one downlink command. Returns reply datagrams, or None when the command
        addresses another module. Rejections raise SpuError and count as NAKs."""
        cfg = self.config
        if cmd.module_id != cfg.moduleId:
            return None
        values = cmd.validate()
        blocks = cmd.blocks()
        op = cmd.opcode
        if op is Opcode.SET_MODE:
            self._setMode(Mode.fromCode(values[0]))
        elif op is Opcode.SET_ENERGY_WINDOW:
            self.config = replace(cfg, window=EnergyWindow(*values))
        elif op is Opcode.LOAD_BOUNDARY_CLT_LINE:
            direction, line, bounds = values[0], values[1], values[2:]
            self.config = cfg.withBlockTable("clts", blocks, lambda t: t.withLine(direction, line, bounds))
        elif op is Opcode.LOAD_PEAK_ENTRY:
            self.config = cfg.withBlockTable("peakLuts", blocks, lambda t: t.withEntry(*values))
        elif op is Opcode.LOAD_TIME_ENTRY:
            self.config = cfg.withBlockTable("timeLuts", blocks, lambda t: t.withEntry(*values))
        elif op is Opcode.HIST_START:
            histMode = cfg.mode.histMode
            if histMode is None:
                raise CommandError(f"HIST_START needs an online histogram mode, unit is in {cfg.mode.value}")
            busy = [b for b in blocks if self.histograms[b].active]
            if busy:
                raise AlreadyActive(f"histogram already running on block(s) {busy}")
            for b in blocks:
                self.histograms[b].start(histMode)
        elif op is Opcode.HIST_READ:
            replies = []
            for b in blocks:
                hist = self.histograms[b]
                replies += encodeHistChunks(cfg.moduleId, b, hist.mode, hist.read(), self.histChunkBins)
            return replies
        elif op is Opcode.HIST_RESET:
            for b in blocks:
                self.histograms[b].reset()
        elif op is Opcode.STATUS:
            return [encodeStatus(cfg.moduleId, b, self.stats[b].asDict()) for b in blocks]
        return []

    def command(self, datagram):
        """Handles one downlink datagram and sends any replies on the uplink."""
        with self._lock:
            replies = receiveDownlink(datagram, self.handleCommand, self.downlinkStats)
        for reply in replies:
            self.uplink.sendControl(reply)
        return replies

    def status(self):
        return {
            "module_id": self.config.moduleId,
            "mode": self.config.mode.value,
            "blocks": [s.asDict() for s in self.stats],
            "fifo_depth": [len(f) for f in self.fifos],
            "histogram_active": [h.active for h in self.histograms],
            "histogram_full": [h.full_flag for h in self.histograms],
            "naks": self.downlinkStats.naks,
            "ignored_commands": self.downlinkStats.ignored,
        }

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None


# ---------------------------------------------------------------- benchmark


def syntheticBatch(rng, size, blocks=N_BLOCKS, moduleId=0):
    """Random valid events spread over `blocks` blocks, all landing inside a wide window."""
    events = np.zeros(size, dtype=EVENT_DTYPE)
    events["module_id"] = moduleId
    events["block_id"] = rng.integers(0, blocks, size)
    events["integrals"] = rng.integers(250, 750, (size, 8))
    events["tdc_time"] = np.arange(size, dtype=np.uint64) * 1000 + 1_000_000
    return events


def benchmarkThroughput(seconds=10.0, blocks=1, parallel=False, batchSize=1 << 16, seed=0):
    """Regular-mode events per second through processing, FIFOs, arbiter and packet encode."""
    rng = np.random.default_rng(seed)
    batch = syntheticBatch(rng, batchSize, blocks)
    cfg = SpuConfig(peakLuts=(PeakLut.uniform(4000),) * N_BLOCKS, window=EnergyWindow(0, 0xFFFF))
    spu = Spu(cfg, uplink=Uplink(lambda payload: None), parallel=parallel)
    events = 0
    start = time.perf_counter()
    elapsed = 0.0
    try:
        while elapsed < seconds:
            spu.processBatch(batch)
            events += batch.size
            elapsed = time.perf_counter() - start
        spu.flush()
    finally:
        spu.close()
    packaged = sum(s.packaged for s in spu.stats)
    logger.info(f"Benchmark: {events} events over {elapsed:.2f} s on {blocks} block(s)")
    return {"blocks": blocks, "events": events, "packaged": packaged, "seconds": elapsed, "rate": events / elapsed}
