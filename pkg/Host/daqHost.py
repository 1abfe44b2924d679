"""DAQ host: receives the SPU uplink, decodes singles, reassembles histogram readout and
builds the offline-mode histograms on the PC side. Exports a PGM flood image, a CSV of the
energy spectra and a JSON summary of the session counters."""

from collections import defaultdict
from dataclasses import asdict, dataclass, field
import json
import logging
import os
import re
import socket
import sys
import time

import numpy as np
import pandas as pd

# Get parent directory
path = os.path.dirname(__file__)
parent = os.path.abspath(os.path.join(path, os.pardir))
sys.path.append(parent)

from filePath import lockedWrite
from Spu.eventModel import N_CRYSTALS, RAW_SIZE, SpuError
from Spu.histogram import ENERGY_BINS_PER_CRYSTAL, HistMode, energyAddrs, floodAddrs
from Spu.transport import (
    CHUNK_ENERGY,
    CHUNK_FLOOD,
    PACKET_SIZE,
    PT_ENERGY_OFFLINE,
    PT_FLOOD_OFFLINE,
    PT_REGULAR,
    STATUS_REPLY,
    EnergyRecord,
    FrameError,
    RawPositionRecord,
    decodeHistChunk,
    decodePacket,
    decodePackets,
    decodeStatus,
    parseFrame,
    readCapture,
)

# Logging
daq_log = path + os.sep + "daq_host.log"
logger = logging.getLogger("DAQLogger")
if not logger.handlers:
    logger.setLevel(logging.INFO)
    handler = logging.FileHandler(daq_log)
    handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
    logger.addHandler(handler)

PGM_MAXVAL = 0xFFFF
_TYPE_NAMES = {PT_REGULAR: "regular", PT_FLOOD_OFFLINE: "flood_offline", PT_ENERGY_OFFLINE: "energy_offline"}


@dataclass
class BlockCounters:
    packets: int = 0
    regular: int = 0
    flood_offline: int = 0
    energy_offline: int = 0
    chunks: int = 0
    status_replies: int = 0


@dataclass
class SessionStats:
    datagrams: int = 0
    packets_received: int = 0
    decode_errors: int = 0
    length_errors: int = 0
    frame_errors: int = 0
    wrong_type_records: int = 0
    incomplete_histograms: int = 0
    blocks: dict = field(default_factory=lambda: defaultdict(BlockCounters))

    def asDict(self):
        out = {k: v for k, v in asdict(self).items() if k != "blocks"}
        out["blocks"] = {f"{m}.{b}": asdict(c) for (m, b), c in sorted(self.blocks.items())}
        return out


def buildOfflineFlood(records):
    """512x512 int64 counts indexed [y][x] from flood-offline records; other records are
    skipped. Returns (flood, skipped)."""
    xs = [r.x for r in records if isinstance(r, RawPositionRecord)]
    ys = [r.y for r in records if isinstance(r, RawPositionRecord)]
    flood = np.zeros(RAW_SIZE * RAW_SIZE, dtype=np.int64)
    np.add.at(flood, floodAddrs(np.array(xs, dtype=np.int64), np.array(ys, dtype=np.int64)), 1)
    return flood.reshape(RAW_SIZE, RAW_SIZE), len(records) - len(xs)


def buildOfflineSpectra(records, scaleShift=4):
    """529x256 int64 spectra from energy-offline records, binned like the online mode.
    Returns (spectra, skipped)."""
    energy = [r for r in records if isinstance(r, EnergyRecord)]
    crystals = np.array([r.crystal for r in energy], dtype=np.int64)
    raw = np.array([r.raw_energy for r in energy], dtype=np.int64)
    spectra = np.zeros(N_CRYSTALS * ENERGY_BINS_PER_CRYSTAL, dtype=np.int64)
    np.add.at(spectra, energyAddrs(crystals, raw, scaleShift), 1)
    return spectra.reshape(N_CRYSTALS, ENERGY_BINS_PER_CRYSTAL), len(records) - len(energy)


def _write(path, data):
    try:
        return lockedWrite(path, data)
    except OSError as e:
        raise OSError(f"Could not write {path}: {e}") from e


def exportFlood(flood, path):
    """Binary PGM (P5). maxval is the largest count (at least 1); samples are 2 bytes big
    endian when maxval > 255."""
    flood = np.asarray(flood, dtype=np.int64).reshape(RAW_SIZE, RAW_SIZE)
    if flood.max(initial=0) > PGM_MAXVAL:
        logger.warning(f"Flood counts above {PGM_MAXVAL} clipped in {path}")
        flood = np.minimum(flood, PGM_MAXVAL)
    maxval = max(int(flood.max(initial=0)), 1)
    raster = flood.astype(">u2" if maxval > 255 else "u1").tobytes()
    _write(path, f"P5\n{RAW_SIZE} {RAW_SIZE}\n{maxval}\n".encode("ascii") + raster)
    logger.info(f"Flood image written to {path} (maxval {maxval})")
    return path


def readPgm(path):
    with open(path, "rb") as f:
        data = f.read()
    # Exactly one whitespace byte separates maxval from the raster.
    header = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if header is None:
        raise SpuError(f"{path}: not a binary PGM")
    width, height, maxval = (int(v) for v in header.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    raster = np.frombuffer(data, dtype=dtype, offset=header.end())
    if raster.size != width * height:
        raise SpuError(f"{path}: raster holds {raster.size} samples, expected {width * height}")
    return raster.reshape(height, width), maxval


def exportSpectra(spectra, path):
    spectra = np.asarray(spectra).reshape(N_CRYSTALS, ENERGY_BINS_PER_CRYSTAL)
    crystal, bins = np.divmod(np.arange(spectra.size), ENERGY_BINS_PER_CRYSTAL)
    df = pd.DataFrame({"crystal_id": crystal, "bin": bins, "count": spectra.ravel()})
    _write(path, df.to_csv(index=False))
    logger.info(f"Spectra written to {path} ({len(df)} rows)")
    return path


class DaqHost:
    """One ingestion context. Not thread safe; exports work on copies.

    A session carries one singles packet type. It is fixed by `session` or by the first singles
    packet received, and cleared by resetSession(). Records of any other type are decoded and
    returned but counted as wrong-type and kept out of the offline histograms.
    """

    def __init__(self, scaleShift=4, keepRecords=True, session=None):
        self.stats = SessionStats()
        self.scaleShift = scaleShift
        self.keepRecords = keepRecords
        self.records = []
        self.status = {}
        self.histograms = {}
        self._chunks = defaultdict(dict)
        self._flood = np.zeros(RAW_SIZE * RAW_SIZE, dtype=np.int64)
        self._spectra = np.zeros(N_CRYSTALS * ENERGY_BINS_PER_CRYSTAL, dtype=np.int64)
        self.session = session

    def ingestDatagram(self, payload):
        """Decodes one uplink datagram; malformed content is counted, never raised."""
        payload = bytes(payload)
        self.stats.datagrams += 1
        if not payload:
            return []
        kind = payload[0]
        try:
            if kind in (CHUNK_FLOOD, CHUNK_ENERGY):
                self._ingestChunk(payload)
                return []
            if kind == STATUS_REPLY:
                moduleId, blockId, counters = decodeStatus(payload)
                self.status[(moduleId, blockId)] = counters
                self.stats.blocks[(moduleId, blockId)].status_replies += 1
                return []
        except SpuError as e:
            self.stats.decode_errors += 1
            logger.warning(f"Bad control datagram: {e}")
            return []
        return self._ingestSingles(payload)

    def _ingestSingles(self, payload):
        if len(payload) % PACKET_SIZE:
            self.stats.length_errors += 1
            logger.warning(f"Datagram of {len(payload)} bytes carries a partial packet")
        packets, valid = decodePackets(payload)
        bad = int(np.count_nonzero(~valid))
        if bad:
            self.stats.decode_errors += bad
            logger.warning(f"{bad} malformed packet(s) in a datagram of {packets.size}")
        packets = packets[valid]
        self.stats.packets_received += packets.size
        records = [decodePacket(p.tobytes()) for p in packets]
        if self.session is None and packets.size:
            self.session = _TYPE_NAMES[int(packets["type"][0])]
            logger.info(f"Session carries {self.session} packets")
        names = [_TYPE_NAMES[int(ptype)] for ptype in packets["type"]]
        for rec, name in zip(records, names):
            counters = self.stats.blocks[(rec.module_id, rec.block_id)]
            counters.packets += 1
            setattr(counters, name, getattr(counters, name) + 1)
        matching = [rec for rec, name in zip(records, names) if name == self.session]
        self.stats.wrong_type_records += len(records) - len(matching)
        self._accumulate(matching)
        if self.keepRecords:
            self.records.extend(records)
        return records

    def _accumulate(self, records):
        flood, _ = buildOfflineFlood(records)
        spectra, _ = buildOfflineSpectra(records, self.scaleShift)
        self._flood += flood.ravel()
        self._spectra += spectra.ravel()

    def _ingestChunk(self, payload):
        chunk = decodeHistChunk(payload)
        key = (chunk.module_id, chunk.block_id, chunk.mode)
        if chunk.index == 0 and self._chunks.get(key):
            # A readout restarted before the previous one completed.
            self._dropChunks(key)
        self._chunks[key][chunk.index] = chunk.bins
        self.stats.blocks[(chunk.module_id, chunk.block_id)].chunks += 1
        received = sum(b.size for b in self._chunks[key].values())
        if received == chunk.mode.bins:
            parts = self._chunks.pop(key)
            self.histograms[key] = np.concatenate([parts[i] for i in sorted(parts)]).astype(np.int64)
            logger.info(
                f"Module {chunk.module_id} block {chunk.block_id} {chunk.mode.value} histogram reassembled "
                f"from {len(parts)} chunks"
            )

    def _dropChunks(self, key):
        parts = self._chunks.pop(key)
        self.stats.incomplete_histograms += 1
        logger.warning(f"Dropped incomplete {key[2].value} readout of module {key[0]} block {key[1]} ({len(parts)} chunks)")

    def resetSession(self, session=None):
        """Starts a new session: pending readouts are dropped, counters and histograms kept."""
        for key in list(self._chunks):
            self._dropChunks(key)
        self.session = session

    def onlineFlood(self, moduleId, blockId):
        return self.histograms[(moduleId, blockId, HistMode.FLOOD)].reshape(RAW_SIZE, RAW_SIZE)

    def onlineSpectra(self, moduleId, blockId):
        return self.histograms[(moduleId, blockId, HistMode.ENERGY)].reshape(N_CRYSTALS, ENERGY_BINS_PER_CRYSTAL)

    def offlineFlood(self):
        return self._flood.reshape(RAW_SIZE, RAW_SIZE).copy()

    def offlineSpectra(self):
        return self._spectra.reshape(N_CRYSTALS, ENERGY_BINS_PER_CRYSTAL).copy()

    def ingestFrame(self, frame, withFcs=True):
        try:
            payload = parseFrame(frame, withFcs=withFcs)
        except FrameError as e:
            self.stats.frame_errors += 1
            logger.warning(f"{type(e).__name__}: {e}")
            return []
        return self.ingestDatagram(payload)

    def replayCapture(self, capturePath):
        records = []
        for frame in readCapture(capturePath):
            records.extend(self.ingestFrame(frame))
        logger.info(f"Replayed {capturePath}: {self.stats.packets_received} packets so far")
        return records

    def listen(self, port, host="0.0.0.0", duration=None, idleTimeout=2.0, ready=None):
        """Receives datagrams until `duration` seconds pass, or until idleTimeout seconds
        of silence after the first datagram. `ready` (a threading.Event) is set once bound."""
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 23)
        sock.bind((host, port))
        sock.settimeout(idleTimeout)
        logger.info(f"Listening on {host}:{port}")
        if ready is not None:
            ready.set()
        start = time.monotonic()
        try:
            while duration is None or time.monotonic() - start < duration:
                try:
                    payload, _ = sock.recvfrom(65535)
                except socket.timeout:
                    if self.stats.datagrams:
                        break
                    continue
                self.ingestDatagram(payload)
        finally:
            sock.close()
        return self.stats

    def exportStats(self, path):
        _write(path, json.dumps(self.stats.asDict(), indent=2))
        return path

    def exportAll(self, outDir):
        """Writes flood.pgm, spectra.csv, stats.json plus any reassembled online histograms."""
        written = [
            exportFlood(self.offlineFlood(), os.path.join(outDir, "flood.pgm")),
            exportSpectra(self.offlineSpectra(), os.path.join(outDir, "spectra.csv")),
        ]
        for (moduleId, blockId, mode), hist in sorted(self.histograms.items(), key=lambda kv: str(kv[0])):
            name = f"online_{mode.value}_m{moduleId}_b{blockId}"
            if mode is HistMode.FLOOD:
                written.append(exportFlood(hist, os.path.join(outDir, name + ".pgm")))
            else:
                written.append(exportSpectra(hist, os.path.join(outDir, name + ".csv")))
        written.append(self.exportStats(os.path.join(outDir, "stats.json")))
        return written
