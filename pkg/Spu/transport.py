"""Wire formats between the SPU and the DAQ host.

Singles packet, 16 bytes, network byte order:

    byte 0     packet type (0x01 regular, 0x02 flood-offline, 0x03 energy-offline)
    byte 1     module_id << 4 | block_id << 2            (bits 1:0 reserved)
    bytes 2-3  crystal id, or raw x for flood-offline
    byte 4     doi << 4 | low nibble:
                 regular         0
                 flood-offline   bit 0 = raw y bit 8
                 energy-offline  bits 2:0 = raw energy bits 18:16
    bytes 5-6  energy keV (regular) / raw energy bits 15:0 (energy-offline) /
               raw y bits 7:0 then 0x00 (flood-offline)
    bytes 7-14 time in ps, u64
    byte 15    reserved, 0

Uplink datagrams carry whole packets only (at most 92 = 1472 / 16). Histogram readout and
status replies travel as their own datagrams, told apart by the first byte.
"""

from dataclasses import dataclass, field
from enum import IntEnum
import ipaddress
import logging
import socket
import struct
import zlib

import numpy as np

from filePath import lockedWrite
from Spu.eventModel import (
    DOI_MAX,
    N_BOUNDARIES,
    N_CRYSTALS,
    N_MODULES,
    RAW_MAX,
    CommandError,
    PacketError,
    SinglesRecord,
    SpuError,
    checkIds,
)
from Spu.histogram import HistMode

logger = logging.getLogger("SPULogger")

PACKET_SIZE = 16
MAX_PAYLOAD = 1472
PACKETS_PER_DATAGRAM = MAX_PAYLOAD // PACKET_SIZE

PT_REGULAR = 0x01
PT_FLOOD_OFFLINE = 0x02
PT_ENERGY_OFFLINE = 0x03
CHUNK_FLOOD = 0x10
CHUNK_ENERGY = 0x11
STATUS_REPLY = 0x20

PACKET_FORMAT = ">BBHBHQB"
PACKET_DTYPE = np.dtype(
    [
        ("type", "u1"),
        ("addr", "u1"),
        ("word", ">u2"),
        ("b4", "u1"),
        ("value", ">u2"),
        ("time", ">u8"),
        ("reserved", "u1"),
    ]
)

CHUNK_HEADER = "<BBHH"
CHUNK_HEADER_SIZE = struct.calcsize(CHUNK_HEADER)
MAX_CHUNK_BINS = (MAX_PAYLOAD - CHUNK_HEADER_SIZE) // 2

STATUS_FIELDS = (
    "ingested",
    "packaged",
    "window_rejected",
    "zero_sum",
    "underflow",
    "fifo_dropped",
    "histogrammed",
    "hist_terminated",
    "hist_inactive",
)
STATUS_FORMAT = f"<BB{len(STATUS_FIELDS)}Q"

ETH_HEADER_SIZE = 14
ETH_TYPE_IP4 = 0x0800
ETH_MIN_FRAME = 60  # without FCS
IP4_HEADER_SIZE = 20
IP4_TYPE_UDP = 17
IP4_DF_FLAG = 0x4000
UDP_HEADER_SIZE = 8
FCS_SIZE = 4


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class RawPositionRecord:
    module_id: int
    block_id: int
    x: int
    y: int
    doi: int
    time_ps: int

    def __post_init__(self):
        checkIds(self.module_id, self.block_id)
        if not (0 <= self.x <= RAW_MAX and 0 <= self.y <= RAW_MAX and 0 <= self.doi <= DOI_MAX):
            raise PacketError(f"raw position record out of range: {self}")


@dataclass(frozen=True)
class EnergyRecord:
    module_id: int
    block_id: int
    crystal: int
    doi: int
    raw_energy: int
    time_ps: int

    def __post_init__(self):
        checkIds(self.module_id, self.block_id)
        if not (0 <= self.crystal < N_CRYSTALS and 0 <= self.doi <= DOI_MAX and 0 <= self.raw_energy < 1 << 19):
            raise PacketError(f"energy record out of range: {self}")


def addressingByte(moduleId, blockId):
    return (moduleId << 4) | (blockId << 2)


def encodePacket(rec):
    addr = addressingByte(rec.module_id, rec.block_id)
    if isinstance(rec, SinglesRecord):
        fields = (PT_REGULAR, addr, rec.crystal, rec.doi << 4, rec.energy_kev)
    elif isinstance(rec, RawPositionRecord):
        fields = (PT_FLOOD_OFFLINE, addr, rec.x, (rec.doi << 4) | (rec.y >> 8), (rec.y & 0xFF) << 8)
    elif isinstance(rec, EnergyRecord):
        fields = (
            PT_ENERGY_OFFLINE,
            addr,
            rec.crystal,
            (rec.doi << 4) | (rec.raw_energy >> 16),
            rec.raw_energy & 0xFFFF,
        )
    else:
        raise PacketError(f"cannot encode {type(rec).__name__}")
    return struct.pack(PACKET_FORMAT, *fields, rec.time_ps, 0)


def decodePacket(data):
    if len(data) != PACKET_SIZE:
        raise PacketError(f"packet is {len(data)} bytes, expected {PACKET_SIZE}")
    ptype, addr, word, b4, value, time, reserved = struct.unpack(PACKET_FORMAT, data)
    if ptype not in (PT_REGULAR, PT_FLOOD_OFFLINE, PT_ENERGY_OFFLINE):
        raise PacketError(f"unknown packet type 0x{ptype:02X}")
    if addr & 0x03 or reserved:
        raise PacketError("reserved bits set")
    moduleId, blockId, doi = addr >> 4, (addr >> 2) & 0x03, b4 >> 4
    if moduleId >= N_MODULES:
        raise PacketError(f"module id {moduleId} outside 0..{N_MODULES - 1}")
    if ptype == PT_REGULAR:
        if b4 & 0x0F:
            raise PacketError("reserved DOI nibble set")
        if word >= N_CRYSTALS:
            raise PacketError(f"crystal id {word} outside 0..{N_CRYSTALS - 1}")
        return SinglesRecord(moduleId, blockId, word, doi, value, time)
    if ptype == PT_FLOOD_OFFLINE:
        if b4 & 0x0E or value & 0xFF:
            raise PacketError("reserved bits set")
        if word > RAW_MAX:
            raise PacketError(f"raw x {word} outside 0..{RAW_MAX}")
        return RawPositionRecord(moduleId, blockId, word, ((b4 & 1) << 8) | (value >> 8), doi, time)
    if b4 & 0x08:
        raise PacketError("reserved bits set")
    if word >= N_CRYSTALS:
        raise PacketError(f"crystal id {word} outside 0..{N_CRYSTALS - 1}")
    return EnergyRecord(moduleId, blockId, word, doi, ((b4 & 0x07) << 16) | value, time)


def _packets(ptype, moduleIds, blockIds, times):
    out = np.zeros(len(times), dtype=PACKET_DTYPE)
    out["type"] = ptype
    out["addr"] = (np.asarray(moduleIds, dtype=np.uint8) << 4) | (np.asarray(blockIds, dtype=np.uint8) << 2)
    out["time"] = times
    return out


def packRegular(moduleIds, blockIds, crystals, dois, energies, times):
    out = _packets(PT_REGULAR, moduleIds, blockIds, times)
    out["word"] = crystals
    out["b4"] = np.asarray(dois, dtype=np.uint8) << 4
    out["value"] = energies
    return out


def packFloodOffline(moduleIds, blockIds, x, y, dois, times):
    y = np.asarray(y, dtype=np.int64)
    out = _packets(PT_FLOOD_OFFLINE, moduleIds, blockIds, times)
    out["word"] = x
    out["b4"] = (np.asarray(dois, dtype=np.int64) << 4) | (y >> 8)
    out["value"] = (y & 0xFF) << 8
    return out


def packEnergyOffline(moduleIds, blockIds, crystals, dois, rawEnergy, times):
    raw = np.asarray(rawEnergy, dtype=np.int64)
    out = _packets(PT_ENERGY_OFFLINE, moduleIds, blockIds, times)
    out["word"] = crystals
    out["b4"] = (np.asarray(dois, dtype=np.int64) << 4) | (raw >> 16)
    out["value"] = raw & 0xFFFF
    return out


def decodePackets(buffer):
    """Whole 16-byte packets of buffer as a PACKET_DTYPE view plus a validity mask
    applying the same checks as decodePacket. Trailing bytes are ignored."""
    whole = len(buffer) // PACKET_SIZE * PACKET_SIZE
    p = np.frombuffer(buffer, dtype=PACKET_DTYPE, count=whole // PACKET_SIZE)
    ptype, b4 = p["type"], p["b4"]
    regular = ptype == PT_REGULAR
    flood = ptype == PT_FLOOD_OFFLINE
    energy = ptype == PT_ENERGY_OFFLINE
    valid = (regular | flood | energy) & (p["addr"] & 0x03 == 0) & (p["reserved"] == 0)
    valid &= (p["addr"] >> 4) < N_MODULES
    valid &= ~regular | ((b4 & 0x0F == 0) & (p["word"] < N_CRYSTALS))
    valid &= ~flood | ((b4 & 0x0E == 0) & (p["value"] & 0xFF == 0) & (p["word"] <= RAW_MAX))
    valid &= ~energy | ((b4 & 0x08 == 0) & (p["word"] < N_CRYSTALS))
    return p, valid


def floodPositions(p):
    # (x, y) of flood-offline packets
    return p["word"].astype(np.int64), ((p["b4"].astype(np.int64) & 1) << 8) | (p["value"] >> 8)


def energyRaw(p):
    return ((p["b4"].astype(np.int64) & 0x07) << 16) | p["value"]


# ---------------------------------------------------------------- frames


class FrameError(SpuError):
    pass


class FrameTruncated(FrameError):
    pass


class BadEthertype(FrameError):
    pass


class BadIpHeader(FrameError):
    pass


class BadIpChecksum(FrameError):
    pass


class UdpLengthMismatch(FrameError):
    pass


class BadUdpChecksum(FrameError):
    pass


class BadFcs(FrameError):
    pass


def _mac(value):
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    return bytes.fromhex(value.replace(":", "").replace("-", ""))


def _ip(value):
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    return ipaddress.IPv4Address(value).packed


@dataclass(frozen=True)
class Addressing:
    srcMac: bytes = b"\x02\x00\x00\x00\x00\x01"
    dstMac: bytes = b"\x02\x00\x00\x00\x00\xfe"
    srcIp: bytes = b"\xc0\xa8\x01\x0a"
    dstIp: bytes = b"\xc0\xa8\x01\x01"
    srcPort: int = 5001
    dstPort: int = 5000
    ttl: int = 64
    udpChecksum: bool = True

    def __post_init__(self):
        for name, conv, size in (("srcMac", _mac, 6), ("dstMac", _mac, 6), ("srcIp", _ip, 4), ("dstIp", _ip, 4)):
            value = conv(getattr(self, name))
            if len(value) != size:
                raise FrameError(f"{name} must be {size} bytes")
            object.__setattr__(self, name, value)


def internetChecksum(data, start=0):
    # Ones' complement of the ones' complement sum of big-endian 16-bit words.
    if len(data) & 1:
        data = bytes(data) + b"\x00"
    total = start + int(np.frombuffer(bytes(data), dtype=">u2").sum(dtype=np.uint64))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def ipv4Header(addressing, payloadLen, ident=0):
    hdr = bytearray(
        struct.pack(
            "!BBHHHBBH4s4s",
            0x45,  # version 4, IHL 5
            0,
            IP4_HEADER_SIZE + payloadLen,
            ident & 0xFFFF,
            IP4_DF_FLAG,
            addressing.ttl,
            IP4_TYPE_UDP,
            0,
            addressing.srcIp,
            addressing.dstIp,
        )
    )
    struct.pack_into("!H", hdr, 10, internetChecksum(hdr))
    return bytes(hdr)


def udpChecksum(srcIp, dstIp, segment):
    pseudo = srcIp + dstIp + struct.pack("!BBH", 0, IP4_TYPE_UDP, len(segment))
    value = internetChecksum(pseudo + segment)
    # 0 means "no checksum" on the wire.
    return value or 0xFFFF


def fcs(frame):
    # Ethernet CRC-32 (reflected, polynomial 0x04C11DB7), sent least significant byte first.
    return struct.pack("<I", zlib.crc32(frame) & 0xFFFFFFFF)


def buildFrame(payload, addressing=Addressing(), ident=0, withFcs=False):
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    udpLen = UDP_HEADER_SIZE + len(payload)
    segment = bytearray(struct.pack("!HHHH", addressing.srcPort, addressing.dstPort, udpLen, 0) + payload)
    if addressing.udpChecksum:
        struct.pack_into("!H", segment, 6, udpChecksum(addressing.srcIp, addressing.dstIp, bytes(segment)))
    frame = (
        addressing.dstMac
        + addressing.srcMac
        + struct.pack("!H", ETH_TYPE_IP4)
        + ipv4Header(addressing, udpLen, ident)
        + bytes(segment)
    )
    frame = frame.ljust(ETH_MIN_FRAME, b"\x00")
    return frame + fcs(frame) if withFcs else frame


def parseFrame(frame, withFcs=False):
    frame = bytes(frame)
    if withFcs:
        if len(frame) < ETH_MIN_FRAME + FCS_SIZE:
            raise FrameTruncated(f"frame of {len(frame)} bytes is shorter than the Ethernet minimum")
        if fcs(frame[:-FCS_SIZE]) != frame[-FCS_SIZE:]:
            raise BadFcs("frame check sequence mismatch")
        frame = frame[:-FCS_SIZE]
    if len(frame) < ETH_HEADER_SIZE + IP4_HEADER_SIZE:
        raise FrameTruncated(f"frame of {len(frame)} bytes has no room for the IPv4 header")
    (ethertype,) = struct.unpack_from("!H", frame, 12)
    if ethertype != ETH_TYPE_IP4:
        raise BadEthertype(f"ethertype 0x{ethertype:04X} is not IPv4")
    ip = frame[ETH_HEADER_SIZE : ETH_HEADER_SIZE + IP4_HEADER_SIZE]
    verIhl, _, totalLen, _, flagsFrag, _, proto, _, srcIp, dstIp = struct.unpack("!BBHHHBBH4s4s", ip)
    if verIhl != 0x45:
        raise BadIpHeader(f"version/IHL byte 0x{verIhl:02X}, only IPv4 without options is supported")
    if internetChecksum(ip) != 0:
        raise BadIpChecksum("IPv4 header checksum mismatch")
    if proto != IP4_TYPE_UDP:
        raise BadIpHeader(f"IP protocol {proto} is not UDP")
    if flagsFrag & 0x3FFF:
        raise BadIpHeader("fragmented datagrams are not supported")
    if totalLen < IP4_HEADER_SIZE + UDP_HEADER_SIZE:
        raise BadIpHeader(f"IPv4 total length {totalLen} too small for UDP")
    if ETH_HEADER_SIZE + totalLen > len(frame):
        raise FrameTruncated(f"IPv4 total length {totalLen} exceeds the frame")
    segment = frame[ETH_HEADER_SIZE + IP4_HEADER_SIZE : ETH_HEADER_SIZE + totalLen]
    _, _, udpLen, checksum = struct.unpack_from("!HHHH", segment)
    if udpLen != len(segment):
        raise UdpLengthMismatch(f"UDP length {udpLen} but IPv4 carries {len(segment)} bytes")
    if checksum and internetChecksum(srcIp + dstIp + struct.pack("!BBH", 0, IP4_TYPE_UDP, udpLen) + segment):
        raise BadUdpChecksum("UDP checksum mismatch")
    return segment[UDP_HEADER_SIZE:]


def writeCapture(frames, path):
    return lockedWrite(path, b"".join(struct.pack("<I", len(f)) + bytes(f) for f in frames))


def readCapture(path):
    with open(path, "rb") as f:
        data = f.read()
    offset = 0
    while offset < len(data):
        if offset + 4 > len(data):
            raise FrameTruncated(f"{path}: truncated length prefix at byte {offset}")
        (size,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + size > len(data):
            raise FrameTruncated(f"{path}: frame at byte {offset} runs past the end of the file")
        yield data[offset : offset + size]
        offset += size


# ---------------------------------------------------------------- uplink


def batchDatagrams(packetBytes, maxPayload=MAX_PAYLOAD):
    """Splits concatenated 16-byte packets into datagram payloads of whole packets."""
    packetBytes = bytes(packetBytes)
    if len(packetBytes) % PACKET_SIZE:
        raise PacketError(f"{len(packetBytes)} bytes is not a whole number of packets")
    step = maxPayload // PACKET_SIZE * PACKET_SIZE
    return [packetBytes[i : i + step] for i in range(0, len(packetBytes), step)]


@dataclass
class StreamAccounting:
    packets: int = 0
    payloadBytes: int = 0
    datagrams: int = 0
    droppedDatagrams: int = 0
    droppedPackets: int = 0

    def rates(self, elapsedSeconds):
        # MB = 10^6 bytes, Mbps = 10^6 bits per second
        perSecond = self.payloadBytes / elapsedSeconds
        return {
            "packets_per_s": self.packets / elapsedSeconds,
            "MB_per_s": perSecond / 1e6,
            "Mbps": perSecond * 8 / 1e6,
        }


class Uplink:
    """Sends singles in whole-packet datagrams plus readout/status datagrams through `send`.

    dropEvery > 0 discards every N-th singles datagram before it reaches `send`.
    """

    def __init__(self, send, maxPayload=MAX_PAYLOAD, dropEvery=0):
        self.send = send
        self.maxPayload = maxPayload
        self.dropEvery = dropEvery
        self.accounting = StreamAccounting()
        self.controlDatagrams = 0

    def sendPackets(self, packets):
        if isinstance(packets, np.ndarray):
            packets = packets.tobytes()
        for payload in batchDatagrams(packets, self.maxPayload):
            count = len(payload) // PACKET_SIZE
            acc = self.accounting
            acc.datagrams += 1
            if self.dropEvery and acc.datagrams % self.dropEvery == 0:
                acc.droppedDatagrams += 1
                acc.droppedPackets += count
                continue
            acc.packets += count
            acc.payloadBytes += len(payload)
            self.send(payload)

    def sendControl(self, payload):
        self.controlDatagrams += 1
        self.send(payload)


class UdpSink:
    def __init__(self, host, port):
        self.peer = (host, port)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def __call__(self, payload):
        self.sock.sendto(payload, self.peer)

    def close(self):
        self.sock.close()


class FrameSink:
    """Offline uplink: wraps each datagram into a full Ethernet frame with FCS."""

    def __init__(self, addressing=Addressing()):
        self.addressing = addressing
        self.frames = []

    def __call__(self, payload):
        self.frames.append(buildFrame(payload, self.addressing, ident=len(self.frames), withFcs=True))

    def save(self, path):
        return writeCapture(self.frames, path)


# ---------------------------------------------------------------- readout / status


@dataclass(frozen=True)
class HistChunk:
    module_id: int
    block_id: int
    mode: HistMode
    index: int
    bins: np.ndarray = field(compare=False)


def encodeHistChunks(moduleId, blockId, mode, stream, chunkBins=512):
    if not 1 <= chunkBins <= MAX_CHUNK_BINS:
        raise CommandError(f"chunk size {chunkBins} outside 1..{MAX_CHUNK_BINS}")
    ctype = CHUNK_FLOOD if HistMode(mode) is HistMode.FLOOD else CHUNK_ENERGY
    addr = addressingByte(moduleId, blockId)
    stream = np.asarray(stream)
    out = []
    for index, start in enumerate(range(0, stream.size, chunkBins)):
        bins = stream[start : start + chunkBins]
        out.append(struct.pack(CHUNK_HEADER, ctype, addr, index, bins.size) + bins.astype("<u2").tobytes())
    return out


def decodeHistChunk(data):
    if len(data) < CHUNK_HEADER_SIZE:
        raise PacketError(f"chunk of {len(data)} bytes has no header")
    ctype, addr, index, count = struct.unpack_from(CHUNK_HEADER, data)
    if ctype not in (CHUNK_FLOOD, CHUNK_ENERGY):
        raise PacketError(f"unknown chunk type 0x{ctype:02X}")
    if len(data) != CHUNK_HEADER_SIZE + 2 * count:
        raise PacketError(f"chunk declares {count} bins but carries {(len(data) - CHUNK_HEADER_SIZE) / 2}")
    mode = HistMode.FLOOD if ctype == CHUNK_FLOOD else HistMode.ENERGY
    bins = np.frombuffer(data, dtype="<u2", offset=CHUNK_HEADER_SIZE)
    return HistChunk(addr >> 4, (addr >> 2) & 0x03, mode, index, bins)


def encodeStatus(moduleId, blockId, counters):
    values = [int(counters[name]) for name in STATUS_FIELDS]
    return struct.pack(STATUS_FORMAT, STATUS_REPLY, addressingByte(moduleId, blockId), *values)


def decodeStatus(data):
    if len(data) != struct.calcsize(STATUS_FORMAT):
        raise PacketError(f"status reply of {len(data)} bytes")
    _, addr, *values = struct.unpack(STATUS_FORMAT, data)
    return addr >> 4, (addr >> 2) & 0x03, dict(zip(STATUS_FIELDS, values))


# ---------------------------------------------------------------- downlink


class Opcode(IntEnum):
    SET_MODE = 0x01
    SET_ENERGY_WINDOW = 0x02
    LOAD_BOUNDARY_CLT_LINE = 0x03
    LOAD_PEAK_ENTRY = 0x04
    LOAD_TIME_ENTRY = 0x05
    HIST_START = 0x06
    HIST_READ = 0x07
    HIST_RESET = 0x08
    STATUS = 0x09


PAYLOAD_FORMATS = {
    Opcode.SET_MODE: "<B",
    Opcode.SET_ENERGY_WINDOW: "<HH",
    Opcode.LOAD_BOUNDARY_CLT_LINE: f"<BH{N_BOUNDARIES}H",
    Opcode.LOAD_PEAK_ENTRY: "<HH",
    Opcode.LOAD_TIME_ENTRY: "<Hi",
    Opcode.HIST_START: "<",
    Opcode.HIST_READ: "<",
    Opcode.HIST_RESET: "<",
    Opcode.STATUS: "<",
}
COMMAND_HEADER = "<BBBH"
COMMAND_HEADER_SIZE = struct.calcsize(COMMAND_HEADER)
ALL_BLOCKS = 0xFF
N_MODES = 5


@dataclass(frozen=True)
class CommandPacket:
    opcode: Opcode
    module_id: int
    block_id: int
    payload: bytes = b""

    def fields(self):
        fmt = PAYLOAD_FORMATS[self.opcode]
        if len(self.payload) != struct.calcsize(fmt):
            raise CommandError(
                f"{self.opcode.name} payload is {len(self.payload)} bytes, expected {struct.calcsize(fmt)}"
            )
        return struct.unpack(fmt, self.payload)

    def validate(self):
        values = self.fields()
        if self.block_id != ALL_BLOCKS and not 0 <= self.block_id < 4:
            raise CommandError(f"block id {self.block_id} is neither 0..3 nor 0x{ALL_BLOCKS:02X}")
        if self.opcode is Opcode.SET_MODE and values[0] >= N_MODES:
            raise CommandError(f"mode code {values[0]} outside 0..{N_MODES - 1}")
        if self.opcode is Opcode.SET_ENERGY_WINDOW and values[0] > values[1]:
            raise CommandError(f"energy window low {values[0]} > high {values[1]}")
        if self.opcode is Opcode.LOAD_BOUNDARY_CLT_LINE and (values[0] > 1 or values[1] > RAW_MAX):
            raise CommandError(f"boundary line direction {values[0]} / line {values[1]} out of range")
        if self.opcode in (Opcode.LOAD_PEAK_ENTRY, Opcode.LOAD_TIME_ENTRY) and values[0] >= N_CRYSTALS:
            raise CommandError(f"crystal id {values[0]} outside 0..{N_CRYSTALS - 1}")
        if self.opcode is Opcode.LOAD_PEAK_ENTRY and values[1] == 0:
            raise CommandError("photopeak entry must be > 0")
        return values

    def blocks(self):
        return range(4) if self.block_id == ALL_BLOCKS else (self.block_id,)


def makeCommand(opcode, moduleId, blockId, *values):
    opcode = Opcode(opcode)
    return CommandPacket(opcode, moduleId, blockId, struct.pack(PAYLOAD_FORMATS[opcode], *values))


def encodeCommand(cmd):
    return struct.pack(COMMAND_HEADER, cmd.opcode, cmd.module_id, cmd.block_id, len(cmd.payload)) + cmd.payload


def parseCommands(datagram):
    """Datagram -> (valid commands, number NAKed). Never raises."""
    commands, naks, offset = [], 0, 0
    datagram = bytes(datagram)
    while offset < len(datagram):
        if offset + COMMAND_HEADER_SIZE > len(datagram):
            logger.warning(f"Truncated command header at byte {offset}")
            naks += 1
            break
        opcode, moduleId, blockId, size = struct.unpack_from(COMMAND_HEADER, datagram, offset)
        offset += COMMAND_HEADER_SIZE
        payload = datagram[offset : offset + size]
        offset += size
        try:
            if len(payload) != size:
                raise CommandError(f"payload truncated ({len(payload)} of {size} bytes)")
            try:
                opcode = Opcode(opcode)
            except ValueError:
                raise CommandError(f"unknown opcode 0x{opcode:02X}")
            cmd = CommandPacket(opcode, moduleId, blockId, payload)
            cmd.validate()
        except CommandError as e:
            logger.warning(f"NAK: {e}")
            naks += 1
            continue
        commands.append(cmd)
    return commands, naks


@dataclass
class DownlinkStats:
    commands: int = 0
    naks: int = 0
    ignored: int = 0


def receiveDownlink(datagram, handler, stats=None):
    """Parses one downlink datagram and dispatches each command to handler(cmd), which returns
    the reply datagrams it produced. Malformed or rejected commands count as NAKs."""
    stats = stats if stats is not None else DownlinkStats()
    commands, naks = parseCommands(datagram)
    stats.naks += naks
    replies = []
    for cmd in commands:
        try:
            result = handler(cmd)
        except SpuError as e:
            logger.warning(f"NAK {cmd.opcode.name}: {e}")
            stats.naks += 1
            continue
        if result is None:
            stats.ignored += 1
            continue
        stats.commands += 1
        replies.extend(result)
    return replies
