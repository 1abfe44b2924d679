from flask import Flask, request, jsonify
from waitress import serve
from dotenv import dotenv_values
from getEndpoints import getEndpoints
import logging, socket, sys, threading

import numpy as np

try:
    from settings import options
except ModuleNotFoundError:
    from default_settings import options

from Spu.corrections import EnergyWindow, loadPeakLut, loadTimeLut
from Spu.crystalLut import loadBoundaryClt
from Spu.eventModel import N_BLOCKS, readEvents
from Spu.histogram import MAX_SCALE_SHIFT
from Spu.pipeline import Mode, Spu, SpuConfig
from Spu.transport import MAX_CHUNK_BINS, Addressing, FrameSink, UdpSink, Uplink


# Load settings
def loadSettings(base, override, using):
    settings = base.copy()
    for i in override.keys():
        if i not in settings:
            err = f"offline/live setting name discrepancy: '{i}' item in 'live' settings. Please fix the spelling or remove it from live settings."
            raise Exception(err)
    if using != "offline":
        settings.update(override)
    return settings


def checkSettings(settings):
    # Rejects settings that conflict or that the hardware model cannot represent.
    low, high = settings["energyWindow"]
    if low > high:
        raise Exception(f"energyWindow low {low} is above high {high}.")
    if settings["fifoDepth"] < 1:
        raise Exception("fifoDepth must be at least 1.")
    if not 1 <= settings["histChunkBins"] <= MAX_CHUNK_BINS:
        raise Exception(f"histChunkBins must be within 1..{MAX_CHUNK_BINS} to fit one datagram.")
    if not 0 <= settings["energyScaleShift"] <= MAX_SCALE_SHIFT:
        raise Exception(f"energyScaleShift must be within 0..{MAX_SCALE_SHIFT}.")
    if settings["linkCreditPerEvent"] <= 0:
        raise Exception("linkCreditPerEvent must be > 0.")
    if settings["mode"] not in [m.value for m in Mode]:
        raise Exception(f"Unknown mode '{settings['mode']}'. Use one of {[m.value for m in Mode]}.")
    if not 0 <= settings["moduleId"] <= 11:
        raise Exception("moduleId must be within 0..11.")
    return settings


def coerceSetting(default, value):
    # Converts a key=value string to the type of the default setting.
    if isinstance(default, bool):
        if value.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if value.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"'{value}' is not a boolean")
    if isinstance(default, list):
        return [type(default[0])(v) for v in value.replace(",", " ").split()]
    return type(default)(value)


def applyConfigFile(settings, path):
    """Overrides settings with a key=value file (dotenv syntax). Unknown keys raise."""
    values = dotenv_values(path)
    merged = settings.copy()
    for key, value in values.items():
        if key not in settings:
            raise Exception(f"Unknown setting '{key}' in {path}. Please fix the spelling or remove it.")
        try:
            merged[key] = coerceSetting(settings[key], value or "")
        except ValueError as e:
            raise Exception(f"Bad value for '{key}' in {path}: {e}")
    return checkSettings(merged)


settings = checkSettings(loadSettings(options["offline"], options["live"], options["using"]))

# Create a logger
logger = logging.getLogger("SPULogger")

# Set the log level to include all messages
logger.setLevel(logging.DEBUG)

# Create a file handler at the configured level
handler = logging.FileHandler(settings["logFile"])
handler.setLevel(settings["logLevel"])

# Create a formatter and add it to the handler
formatter = logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
handler.setFormatter(formatter)

# Add the handler to the logger
logger.addHandler(handler)


def configFromSettings(settings):
    """SpuConfig for the settings. LUT and CLT files apply to all four blocks."""
    kwargs = {
        "moduleId": settings["moduleId"],
        "mode": Mode(settings["mode"]),
        "window": EnergyWindow(*settings["energyWindow"]),
        "scaleShift": settings["energyScaleShift"],
        "alternateY": settings["alternateY"],
    }
    if settings["cltPath"]:
        kwargs["clts"] = (loadBoundaryClt(settings["cltPath"]),) * N_BLOCKS
    if settings["peakLutPath"]:
        kwargs["peakLuts"] = (loadPeakLut(settings["peakLutPath"]),) * N_BLOCKS
    if settings["timeLutPath"]:
        kwargs["timeLuts"] = (loadTimeLut(settings["timeLutPath"]),) * N_BLOCKS
    return SpuConfig(**kwargs)


def addressingFromEndpoints(endpoints, udpChecksum=True):
    return Addressing(
        srcMac=endpoints["src_mac"],
        dstMac=endpoints["dst_mac"],
        srcIp=endpoints["src_ip"],
        dstIp=endpoints["dst_ip"],
        srcPort=endpoints["downlink_port"],
        dstPort=endpoints["uplink_port"],
        udpChecksum=udpChecksum,
    )


class SinglesProcessor:
    """SPU runtime: the pipeline plus its uplink sink and the downlink listener.

    live=True streams datagrams to the peer over UDP. Otherwise datagrams go to `send` when
    given, or become Ethernet frames (saved to frameCapture when set).
    """

    def __init__(self, settings=settings, endpoints=None, live=False, send=None, dropEvery=0, config=None):
        self.settings = settings
        self.endpoints = endpoints or getEndpoints("live" if live else "offline")
        self.frames = None
        if live:
            self.sink = UdpSink(self.endpoints["peer_host"], self.endpoints["uplink_port"])
        elif send is not None:
            self.sink = send
        else:
            self.sink = self.frames = FrameSink(addressingFromEndpoints(self.endpoints, settings["udpChecksum"]))
        self.uplink = Uplink(self.sink, dropEvery=dropEvery)
        self.spu = Spu(
            config or configFromSettings(settings),
            uplink=self.uplink,
            fifoDepth=settings["fifoDepth"],
            linkCreditPerEvent=settings["linkCreditPerEvent"],
            histChunkBins=settings["histChunkBins"],
            parallel=settings["parallelBlocks"],
        )
        self._stop = threading.Event()
        self._listener = None

    def runEvents(self, events, flush=True):
        # Feeds the events in batchSize slices, returns all dispositions.
        size = self.settings["batchSize"]
        out = [self.spu.processBatch(events[i : i + size]) for i in range(0, len(events), size)]
        if flush:
            self.spu.flush()
        return np.concatenate(out) if out else np.zeros(0, dtype=np.uint8)

    def runFile(self, path):
        events = readEvents(path)
        logger.info(f"Processing {len(events)} events from {path} in {self.spu.config.mode.value} mode")
        return self.runEvents(events)

    def command(self, datagram):
        return self.spu.command(datagram)

    def saveCapture(self, path=None):
        path = path or self.settings["frameCapture"]
        if self.frames is None or not path:
            return None
        self.frames.save(path)
        logger.info(f"Wrote {len(self.frames.frames)} frames to {path}")
        return path

    def startDownlink(self, host="0.0.0.0"):
        """Listens for command datagrams on the downlink port in a background thread."""
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind((host, self.endpoints["downlink_port"]))
        sock.settimeout(0.5)

        def loop():
            while not self._stop.is_set():
                try:
                    datagram, peer = sock.recvfrom(65535)
                except socket.timeout:
                    continue
                logger.info(f"Command datagram of {len(datagram)} bytes from {peer}")
                self.command(datagram)
            sock.close()

        self._listener = threading.Thread(target=loop, daemon=True)
        self._listener.start()
        logger.info(f"Downlink listening on {host}:{self.endpoints['downlink_port']}")

    def close(self):
        self._stop.set()
        if self._listener is not None:
            self._listener.join()
        self.spu.flush()
        self.spu.close()
        if isinstance(self.sink, UdpSink):
            self.sink.close()


app = Flask(__name__)
processor = None


def getProcessor():
    global processor
    if processor is None:
        processor = SinglesProcessor()
    return processor


def spuInfo():
    spu = getProcessor().spu
    print(f"***module: {spu.config.moduleId}")
    print(f"mode: {spu.config.mode.value}")
    print(f"energy window: {spu.config.window.low_kev}-{spu.config.window.high_kev} keV")
    print(f"fifo depth: {spu.fifos[0].capacity}")
    print(f"link credit per event: {spu.linkCreditPerEvent}")
    print(f"uplink: {getProcessor().endpoints['peer_host']}:{getProcessor().endpoints['uplink_port']}")
    print(f"downlink port: {getProcessor().endpoints['downlink_port']}")
    print("-------------------------------------------------")


@app.route("/status", methods=["GET"])
def status():
    return jsonify(getProcessor().spu.status())


@app.route("/", methods=["POST"])
def respond():
    logger.info(f"Received command request of {len(request.data)} bytes")
    before = getProcessor().spu.downlinkStats.naks
    replies = getProcessor().command(request.data)
    naks = getProcessor().spu.downlinkStats.naks - before
    return jsonify(replies=len(replies), naks=naks), 400 if naks else 200


if __name__ == "__main__":
    # Live unit: UDP uplink to the peer, downlink commands, monitor endpoint.
    processor = SinglesProcessor(live=True)
    spuInfo()
    processor.startDownlink()
    if len(sys.argv) > 2 and sys.argv[1] == "events":
        processor.runFile(sys.argv[2])
    try:
        serve(app, port=settings["monitorPort"], threads=1, host=settings["monitorHost"])
    finally:
        processor.close()
