"""Operator entry point for the singles processing unit.

    spu_cli.py simulate events.bin -n 100000 --luts-dir luts
    spu_cli.py spu --events events.bin --capture uplink.cap
    spu_cli.py daq-host --capture uplink.cap --out-dir out
    spu_cli.py clt footprint --n 9 --k 529
    spu_cli.py rates --activity-uci 200
    spu_cli.py loopback --events 100000 --seed 1
    spu_cli.py bench --seconds 10

Every subcommand accepts --config <file> with key=value settings; flags win over the file.
Exit status is 0 only when every check of the subcommand passed.
"""

import argparse
import json
import logging
import os
import sys
import threading
import time

import numpy as np

import PetSPU
from generate_phantom import PhantomSpec, generateEvents, writeFile
from getEndpoints import getEndpoints
from Host.daqHost import DaqHost, buildOfflineFlood
from Spu.corrections import savePeakLut, saveTimeLut
from Spu.crystalLut import (
    countMismatches,
    decompose,
    footprint,
    jitteredClt,
    loadBoundaryClt,
    loadFullClt,
    memoryBudget,
    saveBoundaryClt,
    saveFullClt,
    uniformGridClt,
)
from Spu.eventModel import N_BLOCKS, N_CRYSTALS, SinglesRecord, SpuError
from Spu.histogram import COUNTER_MAX
from Spu.pipeline import Disposition, Mode, SpuConfig, benchmarkThroughput
from Spu.rateModel import RateParams, budgetTable
from Spu.transport import ALL_BLOCKS, Opcode, UdpSink, buildFrame, encodeCommand, makeCommand

logger = logging.getLogger("SPULogger")

SINGLE_BLOCK_FLOOR = 1_000_000
FOUR_BLOCK_FLOOR = 4_000_000


def summary(disp):
    counts = np.bincount(disp, minlength=len(Disposition))
    return {d.counter: int(counts[d]) for d in Disposition}


# ---------------------------------------------------------------- subcommands


def simulate(args, settings):
    rng = np.random.default_rng(args.seed)
    gains = delays = None
    if args.distinct:
        # Per-crystal photopeaks and TDC delays, the situation the LUTs correct.
        gains = rng.integers(3000, 5000, N_CRYSTALS)
        delays = rng.integers(-20_000, 20_000, N_CRYSTALS)
    spec = PhantomSpec(
        events=args.events,
        seed=args.seed,
        noise=args.noise,
        photopeakFraction=args.photopeak,
        moduleId=settings["moduleId"],
        gains=gains,
        timeDelays=delays,
    )
    events, _ = generateEvents(spec)
    writeFile(events, args.out)
    print(f"Wrote {len(events)} events to {args.out}")
    if args.luts_dir:
        savePeakLut(spec.peakLut(), os.path.join(args.luts_dir, "peak.lut"))
        saveTimeLut(spec.timeLut(), os.path.join(args.luts_dir, "time.lut"))
        saveBoundaryClt(decompose(uniformGridClt()), os.path.join(args.luts_dir, "boundary.clt"))
        print(f"Wrote peak.lut, time.lut and boundary.clt to {args.luts_dir}")
    return 0


def runSpu(args, settings):
    if args.mode:
        settings["mode"] = args.mode
    if args.listen:
        endpoints = getEndpoints("live")
        if args.peer:
            endpoints["peer_host"] = args.peer
        PetSPU.processor = PetSPU.SinglesProcessor(settings, endpoints=endpoints, live=True, dropEvery=args.drop_every)
        PetSPU.spuInfo()
        PetSPU.processor.startDownlink()
        if args.events:
            PetSPU.processor.runFile(args.events)
        try:
            PetSPU.serve(PetSPU.app, port=settings["monitorPort"], threads=1, host=settings["monitorHost"])
        finally:
            PetSPU.processor.close()
        return 0
    if not args.events:
        print("spu needs --events <file> or --listen")
        return 2
    processor = PetSPU.SinglesProcessor(settings, dropEvery=args.drop_every)
    disp = processor.runFile(args.events)
    capture = processor.saveCapture(args.capture)
    counts = summary(disp)
    for name, value in counts.items():
        print(f"{name}: {value}")
    acc = processor.uplink.accounting
    print(f"datagrams: {acc.datagrams} ({acc.droppedDatagrams} dropped), packets sent: {acc.packets}")
    if capture:
        print(f"capture: {capture}")
    processor.close()
    # Dispositions are exhaustive.
    return 0 if sum(counts.values()) == len(disp) else 1


def runDaqHost(args, settings):
    host = DaqHost(scaleShift=settings["energyScaleShift"], keepRecords=False)
    if args.capture:
        host.replayCapture(args.capture)
    else:
        port = args.listen or getEndpoints("live")["uplink_port"]
        print(f"Listening on UDP {port}")
        host.listen(port, duration=args.duration)
    written = host.exportAll(args.out_dir)
    print(json.dumps(host.stats.asDict(), indent=2))
    print("Wrote " + ", ".join(written))
    return 0


def runClt(args, settings):
    if args.clt_command == "footprint":
        fp = footprint(args.n, args.k)
        print(f"full CLT: {fp.full_bits:,} bits ({fp.fullMb:.2f} Mb)")
        print(f"boundary CLT: {fp.boundary_bits:,} bits ({fp.boundaryMb:.2f} Mb)")
        print(f"ratio: {float(fp.ratio):.2f}")
        if args.n == 9 and args.k == N_CRYSTALS:
            print(memoryBudget().round(3).to_string())
        return 0
    if args.clt_command == "convert":
        full = loadFullClt(args.full)
        try:
            boundary = decompose(full)
        except SpuError as e:
            print(f"Not convertible: {e}")
            return 1
        saveBoundaryClt(boundary, args.boundary)
        print(f"Wrote boundary CLT {args.boundary}")
        return 0
    if args.clt_command == "check":
        mismatches = countMismatches(loadFullClt(args.full), loadBoundaryClt(args.boundary))
        print(f"mismatches: {mismatches}")
        return 0 if mismatches == 0 else 1
    if args.clt_command == "uniform":
        full = jitteredClt(np.random.default_rng(args.jitter)) if args.jitter is not None else uniformGridClt()
        if args.full:
            saveFullClt(full, args.out)
        else:
            saveBoundaryClt(decompose(full), args.out)
        print(f"Wrote {'full' if args.full else 'boundary'} CLT {args.out}")
        return 0
    return 2


def runRates(args, settings):
    p = RateParams.fromMicroCurie(
        args.activity_uci,
        detection_efficiency=args.efficiency,
        detector_side_mm=args.side_mm,
        ring_radius_mm=args.radius_mm,
    )
    print(budgetTable(p).to_string())
    return 0


def runBench(args, settings):
    single = benchmarkThroughput(seconds=args.seconds, blocks=1, batchSize=settings["batchSize"])
    four = benchmarkThroughput(seconds=args.seconds, blocks=N_BLOCKS, parallel=True, batchSize=settings["batchSize"])
    ok = single["rate"] >= SINGLE_BLOCK_FLOOR and four["rate"] >= FOUR_BLOCK_FLOOR
    print(f"single block: {single['rate']:,.0f} events/s (floor {SINGLE_BLOCK_FLOOR:,})")
    print(f"four blocks:  {four['rate']:,.0f} events/s (floor {FOUR_BLOCK_FLOOR:,})")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# ---------------------------------------------------------------- loopback


def _frameSend(host, addressing):
    def send(payload):
        host.ingestFrame(buildFrame(payload, addressing, withFcs=True))

    return send


def _udpSession(settings, config, events, port, dropEvery):
    """Regular session over localhost UDP. Returns (processor, host, dispositions)."""
    host = DaqHost(scaleShift=settings["energyScaleShift"])
    ready = threading.Event()
    listener = threading.Thread(target=host.listen, args=(port, "127.0.0.1"), kwargs={"idleTimeout": 1.0, "ready": ready})
    listener.start()
    ready.wait(5)
    sink = UdpSink("127.0.0.1", port)
    sent = 0

    def send(payload):
        nonlocal sent
        sink(payload)
        sent += 1
        if sent % 64 == 0:
            time.sleep(0.001)

    processor = PetSPU.SinglesProcessor(settings, send=send, dropEvery=dropEvery, config=config)
    disp = processor.runEvents(events)
    listener.join()
    sink.close()
    return processor, host, disp


def runLoopback(settings, events=100_000, seed=1, useUdp=False, dropEvery=0, port=None):
    """Full SPU -> host session on a noise-free phantom. Returns (ok, report)."""
    rng = np.random.default_rng(seed)
    spec = PhantomSpec(
        events=events,
        seed=seed,
        moduleId=settings["moduleId"],
        gains=rng.integers(3000, 5000, N_CRYSTALS),
        timeDelays=rng.integers(-20_000, 20_000, N_CRYSTALS),
    )
    evs, truth = generateEvents(spec)
    config = SpuConfig(
        moduleId=spec.moduleId,
        peakLuts=(spec.peakLut(),) * N_BLOCKS,
        timeLuts=(spec.timeLut(),) * N_BLOCKS,
        scaleShift=settings["energyScaleShift"],
    )
    addressing = PetSPU.addressingFromEndpoints(getEndpoints("offline"), settings["udpChecksum"])
    checks = {}

    # Regular mode.
    if useUdp:
        processor, host, disp = _udpSession(settings, config, evs, port or getEndpoints("live")["uplink_port"], dropEvery)
    else:
        host = DaqHost(scaleShift=settings["energyScaleShift"])
        processor = PetSPU.SinglesProcessor(settings, send=_frameSend(host, addressing), dropEvery=dropEvery, config=config)
        disp = processor.runEvents(evs)
    counts = summary(disp)
    acc = processor.uplink.accounting
    received = host.stats.packets_received
    checks["dispositions exhaustive"] = sum(counts.values()) == len(evs)
    checks["decoded = packaged - lost"] = received == counts["packaged"] - acc.droppedPackets
    checks["no decode errors"] = host.stats.decode_errors == 0 and host.stats.frame_errors == 0
    singles = [r for r in host.records if isinstance(r, SinglesRecord)]
    index = (np.array([r.time_ps for r in singles], dtype=np.int64) - 1_000_000) // spec.eventSpacingPs
    crystals = np.array([r.crystal for r in singles], dtype=np.int64)
    checks["crystal ids match ground truth"] = bool(np.array_equal(crystals, truth[index]))
    checks["photopeaks at 511 keV"] = all(r.energy_kev == 511 for r in singles)

    # Flood histograms, offline on the host against online on the unit.
    offlineHost = DaqHost()
    offline = PetSPU.SinglesProcessor(
        settings, send=_frameSend(offlineHost, addressing), config=SpuConfig(moduleId=spec.moduleId, mode=Mode.FLOOD_OFFLINE)
    )
    offline.runEvents(evs)
    onlineHost = DaqHost()
    online = PetSPU.SinglesProcessor(
        settings, send=_frameSend(onlineHost, addressing), config=SpuConfig(moduleId=spec.moduleId, mode=Mode.FLOOD_ONLINE)
    )
    online.command(encodeCommand(makeCommand(Opcode.HIST_START, spec.moduleId, ALL_BLOCKS)))
    online.runEvents(evs)
    online.command(encodeCommand(makeCommand(Opcode.HIST_READ, spec.moduleId, ALL_BLOCKS)))
    agree = True
    for block in range(N_BLOCKS):
        onlineFlood = onlineHost.onlineFlood(spec.moduleId, block)
        if onlineFlood.max() >= COUNTER_MAX:
            continue
        offlineFlood, _ = buildOfflineFlood([r for r in offlineHost.records if r.block_id == block])
        agree &= bool(np.array_equal(offlineFlood, onlineFlood))
    checks["online and offline floods agree"] = agree
    for p in (processor, offline, online):
        p.close()

    report = {
        "events": len(evs),
        "dispositions": counts,
        "packets_sent": acc.packets,
        "packets_dropped": acc.droppedPackets,
        "datagrams": acc.datagrams,
        "packets_received": received,
        "decode_errors": host.stats.decode_errors,
        "checks": checks,
    }
    return all(checks.values()), report


def loopback(args, settings):
    ok, report = runLoopback(
        settings, events=args.events, seed=args.seed, useUdp=args.udp, dropEvery=args.drop_every, port=args.port
    )
    print(json.dumps(report, indent=2))
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# ---------------------------------------------------------------- argparse


def buildParser():
    parser = argparse.ArgumentParser(description="PET singles processing unit tools.")
    parser.add_argument("--config", help="key=value settings file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Write a phantom event file")
    p.add_argument("out")
    p.add_argument("-n", "--events", type=int, default=100_000)
    p.add_argument("-s", "--seed", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--photopeak", type=float, default=1.0, help="Fraction of events at the photopeak")
    p.add_argument("--distinct", action="store_true", help="Random per-crystal photopeaks and delays")
    p.add_argument("--luts-dir", help="Also write the matching peak/time LUTs and a uniform boundary CLT here")
    p.set_defaults(func=simulate)

    p = sub.add_parser("spu", help="Run the pipeline on an event file or live")
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--events", help="Event file")
    p.add_argument("--listen", action="store_true", help="Live: UDP uplink, downlink commands, monitor endpoint")
    p.add_argument("--peer", help="DAQ host address (live)")
    p.add_argument("--capture", help="Frame capture file to write (offline)")
    p.add_argument("--drop-every", type=int, default=0, help="Drop every N-th singles datagram")
    p.set_defaults(func=runSpu)

    p = sub.add_parser("daq-host", help="Receive an uplink and export flood/spectra/stats")
    p.add_argument("--listen", type=int, help="UDP port")
    p.add_argument("--capture", help="Replay a frame capture file instead of listening")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--duration", type=float, help="Seconds to listen")
    p.set_defaults(func=runDaqHost)

    p = sub.add_parser("clt", help="Crystal look-up table tools")
    clt = p.add_subparsers(dest="clt_command", required=True)
    c = clt.add_parser("footprint")
    c.add_argument("--n", type=int, default=9)
    c.add_argument("--k", type=int, default=N_CRYSTALS)
    c = clt.add_parser("convert", help="Full CLT file -> boundary CLT file")
    c.add_argument("full")
    c.add_argument("boundary")
    c = clt.add_parser("check", help="Count positions where the boundary CLT disagrees with the full CLT")
    c.add_argument("full")
    c.add_argument("boundary")
    c = clt.add_parser("uniform", help="Write a synthetic separable CLT")
    c.add_argument("out")
    c.add_argument("--jitter", type=int, help="Seed for a smoothly deformed grid")
    c.add_argument("--full", action="store_true", help="Write the full CLT instead of the boundary form")
    p.set_defaults(func=runClt)

    p = sub.add_parser("rates", help="Event-rate and bandwidth budget")
    defaults = RateParams()
    p.add_argument("--activity-uci", type=float, default=200)
    p.add_argument("--efficiency", type=float, default=defaults.detection_efficiency)
    p.add_argument("--side-mm", type=float, default=defaults.detector_side_mm)
    p.add_argument("--radius-mm", type=float, default=defaults.ring_radius_mm)
    p.set_defaults(func=runRates)

    p = sub.add_parser("loopback", help="SPU -> DAQ host session with conservation checks")
    p.add_argument("--events", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--udp", action="store_true", help="Go through localhost UDP sockets instead of in-process frames")
    p.add_argument("--port", type=int)
    p.add_argument("--drop-every", type=int, default=0)
    p.set_defaults(func=loopback)

    p = sub.add_parser("bench", help="Regular-mode throughput against the 1M/4M events/s floors")
    p.add_argument("--seconds", type=float, default=10.0)
    p.set_defaults(func=runBench)
    return parser


def main(args=None, **kwargs):
    args = buildParser().parse_args(args)
    settings = PetSPU.settings.copy()
    if args.config:
        settings = PetSPU.applyConfigFile(settings, args.config)
    try:
        return args.func(args, settings)
    except (SpuError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
