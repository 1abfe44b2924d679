from spu_cli import main, runLoopback, summary
from Spu.pipeline import Disposition
import PetSPU
import os
import socket

import numpy as np
import pandas as pd


def test_clt_footprint(capsys):
    assert main(["clt", "footprint"]) == 0
    out = capsys.readouterr().out
    assert "full CLT: 2,621,440 bits (2.50 Mb)" in out
    assert "boundary CLT: 202,752 bits (0.19 Mb)" in out
    assert "ratio: 12.93" in out
    assert "Flood map histogram" in out


def test_clt_tools(tmp_path, capsys):
    full = str(tmp_path / "full.clt")
    boundary = str(tmp_path / "boundary.clt")
    assert main(["clt", "uniform", full, "--full", "--jitter", "3"]) == 0
    assert main(["clt", "convert", full, boundary]) == 0
    assert main(["clt", "check", full, boundary]) == 0
    assert "mismatches: 0" in capsys.readouterr().out
    other = str(tmp_path / "uniform.clt")
    main(["clt", "uniform", other])
    assert main(["clt", "check", full, other]) == 1
    # Missing file is reported, not raised.
    assert main(["clt", "check", str(tmp_path / "nope.clt"), boundary]) == 1


def test_rates(capsys):
    assert main(["rates"]) == 0
    out = capsys.readouterr().out
    assert "1.72%" in out
    assert "9.78 M/s" in out
    assert "0.82 M/s" in out
    assert "512 Mbps" in out


def test_simulate_spu_and_daq_host(tmp_path, capsys):
    events = str(tmp_path / "events.bin")
    luts = str(tmp_path / "luts")
    capture = str(tmp_path / "uplink.cap")
    out = str(tmp_path / "out")
    config = tmp_path / "spu.conf"
    config.write_text(
        f"peakLutPath={os.path.join(luts, 'peak.lut')}\n"
        f"timeLutPath={os.path.join(luts, 'time.lut')}\n"
        f"cltPath={os.path.join(luts, 'boundary.clt')}\n"
    )
    assert main(["simulate", events, "-n", "3000", "--distinct", "--luts-dir", luts]) == 0
    assert main(["--config", str(config), "spu", "--events", events, "--capture", capture]) == 0
    assert "packaged: 3000" in capsys.readouterr().out

    assert main(["--config", str(config), "spu", "--mode", "flood-offline", "--events", events, "--capture", capture]) == 0
    assert main(["daq-host", "--capture", capture, "--out-dir", out]) == 0
    assert {"flood.pgm", "spectra.csv", "stats.json"} <= set(os.listdir(out))
    spectra = pd.read_csv(os.path.join(out, "spectra.csv"))
    assert len(spectra) == 135_424
    with open(os.path.join(out, "flood.pgm"), "rb") as f:
        assert f.read(2) == b"P5"


def test_spu_needs_input(capsys):
    assert main(["spu"]) == 2


def test_summary_names_every_disposition():
    counts = summary(np.array([0, 0, 6], dtype=np.uint8))
    assert counts["packaged"] == 2 and counts["hist_terminated"] == 1
    assert set(counts) == {d.counter for d in Disposition}


def test_loopback_frames():
    ok, report = runLoopback(PetSPU.settings, events=4000, seed=2)
    assert ok, report["checks"]
    assert report["packets_received"] == report["dispositions"]["packaged"]
    assert report["decode_errors"] == 0


def test_loopback_with_drops():
    ok, report = runLoopback(PetSPU.settings, events=4000, seed=3, dropEvery=5)
    assert ok, report["checks"]
    assert report["packets_dropped"] > 0
    assert report["packets_received"] == report["dispositions"]["packaged"] - report["packets_dropped"]


def test_loopback_command(capsys):
    assert main(["loopback", "--events", "2000", "--seed", "5"]) == 0
    assert "PASS" in capsys.readouterr().out


def freePort():
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def test_loopback_over_localhost_udp():
    ok, report = runLoopback(PetSPU.settings, events=4000, seed=4, useUdp=True, port=freePort())
    assert ok, report["checks"]
    assert report["packets_sent"] == report["dispositions"]["packaged"] == 4000
    assert report["packets_received"] == report["packets_sent"]
    assert report["decode_errors"] == 0


def test_loopback_command_over_udp(capsys):
    assert main(["loopback", "--udp", "--port", str(freePort()), "--events", "2000", "--drop-every", "4"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
