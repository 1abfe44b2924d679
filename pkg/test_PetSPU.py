from PetSPU import SinglesProcessor, app, applyConfigFile, checkSettings, configFromSettings, loadSettings
from Spu.corrections import PeakLut, savePeakLut
from Spu.eventModel import ChannelIntegrals, RawEvent, eventsToArray, writeEvents
from Spu.pipeline import Disposition, Mode
from Spu.transport import ALL_BLOCKS, Opcode, encodeCommand, makeCommand, parseFrame, readCapture
import PetSPU
import unittest, json, pytest

try:
    from settings import options
except:
    from default_settings import options


def centreEvents(count, block=0, value=500):
    return eventsToArray([RawEvent(0, block, ChannelIntegrals(*[value] * 8), 1000 + n) for n in range(count)])


class TestSettings(unittest.TestCase):
    def test_settings(self):
        # Verify settings file can be loaded properly
        for x in (options["offline"], options["live"]):
            if "batchSize" in x:
                self.assertEqual(type(x["batchSize"]), int)
        self.assertEqual(type(options["offline"]["udpChecksum"]), bool)
        self.assertEqual(type(options["offline"]["linkCreditPerEvent"]), float)
        liveChk = options["live"].copy()
        liveChk["asdf"] = "testfail"
        with self.assertRaises(Exception):
            loadSettings(options["offline"], liveChk, "live")

    def test_profiles(self):
        offline = loadSettings(options["offline"], {"batchSize": 7}, "offline")
        live = loadSettings(options["offline"], {"batchSize": 7}, "live")
        self.assertEqual(offline["batchSize"], options["offline"]["batchSize"])
        self.assertEqual(live["batchSize"], 7)

    def test_check_settings(self):
        for key, value in (
            ("energyWindow", [700, 300]),
            ("histChunkBins", 734),
            ("energyScaleShift", 12),
            ("mode", "coincidence"),
            ("moduleId", 12),
            ("linkCreditPerEvent", 0.0),
        ):
            bad = options["offline"].copy()
            bad[key] = value
            with self.assertRaises(Exception):
                checkSettings(bad)


def test_config_file(tmp_path):
    path = tmp_path / "spu.conf"
    path.write_text("mode=flood-offline\nenergyWindow=400,600\nudpChecksum=no\nfifoDepth=64\n")
    merged = applyConfigFile(options["offline"], str(path))
    assert merged["mode"] == "flood-offline"
    assert merged["energyWindow"] == [400, 600]
    assert merged["udpChecksum"] is False
    assert merged["fifoDepth"] == 64
    path.write_text("fifoDeph=64\n")
    with pytest.raises(Exception):
        applyConfigFile(options["offline"], str(path))
    path.write_text("fifoDepth=lots\n")
    with pytest.raises(Exception):
        applyConfigFile(options["offline"], str(path))


def test_config_from_settings(tmp_path):
    settings = options["offline"].copy()
    lutPath = str(tmp_path / "peaks.lut")
    savePeakLut(PeakLut.uniform(3000), lutPath)
    settings.update(mode="energy-online", energyWindow=[100, 900], peakLutPath=lutPath)
    cfg = configFromSettings(settings)
    assert cfg.mode is Mode.ENERGY_ONLINE
    assert (cfg.window.low_kev, cfg.window.high_kev) == (100, 900)
    assert all(lut.peaks[0] == 3000 for lut in cfg.peakLuts)


def test_run_file_writes_frames(tmp_path):
    settings = options["offline"].copy()
    settings["batchSize"] = 100
    eventPath = str(tmp_path / "events.bin")
    writeEvents(centreEvents(250), eventPath)
    processor = SinglesProcessor(settings)
    disp = processor.runFile(eventPath)
    assert (disp == Disposition.PACKAGED).all()
    capture = processor.saveCapture(str(tmp_path / "capture.bin"))
    payloads = [parseFrame(f, withFcs=True) for f in readCapture(capture)]
    assert sum(len(p) for p in payloads) == 250 * 16
    processor.close()


def test_send_callback_and_commands():
    sent = []
    processor = SinglesProcessor(options["offline"], send=sent.append)
    processor.command(encodeCommand(makeCommand(Opcode.SET_MODE, 0, ALL_BLOCKS, Mode.FLOOD_ONLINE.code)))
    processor.command(encodeCommand(makeCommand(Opcode.HIST_START, 0, 0)))
    disp = processor.runEvents(centreEvents(5))
    assert (disp == Disposition.HISTOGRAMMED).all()
    replies = processor.command(encodeCommand(makeCommand(Opcode.STATUS, 0, 0)))
    assert sent[-1] == replies[0]
    processor.close()


class TestMonitor(unittest.TestCase):
    def setUp(self):
        PetSPU.processor = SinglesProcessor(options["offline"])
        self.client = app.test_client()

    def tearDown(self):
        PetSPU.processor.close()
        PetSPU.processor = None

    def test_status(self):
        PetSPU.processor.runEvents(centreEvents(3, block=1))
        res = self.client.get("/status")
        self.assertEqual(res.status_code, 200)
        body = res.get_json()
        self.assertEqual(body["mode"], "regular")
        self.assertEqual(body["blocks"][1]["packaged"], 3)

    def test_command(self):
        res = self.client.post("/", data=encodeCommand(makeCommand(Opcode.STATUS, 0, ALL_BLOCKS)))
        self.assertEqual(res.status_code, 200)
        self.assertEqual(res.mimetype, "application/json")
        self.assertEqual(res.get_json(), {"replies": 4, "naks": 0})

    def test_bad_command(self):
        res = self.client.post("/", data=encodeCommand(makeCommand(Opcode.HIST_START, 0, 0)))
        self.assertEqual(res.status_code, 400)
        self.assertEqual(json.loads(res.data)["naks"], 1)
