# Settings. live copies offline and overrides anything it repeats. Swap the commented "using" to switch back and forth.
options = {
    "using": "offline",
    # "using": "live",
    # Settings for offline runs (event files in, frame capture out).
    "offline": {
        # Module id (0..11) written into every packet and matched against downlink commands.
        "moduleId": 0,
        # Start-up mode: regular, flood-online, flood-offline, energy-online or energy-offline.
        "mode": "regular",
        # Accepted corrected energy in keV, inclusive [low, high].
        "energyWindow": [350, 650],
        # Raw energy >> energyScaleShift gives the spectrum bin (0..255, clamped). 0..11.
        "energyScaleShift": 4,
        # Packets each block FIFO holds before dropping the newest.
        "fifoDepth": 512,
        # Arbiter grants per ingested event. Below 1 the link is slower than the event rate and FIFOs can overflow.
        "linkCreditPerEvent": 1.0,
        # Bins per histogram readout chunk (1..733 so a chunk fits one datagram).
        "histChunkBins": 512,
        # Compute UDP checksums on built frames (0x0000 on the wire when False).
        "udpChecksum": True,
        # Events handed to the pipeline per call.
        "batchSize": 65536,
        # Use (A2 + B2) instead of (C2 + D2) for the end-2 term of y.
        "alternateY": False,
        # Boundary CLT (PCLB) applied to all four blocks. Empty uses the uniform grid.
        "cltPath": "",
        # Photopeak LUT (PPKL). Empty uses a uniform peak of 4000.
        "peakLutPath": "",
        # Time offset LUT (PTOL). Empty uses zero offsets.
        "timeLutPath": "",
        # Length prefixed Ethernet frame capture written by offline runs. Empty disables it.
        "frameCapture": "",
        # Log file and handler level for SPULogger.
        "logFile": "SPULogger.log",
        "logLevel": "INFO",
        # Monitor endpoint (GET /status, POST / with raw command bytes), live only.
        "monitorHost": "127.0.0.1",
        "monitorPort": 8080,
        # Process the four blocks of a batch on a thread pool.
        "parallelBlocks": False,
    },
    # live copies values from offline and overrides any duplicates.
    # Will raise an Exception if there are items in live that aren't in offline.
    # See descriptions above.
    "live": {
        "mode": "regular",
        "batchSize": 4096,
        "frameCapture": "",
        "parallelBlocks": True,
    },
}

if __name__ == "__main__":
    import os, filePath, shutil

    def getSettings(offline, live):
        offline = offline.copy()
        merged = offline.copy()
        merged.update(live)
        if len(merged) != len(offline):
            raise Exception("Extra variables found in live settings. Please remove or fix any typos and try again")
        return merged, offline

    def validateKeys(itemsA, itemsB, name):
        # Checks if all keys from itemA are in itemB. Then checks is any of the values are different
        status = True
        for k, v in itemsA.items():
            if k not in itemsB.keys():
                status = False
                print(f"Missing key found in settings.py {name} settings: {k}")
            elif itemsB[k] != v:
                print(f"{name} {k} setting: {itemsB[k]}, default: {v}")
        return status

    live, offline = getSettings(options["offline"], options["live"])
    if filePath.fileName(__file__) == "default_settings.py":
        try:
            from settings import options as settingsFile

            setLive, setOffline = getSettings(settingsFile["offline"], settingsFile["live"])
            if len(setOffline) > len(offline):
                raise Exception("Too many settings found in settings.py in the offline section")
            elif len(setOffline) < len(offline):
                print("Found a missing setting in offline settings")
            elif len(setLive) < len(live):
                print("Found a missing setting in live settings")
            else:
                if validateKeys(offline, setOffline, "Offline"):
                    print("--Offline settings look good")
                if validateKeys(live, setLive, "Live"):
                    print("--Live settings look good")
        except ModuleNotFoundError:
            print("No settings file found. Creating...")
            shutil.copyfile(f"{__file__}", f"{filePath.filePath() + os.sep}settings.py")
