from dotenv import load_dotenv
import os

DEFAULTS = {
    "SPU_PEER_HOST": "127.0.0.1",
    "SPU_UPLINK_PORT": "5000",
    "SPU_DOWNLINK_PORT": "5001",
    "SPU_SRC_MAC": "02:00:00:00:00:01",
    "SPU_DST_MAC": "02:00:00:00:00:fe",
    "SPU_SRC_IP": "192.168.1.10",
    "SPU_DST_IP": "192.168.1.1",
}


def getEndpoints(profile):
    """Retrieves the network endpoints for either the "offline" or "live" profile.
    Values come from the environment (and .env), falling back to DEFAULTS. Offline runs
    never open sockets, so the peer is always the loopback address there.
    Ex. {
        "peer_host": "127.0.0.1",
        "uplink_port": 5000,
        "downlink_port": 5001,
        "src_mac": "02:00:00:00:00:01",
        "dst_mac": "02:00:00:00:00:fe",
        "src_ip": "192.168.1.10",
        "dst_ip": "192.168.1.1",
    }"""
    load_dotenv(override=True)

    def env(key):
        return os.environ.get(key) or DEFAULTS[key]

    if profile not in ("offline", "live"):
        raise NameError("Verify the profile ('offline'/'live') is correct in settings(using:)")
    endpoints = {
        "peer_host": env("SPU_PEER_HOST") if profile == "live" else DEFAULTS["SPU_PEER_HOST"],
        "uplink_port": int(env("SPU_UPLINK_PORT")),
        "downlink_port": int(env("SPU_DOWNLINK_PORT")),
        "src_mac": env("SPU_SRC_MAC"),
        "dst_mac": env("SPU_DST_MAC"),
        "src_ip": env("SPU_SRC_IP"),
        "dst_ip": env("SPU_DST_IP"),
    }
    for key in ("uplink_port", "downlink_port"):
        if not 0 < endpoints[key] < 1 << 16:
            raise ValueError(f"{key} {endpoints[key]} is not a valid UDP port")
    return endpoints


if __name__ == "__main__":
    print(getEndpoints("live"))
