import os
from filelock import FileLock, Timeout


def filePath():
    # Get file path
    return os.path.dirname(os.path.abspath(__file__))


def fileName(fn):
    # Get file name
    return os.path.basename(fn)


def ensureDir(path):
    # Creates the directory (and parents) if it doesn't exist yet and returns it.
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def lockedWrite(path, data, seconds=4):
    """Writes bytes (or text) to path while holding path.lock so a reader or a second
    writer never sees a half written LUT, event file or export."""
    ensureDir(os.path.dirname(os.path.abspath(path)))
    lock = FileLock(f"{path}.lock")
    try:
        with lock.acquire(timeout=seconds):
            mode = "w" if isinstance(data, str) else "wb"
            with open(path, mode) as f:
                f.write(data)
    except Timeout:
        raise Timeout(
            f"Time exceeded {seconds} seconds. Another process may be locking {path}."
        )
    return path
