"""File writes that honour simulated storage faults, plus bundle digests.

Two marker files model shared-storage trouble without root privileges:

* ``.liquid-quota`` holds a byte budget for the directory tree it sits in;
  a write that would push the tree past the budget fails with ENOSPC.
* ``.liquid-unreachable`` makes every write below it fail with EHOSTUNREACH,
  standing in for a network filesystem that lost its peer.

Kept stdlib-only: the workload processes import it.
"""

import errno
import hashlib
import os
from pathlib import Path

QUOTA_FILE = ".liquid-quota"
UNREACHABLE_FILE = ".liquid-unreachable"


def digest(data: bytes) -> str:
    """64-bit content digest, hex encoded."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def file_digest(path) -> str:
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _tree_usage(root: Path) -> int:
    total = 0
    for dirpath, _, files in os.walk(root):
        for name in files:
            if name == QUOTA_FILE:
                continue
            try:
                total += os.lstat(os.path.join(dirpath, name)).st_size
            except OSError:
                pass
    return total


def check_writable(path, nbytes: int = 0) -> None:
    """Raise OSError if a write of ``nbytes`` under ``path`` would fail."""
    p = Path(path).absolute()
    for d in [p.parent, *p.parent.parents]:
        if (d / UNREACHABLE_FILE).exists():
            raise OSError(errno.EHOSTUNREACH, "storage unreachable", str(d))
        quota = d / QUOTA_FILE
        if quota.exists():
            try:
                limit = int(quota.read_text().strip() or 0)
            except ValueError:
                limit = 0
            if _tree_usage(d) + nbytes > limit:
                raise OSError(errno.ENOSPC, "simulated quota exceeded", str(d))


def write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file and rename."""
    path = Path(path)
    check_writable(path, len(data))
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def set_quota(directory, limit_bytes: int) -> Path:
    marker = Path(directory) / QUOTA_FILE
    marker.write_text(str(int(limit_bytes)))
    return marker


def set_unreachable(directory) -> Path:
    marker = Path(directory) / UNREACHABLE_FILE
    marker.touch()
    return marker
