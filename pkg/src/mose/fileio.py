"""Atomic file writing: write to a temp file, rename on success."""

import os
import tempfile
from contextlib import contextmanager


@contextmanager
def atomic_write(path: str):
    """Yield a temp path in the target directory; os.replace it on success.

    On any exception the temp file is removed and the destination is left
    untouched, so failed commands never leave partial output files.
    """
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
