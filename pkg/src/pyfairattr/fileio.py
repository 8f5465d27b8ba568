import logging
import os
from contextlib import contextmanager
from logging import Logger
from pathlib import Path
from typing import Iterator

logger: Logger = logging.getLogger(__package__)


@contextmanager
def atomic_path(path: Path) -> Iterator[Path]:
    """Yields a sibling temp path that replaces ``path`` when the block succeeds.

    The temp file is removed if the block raises, so ``path`` is either the old
    content or the complete new one.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
            logger.debug("Removed partial output %s", tmp)


def write_text_atomic(path: Path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")
