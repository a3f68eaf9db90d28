"""Download client for OMNI2 low-resolution hourly yearly files, with a checksummed cache."""
from __future__ import annotations

import hashlib
import logging
import os
import time
import urllib.error
import urllib.request
from pathlib import Path

import numpy as np

from ..errors import CacheInvalidError, FetchError

log = logging.getLogger(__name__)

DEFAULT_URL = "https://spdf.gsfc.nasa.gov/pub/data/omni/low_res_omni/omni2_{year}.dat"
URL_ENV = "DSTT_OMNI_URL"
CACHE_ENV = "DSTT_CACHE_DIR"


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "dstt"))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _download(url: str, dest: Path, retries: int, timeout: float) -> None:
    last = None
    for attempt in range(retries + 1):
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                payload = resp.read()
            break
        except (urllib.error.URLError, OSError) as exc:
            last = exc
            if attempt < retries:
                time.sleep(min(2.0**attempt, 10.0))
    else:
        raise FetchError(f"could not download {url}: {last}; check connectivity or retry later "
                         f"(override the endpoint with ${URL_ENV})")
    tmp = dest.with_suffix(dest.suffix + ".part")
    tmp.write_bytes(payload)
    tmp.replace(dest)
    dest.with_suffix(dest.suffix + ".sha256").write_text(_sha256(dest))


def _cached_year(year: int, url_template: str, cache: Path, retries: int, timeout: float) -> Path:
    dest = cache / f"omni2_{year}.dat"
    digest = dest.with_suffix(".dat.sha256")
    if dest.exists() and digest.exists():
        if _sha256(dest) != digest.read_text().strip():
            raise CacheInvalidError(f"cached file {dest} fails its checksum; delete it and fetch again")
        log.info("using cached %s", dest)
        return dest
    url = url_template.format(year=year)
    log.info("downloading %s", url)
    _download(url, dest, retries, timeout)
    return dest


def fetch_omni(start, end, endpoint_url: str | None = None, cache_dir=None, *,
               retries: int = 2, timeout: float = 60.0) -> Path:
    """Return a text file with the OMNI2 hourly rows for ``[start, end)``.

    ``endpoint_url`` is a template with a ``{year}`` placeholder; it defaults
    to ``$DSTT_OMNI_URL`` and then to the SPDF archive.
    """
    start, end = np.datetime64(start, "h"), np.datetime64(end, "h")
    if end <= start:
        raise ValueError(f"empty date range {start} .. {end}")
    template = endpoint_url or os.environ.get(URL_ENV, DEFAULT_URL)
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    cache.mkdir(parents=True, exist_ok=True)
    y0 = int(str(start)[:4])
    y1 = int(str(end - np.timedelta64(1, "h"))[:4])
    out = cache / f"omni2_{str(start)[:13].replace('-', '')}_{str(end)[:13].replace('-', '')}.dat"
    with open(out, "w") as fh:
        for year in range(y0, y1 + 1):
            src = _cached_year(year, template, cache, retries, timeout)
            for line in src.read_text().splitlines():
                parts = line.split()
                if len(parts) < 3:
                    continue
                t = (np.datetime64(f"{int(parts[0]):04d}-01-01T00", "h")
                     + np.timedelta64((int(parts[1]) - 1) * 24 + int(parts[2]), "h"))
                if start <= t < end:
                    fh.write(line + "\n")
    return out
