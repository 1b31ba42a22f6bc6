"""Fetch remote codebook and score exports into a local cache directory."""

import hashlib
import os
from pathlib import Path
from urllib.parse import urlparse

import httpx

from validator import MissingPrerequisiteError

TIMEOUT = httpx.Timeout(60.0, connect=10.0)
DEFAULT_CACHE = Path(".cache") / "leda"


def default_cache_dir() -> Path:
    return Path(os.environ.get("LEDA_CACHE_DIR", str(DEFAULT_CACHE)))


def is_url(location: str) -> bool:
    return urlparse(str(location)).scheme in ("http", "https")


def cache_path(url: str, cache_dir: Path) -> Path:
    """Cache file for a URL: short hash of the URL plus the original file name."""
    name = Path(urlparse(url).path).name or "artifact"
    digest = hashlib.sha256(url.encode("utf-8")).hexdigest()[:12]
    return Path(cache_dir) / f"{digest}_{name}"


def fetch_artifact(location: str, cache_dir: Path | None = None) -> Path:
    """Return a local path for `location`, downloading it first if it is a URL.

    Skips the download if the file is already cached.
    """
    if not is_url(location):
        path = Path(location)
        if not path.exists():
            raise MissingPrerequisiteError(f"File not found: {path}")
        return path

    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    cache_dir.mkdir(parents=True, exist_ok=True)
    target = cache_path(location, cache_dir)
    if target.exists() and target.stat().st_size > 0:
        print(f"  Cached: {target.name}")
        return target

    try:
        with httpx.Client(timeout=TIMEOUT, follow_redirects=True) as client:
            resp = client.get(location)
            resp.raise_for_status()
    except httpx.HTTPError as e:
        raise MissingPrerequisiteError(f"Failed to download {location}: {e}")

    tmp = target.with_suffix(target.suffix + ".part")
    tmp.write_bytes(resp.content)
    tmp.replace(target)
    print(f"  Downloaded: {target.name} ({len(resp.content)} bytes)")
    return target
