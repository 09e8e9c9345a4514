"""Content-addressed binary cache files for gel histories and efflux bases."""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import CacheError
from .gel import GelHistory
from .grid import build_grid
from .optimizer import EffluxBasis
from .schemas import ParamSet

logger = logging.getLogger(__name__)

MAGIC = b"GELRLSE\x00"
FORMAT_VERSION = 1
PREFIX = struct.Struct("<8sII")
DTYPE = np.dtype("<f8")


def gel_cache_path(cache_dir: Path, digest: str) -> Path:
    return Path(cache_dir) / f"gel-{digest}.bin"


def basis_cache_path(cache_dir: Path, digest: str) -> Path:
    return Path(cache_dir) / f"basis-{digest}.bin"


def write_cache_file(path: Path, kind: str, digest: str, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> int:
    """Write header and arrays to ``path`` atomically; returns the file size."""
    header = {
        "kind": kind,
        "digest": digest,
        "meta": meta,
        "arrays": [{"name": name, "shape": list(values.shape)} for name, values in arrays.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    temporary = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    try:
        with temporary.open("wb") as handle:
            handle.write(PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
            handle.write(header_bytes)
            for values in arrays.values():
                handle.write(np.ascontiguousarray(values, dtype=DTYPE).tobytes())
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(temporary, path)
    except OSError as exc:
        temporary.unlink(missing_ok=True)
        raise CacheError(f"cannot write cache file {path}: {exc.strerror}") from exc
    return path.stat().st_size


def read_cache_file(path: Path, kind: str, digest: str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise CacheError(f"cannot read cache file {path}: {exc.strerror}") from exc
    if len(payload) < PREFIX.size:
        raise CacheError(f"cache file {path} is truncated")
    magic, version, header_length = PREFIX.unpack_from(payload)
    if magic != MAGIC:
        raise CacheError(f"{path} is not a gelrelease cache file")
    if version != FORMAT_VERSION:
        raise CacheError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(payload[PREFIX.size : PREFIX.size + header_length])
    except ValueError as exc:
        raise CacheError(f"{path} has an unreadable header") from exc
    if header.get("kind") != kind:
        raise CacheError(f"{path} holds a {header.get('kind')!r} artifact, expected {kind!r}")
    if header.get("digest") != digest:
        raise CacheError(f"{path} was written for digest {header.get('digest')}, expected {digest}")

    arrays: dict[str, np.ndarray] = {}
    offset = PREFIX.size + header_length
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * DTYPE.itemsize
        if end > len(payload):
            raise CacheError(f"{path} is truncated in array {spec['name']!r}")
        # copy out of the byte buffer: views at odd offsets are unaligned
        arrays[spec["name"]] = np.frombuffer(payload, dtype=DTYPE, count=count, offset=offset).reshape(shape).copy()
        offset = end
    return header, arrays


def save_gel_history(cache_dir: Path, gel: GelHistory) -> tuple[Path, int]:
    path = gel_cache_path(cache_dir, gel.digest)
    size = write_cache_file(
        path,
        "gel",
        gel.digest,
        {"times": gel.times, "r": gel.r, "Nw": gel.Nw, "p": gel.p, "water_uptake": gel.water_uptake},
        {
            "M": gel.grid.M,
            "count": int(gel.times.size),
            "chi": gel.chi,
            "Ghat": gel.Ghat,
            "steps": gel.steps,
            "rejected": gel.rejected,
        },
    )
    logger.info("Cached gel history %s (%d bytes)", gel.digest, size)
    return path, size


def load_gel_history(cache_dir: Path, params: ParamSet) -> Optional[GelHistory]:
    path = gel_cache_path(cache_dir, params.gel_digest)
    if not path.exists():
        return None
    header, arrays = read_cache_file(path, "gel", params.gel_digest)
    meta = header["meta"]
    if meta["M"] != params.M or meta["count"] != params.n_out + 1:
        raise CacheError(f"{path} grid does not match the parameters")
    return GelHistory(
        times=arrays["times"],
        r=arrays["r"],
        Nw=arrays["Nw"],
        p=arrays["p"],
        water_uptake=arrays["water_uptake"],
        grid=build_grid(meta["M"]),
        chi=meta["chi"],
        Ghat=meta["Ghat"],
        digest=params.gel_digest,
        steps=meta["steps"],
        rejected=meta["rejected"],
    )


def save_efflux_basis(cache_dir: Path, basis: EffluxBasis, dt_out: float) -> tuple[Path, int]:
    path = basis_cache_path(cache_dir, basis.digest)
    size = write_cache_file(
        path,
        "basis",
        basis.digest,
        {"times": basis.times, "f": basis.f, "integrals": basis.integrals},
        {"M": basis.grid.M, "count": int(basis.times.size), "dt_out": dt_out},
    )
    logger.info("Cached efflux basis %s (%d bytes)", basis.digest, size)
    return path, size


def load_efflux_basis(cache_dir: Path, params: ParamSet) -> Optional[EffluxBasis]:
    path = basis_cache_path(cache_dir, params.basis_digest)
    if not path.exists():
        return None
    header, arrays = read_cache_file(path, "basis", params.basis_digest)
    meta = header["meta"]
    if meta["M"] != params.M or meta["count"] != params.n_out + 1 or meta["dt_out"] != params.dt_out:
        raise CacheError(f"{path} grid does not match the parameters")
    return EffluxBasis(
        times=arrays["times"],
        f=arrays["f"],
        integrals=arrays["integrals"],
        digest=params.basis_digest,
        grid=build_grid(meta["M"]),
    )
