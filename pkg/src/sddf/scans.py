"""Ray samples ``(origin, direction, distance)`` and the binary scan file format.

Scan file layout (little endian)::

    magic    4s   b"SDSC"
    version  u32
    dim      u32
    count    u64
    d_min    f64
    d_max    f64
    id_len   u32
    id       id_len bytes, UTF-8
    records  count * (dim f64 origin, dim f64 direction, f64 distance)

Misses are stored as IEEE ``+inf``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCAN_MAGIC = b"SDSC"
SCAN_VERSION = 1
_HEADER = struct.Struct("<4sIIQddI")


class ScanFileError(ValueError):
    pass


@dataclass
class ScanSet:
    """Distance measurements of one instance; ``distances`` is ``inf`` for misses."""

    origins: np.ndarray
    directions: np.ndarray
    distances: np.ndarray
    instance_id: str = ""
    d_min: float = 0.0
    d_max: float = float("inf")

    def __post_init__(self):
        o = np.asarray(self.origins, dtype=np.float64)
        e = np.asarray(self.directions, dtype=np.float64)
        n = o.shape[-1] if o.ndim == 2 else (e.shape[-1] if e.ndim == 2 else 3)
        self.origins = np.ascontiguousarray(o.reshape(-1, n))
        self.directions = np.ascontiguousarray(e.reshape(-1, n))
        self.distances = np.ascontiguousarray(self.distances, dtype=np.float64).reshape(-1)
        if not (len(self.origins) == len(self.directions) == len(self.distances)):
            raise ValueError("origins, directions and distances differ in length")

    @property
    def dim(self) -> int:
        return self.origins.shape[1]

    def __len__(self) -> int:
        return len(self.distances)

    @property
    def finite_mask(self) -> np.ndarray:
        return np.isfinite(self.distances)

    def subset(self, idx) -> "ScanSet":
        return ScanSet(self.origins[idx], self.directions[idx], self.distances[idx],
                       self.instance_id, self.d_min, self.d_max)

    @property
    def finite(self) -> "ScanSet":
        return self.subset(self.finite_mask)

    @property
    def infinite(self) -> "ScanSet":
        return self.subset(~self.finite_mask)

    def hit_points(self) -> np.ndarray:
        f = self.finite_mask
        return self.origins[f] + self.distances[f, None] * self.directions[f]

    def capped(self, max_finite: int | None, max_infinite: int | None, rng) -> "ScanSet":
        """Uniformly subsample to at most the given finite / infinite counts."""
        keep = []
        for mask, cap in ((self.finite_mask, max_finite), (~self.finite_mask, max_infinite)):
            idx = np.flatnonzero(mask)
            if cap is not None and len(idx) > cap:
                idx = np.sort(rng.choice(idx, size=cap, replace=False))
            keep.append(idx)
        return self.subset(np.sort(np.concatenate(keep)))

    @staticmethod
    def concatenate(scans: list["ScanSet"], instance_id: str | None = None) -> "ScanSet":
        if not scans:
            raise ValueError("nothing to concatenate")
        first = scans[0]
        return ScanSet(
            np.concatenate([s.origins for s in scans]),
            np.concatenate([s.directions for s in scans]),
            np.concatenate([s.distances for s in scans]),
            first.instance_id if instance_id is None else instance_id,
            min(s.d_min for s in scans),
            max(s.d_max for s in scans),
        )


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_scan(scan: ScanSet) -> bytes:
    ident = scan.instance_id.encode("utf-8")
    header = _HEADER.pack(SCAN_MAGIC, SCAN_VERSION, scan.dim, len(scan),
                          float(scan.d_min), float(scan.d_max), len(ident))
    records = np.concatenate([scan.origins, scan.directions, scan.distances[:, None]], axis=1)
    return header + ident + records.astype("<f8").tobytes()


def decode_scan(data: bytes) -> ScanSet:
    if len(data) < _HEADER.size:
        raise ScanFileError("truncated scan header")
    magic, version, dim, count, d_min, d_max, id_len = _HEADER.unpack_from(data)
    if magic != SCAN_MAGIC:
        raise ScanFileError(f"bad magic {magic!r}")
    if version != SCAN_VERSION:
        raise ScanFileError(f"unsupported scan version {version}")
    if dim not in (2, 3):
        raise ScanFileError(f"bad dimension {dim}")
    off = _HEADER.size
    ident = data[off:off + id_len].decode("utf-8")
    off += id_len
    width = 2 * dim + 1
    expected = off + count * width * 8
    if len(data) != expected:
        raise ScanFileError(f"scan body has {len(data) - off} bytes, expected {expected - off}")
    rec = np.frombuffer(data, dtype="<f8", offset=off).reshape(count, width).astype(np.float64)
    directions = rec[:, dim:2 * dim]
    norms = np.linalg.norm(directions, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ScanFileError("direction with non-unit norm")
    d = rec[:, -1]
    if np.any(~((d > 0) | np.isposinf(d))):
        raise ScanFileError("distances must be positive or +inf")
    return ScanSet(rec[:, :dim], directions, d, ident, d_min, d_max)


def write_scan(path, scan: ScanSet) -> None:
    atomic_write_bytes(path, encode_scan(scan))


def read_scan(path) -> ScanSet:
    return decode_scan(Path(path).read_bytes())


@dataclass
class Dataset:
    """Scans grouped per instance, in insertion order."""

    scans: dict[str, ScanSet] = field(default_factory=dict)

    def add(self, scan: ScanSet) -> None:
        if scan.instance_id in self.scans:
            self.scans[scan.instance_id] = ScanSet.concatenate([self.scans[scan.instance_id], scan])
        else:
            self.scans[scan.instance_id] = scan

    @property
    def ids(self) -> list[str]:
        return list(self.scans)

    def __len__(self) -> int:
        return len(self.scans)

    @classmethod
    def from_files(cls, paths) -> "Dataset":
        ds = cls()
        for p in sorted(Path(x) for x in paths):
            ds.add(read_scan(p))
        return ds
