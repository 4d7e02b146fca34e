"""Rendering, back-projection, Chamfer metrics and image / cloud file formats."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .augmentation import PointCloud
from .model import SddfModel
from .scans import ScanSet, atomic_write_bytes
from .shapes import Pose, SensorModel

BRUTE_FORCE_LIMIT = 2000
RENDER_CHUNK = 8192


@dataclass
class DistanceImage:
    """Per-pixel distances (``inf`` for misses) with the sensor that produced them."""

    values: np.ndarray
    sensor: SensorModel

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.sensor.shape)
        f = np.isfinite(self.values)
        if np.any(self.values[f] <= 0) or np.any(np.isnan(self.values)):
            raise ValueError("finite distances must be positive")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def as_scan(self, instance_id: str = "") -> ScanSet:
        o, d = self.sensor.rays_world()
        return ScanSet(o, d, self.values.ravel(), instance_id, self.sensor.d_min, self.sensor.d_max)


def predict(model: SddfModel, z, origins, directions, d_min=0.0, d_max=np.inf) -> np.ndarray:
    """Model distances with the sensor range applied: anything outside ``(d_min, d_max)`` is a miss."""
    out = np.empty(len(origins))
    for s in range(0, len(origins), RENDER_CHUNK):
        sl = slice(s, s + RENDER_CHUNK)
        out[sl] = model.sddf_eval(origins[sl], directions[sl], z)
    return np.where((out > d_min) & (out < d_max), out, np.inf)


def render(model: SddfModel, z, sensor: SensorModel) -> DistanceImage:
    o, d = sensor.rays_world()
    return DistanceImage(predict(model, z, o, d, sensor.d_min, sensor.d_max), sensor)


def image_to_pointcloud(img: DistanceImage) -> PointCloud:
    o, d = img.sensor.rays_world()
    v = img.values.ravel()
    f = np.isfinite(v)
    return PointCloud(o[f] + v[f, None] * d[f], o[f])


def freespace_rate(model: SddfModel, z, scan: ScanSet) -> tuple[float, float]:
    """``(I-rate, F-rate)``: held-out misses predicted as misses, hits predicted as hits."""
    pred = predict(model, z, scan.origins, scan.directions, scan.d_min, scan.d_max)
    fin = scan.finite_mask
    i_rate = float(np.mean(~np.isfinite(pred[~fin]))) if np.any(~fin) else 1.0
    f_rate = float(np.mean(np.isfinite(pred[fin]))) if np.any(fin) else 1.0
    return i_rate, f_rate


def mean_abs_error(model: SddfModel, z, scan: ScanSet) -> float:
    """Mean ``|h - d|`` over rays that are finite in both the scan and the prediction."""
    pred = predict(model, z, scan.origins, scan.directions, scan.d_min, scan.d_max)
    both = np.isfinite(pred) & scan.finite_mask
    if not np.any(both):
        return float("nan")
    return float(np.mean(np.abs(pred[both] - scan.distances[both])))


# ---------------------------------------------------------------- Chamfer


@dataclass
class MetricReport:
    chamfer_l2: float
    chamfer_l1: float
    completeness: float
    accuracy: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _pair_dist(a, b):
    return np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))


def nn_brute(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    out = np.empty(len(src))
    step = max(1, 4_000_000 // max(len(dst), 1))
    for s in range(0, len(src), step):
        out[s:s + step] = _pair_dist(src[s:s + step], dst).min(axis=1)
    return out


def _cell_size(dst: np.ndarray) -> float:
    sample = dst[np.linspace(0, len(dst) - 1, min(len(dst), 256)).astype(int)]
    d = _pair_dist(sample, dst)
    d[d == 0] = np.inf
    nn = d.min(axis=1)
    nn = nn[np.isfinite(nn)]
    ext = float(np.max(np.ptp(dst, axis=0))) if len(dst) > 1 else 1.0
    c = float(np.median(nn)) if len(nn) else ext
    return c if c > 0 else 1.0


def _shell(k: int, dim: int) -> np.ndarray:
    """Integer offsets at Chebyshev distance exactly ``k``."""
    axes = [np.arange(-k, k + 1)] * dim
    off = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, dim)
    return off[np.max(np.abs(off), axis=1) == k]


def nn_grid(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact nearest-neighbour distances via a uniform grid over ``dst``.

    Cells are searched in shells of growing Chebyshev radius ``k``; a query is
    settled once its best distance is at most ``k`` cell widths, since every
    unsearched point is at least that far away.
    """
    c = _cell_size(dst)
    lo = np.minimum(src.min(axis=0), dst.min(axis=0))
    dkey = np.floor((dst - lo) / c).astype(np.int64)
    skey = np.floor((src - lo) / c).astype(np.int64)
    bkeys, binv = np.unique(dkey, axis=0, return_inverse=True)
    binv = binv.ravel()
    border = np.argsort(binv, kind="stable")
    bbounds = np.searchsorted(binv[border], np.arange(len(bkeys) + 1))
    members_of = [border[bbounds[i]:bbounds[i + 1]] for i in range(len(bkeys))]
    lookup = {tuple(k): i for i, k in enumerate(bkeys.tolist())}
    dim = src.shape[1]
    shells: dict = {}
    out = np.full(len(src), np.inf)
    cells, inverse = np.unique(skey, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    groups = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[groups], np.arange(len(cells) + 1))
    for ci, cell in enumerate(cells):
        members = groups[bounds[ci]:bounds[ci + 1]]
        q = src[members]
        best = np.full(len(members), np.inf)
        k = 0
        cheb = None
        done = 0
        while done < len(bkeys):
            if cheb is None and (2 * k + 1) ** dim > len(bkeys):
                cheb = np.max(np.abs(bkeys - cell), axis=1)
            if cheb is None:
                if k not in shells:
                    shells[k] = _shell(k, dim)
                hit = [lookup.get(tuple(t)) for t in (cell + shells[k]).tolist()]
                hit = [h for h in hit if h is not None]
            else:
                hit = np.flatnonzero(cheb == k).tolist()
            if hit:
                done += len(hit)
                cand = dst[np.concatenate([members_of[h] for h in hit])]
                best = np.minimum(best, _pair_dist(q, cand).min(axis=1))
            if np.all(best <= k * c):
                break
            if cheb is None:
                k += 1
            else:
                later = cheb[cheb > k]
                if len(later) == 0:
                    break
                k = int(later.min())
        out[members] = best
    return out


def nearest_distances(src, dst, method: str = "auto") -> np.ndarray:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if method == "auto":
        method = "brute" if max(len(src), len(dst)) < BRUTE_FORCE_LIMIT else "grid"
    if method == "brute":
        return nn_brute(src, dst)
    if method == "grid":
        return nn_grid(src, dst)
    raise ValueError(f"unknown search method {method!r}")


def _points(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.atleast_2d(np.asarray(c, dtype=np.float64))


def chamfer_metrics(pred, gt, normalize: bool = True, method: str = "auto") -> MetricReport:
    """Nearest-neighbour discrepancies between two clouds.

    completeness: mean distance from ground truth to prediction; accuracy:
    mean distance from prediction to ground truth; ``chamfer_l1`` their mean;
    ``chamfer_l2`` half the sum of the mean squared distances.  With
    ``normalize`` both clouds are scaled so the ground-truth bounding box has
    unit longest side.
    """
    p, g = _points(pred), _points(gt)
    if len(p) == 0 or len(g) == 0:
        raise ValueError("Chamfer metrics need two nonempty clouds")
    if normalize:
        side = float(np.max(np.ptp(g, axis=0)))
        if side > 0:
            p, g = p / side, g / side
    to_pred = nearest_distances(g, p, method)
    to_gt = nearest_distances(p, g, method)
    comp, acc = float(np.mean(to_pred)), float(np.mean(to_gt))
    l2 = 0.5 * (float(np.mean(to_pred ** 2)) + float(np.mean(to_gt ** 2)))
    return MetricReport(l2, 0.5 * (comp + acc), comp, acc)


# ------------------------------------------------------------ file formats

SDDI_MAGIC = b"SDDI"
SDDI_VERSION = 1


class ImageFileError(ValueError):
    pass


def encode_sddi(img: DistanceImage) -> bytes:
    pose = img.sensor.pose
    n = len(pose.position)
    head = SDDI_MAGIC + struct.pack("<IIII", SDDI_VERSION, img.width, img.height, n)
    body = (np.asarray(pose.position, dtype="<f8").tobytes() + np.asarray(pose.rotation, dtype="<f8").tobytes()
            + img.values.astype("<f8").tobytes())
    return head + body


def decode_sddi(data: bytes):
    """Returns ``(values, pose)``."""
    if len(data) < 20 or data[:4] != SDDI_MAGIC:
        raise ImageFileError("not an SDDI raster")
    version, w, h, n = struct.unpack_from("<IIII", data, 4)
    if version != SDDI_VERSION:
        raise ImageFileError(f"unsupported raster version {version}")
    expected = 20 + 8 * (n + n * n + w * h)
    if len(data) != expected:
        raise ImageFileError("raster size does not match its header")
    arr = np.frombuffer(data, dtype="<f8", offset=20).astype(np.float64)
    pos, rot, vals = arr[:n], arr[n:n + n * n].reshape(n, n), arr[n + n * n:].reshape(h, w)
    return vals, Pose(pos, rot)


def write_sddi(path, img: DistanceImage) -> None:
    atomic_write_bytes(path, encode_sddi(img))


def read_sddi(path):
    return decode_sddi(Path(path).read_bytes())


def encode_pgm(img: DistanceImage, d_max: float | None = None) -> bytes:
    """16-bit binary PGM; finite values scale to 0..65534 by ``d_max``, misses are 65535."""
    d_max = img.sensor.d_max if d_max is None else d_max
    v = img.values
    f = np.isfinite(v)
    out = np.full(v.shape, 65535, dtype=np.int64)
    out[f] = np.clip(np.rint(v[f] / d_max * 65534), 0, 65534)
    header = f"P5\n{img.width} {img.height}\n65535\n".encode()
    return header + out.astype(">u2").tobytes()


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+65535\s")


def decode_pgm(data: bytes, d_max: float) -> np.ndarray:
    # exactly one whitespace byte separates the header from the samples
    head = _PGM_HEADER.match(data)
    if head is None:
        raise ImageFileError("not a 16-bit binary PGM")
    w, h = int(head.group(1)), int(head.group(2))
    raw = np.frombuffer(data[head.end():], dtype=">u2")
    if raw.size != w * h:
        raise ImageFileError("PGM size does not match its header")
    raw = raw.reshape(h, w).astype(np.float64)
    return np.where(raw == 65535, np.inf, raw / 65534 * d_max)


def write_pgm(path, img: DistanceImage, d_max: float | None = None) -> None:
    atomic_write_bytes(path, encode_pgm(img, d_max))


def encode_ply(points) -> bytes:
    pts = _points(points)
    if pts.size == 0:
        pts = np.zeros((0, 3))
    if pts.shape[1] == 2:
        pts = np.concatenate([pts, np.zeros((len(pts), 1))], axis=1)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property double x", "property double y", "property double z", "end_header"]
    lines += [" ".join(repr(float(c)) for c in p) for p in pts]
    return ("\n".join(lines) + "\n").encode()


def decode_ply(data: bytes) -> np.ndarray:
    text = data.decode().splitlines()
    if not text or text[0] != "ply":
        raise ImageFileError("not a PLY file")
    n = 0
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            body = text[i + 1:i + 1 + n]
            if len(body) != n:
                raise ImageFileError("PLY body shorter than its vertex count")
            break
    else:
        raise ImageFileError("PLY header not terminated")
    return np.array([[float(x) for x in ln.split()] for ln in body]).reshape(n, 3)


def write_ply(path, points) -> None:
    atomic_write_bytes(path, encode_ply(points))


def read_ply(path) -> np.ndarray:
    return decode_ply(Path(path).read_bytes())


def write_report(path, report: MetricReport) -> None:
    atomic_write_bytes(path, report.to_json().encode())
