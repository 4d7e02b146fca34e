"""Structurally constrained SDDF regressor.

The network never sees the position along the ray: its input is
``[P R_eta p, eta, z]`` and the distance is recovered as::

    h(p, eta) = (phi^-1(min(q, phi(inf))) - offset) / scale - p . eta

so ``h(p + t eta, eta) = h(p, eta) - t`` holds for every parameter setting.
``scale`` and ``offset`` are the per-dataset pre-scale that keeps the squashed
targets in the well conditioned range of ``phi``.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .geometry import reduce_input
from .scans import atomic_write_bytes

INF_EPS = 1e-7
SOFTPLUS_LINEAR = 30.0


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------ squashers


@dataclass(frozen=True)
class Squasher:
    """Strictly increasing bijection onto a bounded interval, with ``phi(inf) = 1``."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("sigmoid", "tanh", "erf"):
            raise ValueError(f"unknown squasher {self.kind!r}")

    @property
    def at_infinity(self) -> float:
        return 1.0

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "sigmoid":
            return special.expit(x)
        if self.kind == "tanh":
            return np.tanh(x)
        return special.erf(x)

    def inverse(self, y):
        y = np.asarray(y, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "sigmoid":
                return special.logit(y)
            if self.kind == "tanh":
                return np.arctanh(y)
            return special.erfinv(y)

    def derivative(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "sigmoid":
            s = special.expit(x)
            return s * (1.0 - s)
        if self.kind == "tanh":
            return 1.0 / np.cosh(x) ** 2
        return 2.0 / math.sqrt(math.pi) * np.exp(-x * x)


def softplus(x, beta: float):
    bx = beta * x
    return np.where(bx > SOFTPLUS_LINEAR, x, np.log1p(np.exp(np.minimum(bx, SOFTPLUS_LINEAR))) / beta)


def softplus_grad(x, beta: float):
    return special.expit(beta * x)


# --------------------------------------------------------------- architecture


@dataclass(frozen=True)
class ArchSpec:
    """Fully connected autodecoder: ``layers`` softplus layers then a linear output.

    ``skips`` lists hidden layers that additionally receive the raw input.
    """

    dim: int = 2
    latent_dim: int = 0
    layers: int = 4
    width: int = 64
    skips: tuple = ()
    beta: float = 100.0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.layers < 1 or self.width < 1 or self.latent_dim < 0:
            raise ValueError("layers and width must be positive")
        object.__setattr__(self, "skips", tuple(sorted(int(s) for s in self.skips)))
        if any(s <= 0 or s >= self.layers for s in self.skips):
            raise ValueError("skip indices must lie in 1..layers-1")

    @property
    def input_dim(self) -> int:
        return (self.dim - 1) + self.dim + self.latent_dim

    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes = []
        for i in range(self.layers):
            fan_in = self.input_dim if i == 0 else self.width
            if i in self.skips:
                fan_in += self.input_dim
            shapes.append((self.width, fan_in))
        shapes.append((1, self.width))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())

    def block_names(self) -> list[str]:
        names = []
        for i in range(self.layers + 1):
            tag = "output" if i == self.layers else f"layer {i}"
            names += [f"{tag} weights", f"{tag} bias"]
        return names


@dataclass
class Tape:
    """Activations of one forward pass, enough to run the reverse sweep."""

    x: np.ndarray
    inputs: list
    pre: list
    f: np.ndarray


class SddfModel:
    def __init__(self, arch: ArchSpec, theta=None, squasher: Squasher | str = "sigmoid",
                 latent: dict | None = None, scale: float = 1.0, offset: float = 0.0):
        self.arch = arch
        self.squasher = squasher if isinstance(squasher, Squasher) else Squasher(squasher)
        if theta is None:
            theta = np.zeros(arch.n_params)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got {theta.shape}")
        self.theta = theta
        self.latent = {k: np.asarray(v, dtype=np.float64) for k, v in (latent or {}).items()}
        self.scale = float(scale)
        self.offset = float(offset)

    @classmethod
    def initialize(cls, arch: ArchSpec, rng, squasher="sigmoid") -> "SddfModel":
        """Glorot-uniform weights, zero biases."""
        parts = []
        for out, fan_in in arch.layer_shapes():
            lim = math.sqrt(6.0 / (fan_in + out))
            parts.append(rng.uniform(-lim, lim, size=out * fan_in))
            parts.append(np.zeros(out))
        return cls(arch, np.concatenate(parts), squasher)

    def copy(self) -> "SddfModel":
        return SddfModel(self.arch, self.theta.copy(), self.squasher,
                         {k: v.copy() for k, v in self.latent.items()}, self.scale, self.offset)

    # parameter views into theta
    def params(self, theta=None):
        theta = self.theta if theta is None else theta
        out, pos = [], 0
        for o, i in self.arch.layer_shapes():
            W = theta[pos:pos + o * i].reshape(o, i)
            pos += o * i
            b = theta[pos:pos + o]
            pos += o
            out.append((W, b))
        return out

    def block_slices(self) -> list[slice]:
        sl, pos = [], 0
        for o, i in self.arch.layer_shapes():
            sl.append(slice(pos, pos + o * i))
            pos += o * i
            sl.append(slice(pos, pos + o))
            pos += o
        return sl

    # ---------------------------------------------------------------- inputs
    def mean_code(self) -> np.ndarray:
        if not self.latent:
            return np.zeros(self.arch.latent_dim)
        return np.mean(np.stack(list(self.latent.values())), axis=0)

    def code(self, z) -> np.ndarray:
        if z is None:
            return np.zeros(self.arch.latent_dim)
        if isinstance(z, str):
            if z not in self.latent:
                raise KeyError(f"instance {z!r} has no latent code")
            return self.latent[z]
        return np.asarray(z, dtype=np.float64)

    def features(self, p, eta, z=None) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        eta = np.atleast_2d(np.asarray(eta, dtype=np.float64))
        n = self.arch.dim
        if p.shape[-1] != n or eta.shape[-1] != n:
            raise ValueError(f"expected {n}D positions and directions")
        p, eta = np.broadcast_arrays(p, eta)
        m = self.arch.latent_dim
        z = self.code(z) if not (isinstance(z, np.ndarray) and z.ndim == 2) else z
        z = np.atleast_2d(z)
        if z.shape[-1] != m:
            raise ValueError(f"latent code must have dimension {m}")
        z = np.broadcast_to(z, (len(p), m))
        return np.concatenate([reduce_input(p, eta), eta, z], axis=1)

    # --------------------------------------------------------------- network
    def run(self, x: np.ndarray, theta=None) -> Tape:
        beta = self.arch.beta
        params = self.params(theta)
        h = x
        inputs, pre = [], []
        for i, (W, b) in enumerate(params[:-1]):
            inp = np.concatenate([h, x], axis=1) if i in self.arch.skips else h
            a = inp @ W.T + b
            inputs.append(inp)
            pre.append(a)
            h = softplus(a, beta)
        W, b = params[-1]
        inputs.append(h)
        f = (h @ W.T + b)[:, 0]
        return Tape(x, inputs, pre, f)

    def backward(self, tape: Tape, df: np.ndarray, theta=None):
        """Reverse sweep: gradients w.r.t. ``theta`` (flat) and the network input."""
        beta = self.arch.beta
        params = self.params(theta)
        width = self.arch.width
        grads = [None] * (2 * len(params))
        W, _ = params[-1]
        grads[-2] = df[None, :] @ tape.inputs[-1]
        grads[-1] = np.array([df.sum()])
        dh = df[:, None] * W
        dx = np.zeros_like(tape.x)
        for i in range(len(params) - 2, -1, -1):
            W, _ = params[i]
            da = dh * softplus_grad(tape.pre[i], beta)
            grads[2 * i] = da.T @ tape.inputs[i]
            grads[2 * i + 1] = da.sum(axis=0)
            dinp = da @ W
            if i in self.arch.skips:
                dh = dinp[:, :width]
                dx += dinp[:, width:]
            elif i == 0:
                dx += dinp
            else:
                dh = dinp
        return np.concatenate([g.ravel() for g in grads]), dx

    def raw(self, p, eta, z=None) -> np.ndarray:
        """Pre-squash network output ``f``."""
        return self.run(self.features(p, eta, z)).f

    def forward_q(self, p, eta, z=None):
        """Squashed prediction ``q = phi(f)``; not clamped."""
        single = np.asarray(p).ndim == 1 and np.asarray(eta).ndim == 1
        q = self.squasher(self.raw(p, eta, z))
        return float(q[0]) if single else q

    def distance_from_q(self, q, p, eta):
        q = np.asarray(q, dtype=np.float64)
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        eta = np.atleast_2d(np.asarray(eta, dtype=np.float64))
        top = self.squasher.at_infinity
        is_inf = q >= top - INF_EPS
        g = (self.squasher.inverse(np.minimum(q, top)) - self.offset) / self.scale
        h = g - np.einsum("ij,ij->i", p, eta)
        return np.where(is_inf, np.inf, h)

    def sddf_eval(self, p, eta, z=None):
        """Signed directional distance, ``inf`` where the prediction saturates."""
        single = np.asarray(p).ndim == 1 and np.asarray(eta).ndim == 1
        q = np.atleast_1d(self.forward_q(p, eta, z))
        h = self.distance_from_q(q, p, eta)
        return float(h[0]) if single else h

    def squash_target(self, p, eta, d):
        """``phi(scale * (d + p . eta) + offset)`` for finite distances."""
        g = np.asarray(d) + np.einsum("ij,ij->i", np.atleast_2d(p), np.atleast_2d(eta))
        return self.squasher(self.scale * g + self.offset)


def fit_prescale(origins, directions, distances, span: float = 2.0) -> tuple[float, float]:
    """Affine map sending the 1st..99th percentile of ``d + p . eta`` onto ``[-span, span]``."""
    f = np.isfinite(distances)
    if not np.any(f):
        return 1.0, 0.0
    g = distances[f] + np.einsum("ij,ij->i", origins[f], directions[f])
    lo, hi = np.percentile(g, [1.0, 99.0])
    half = max((hi - lo) / 2.0, 1e-6)
    scale = span / half
    return scale, -scale * (lo + hi) / 2.0


# -------------------------------------------------------------------- audit


def directional_derivative(fn, p, eta, probe=None, step: float = 1e-4) -> np.ndarray:
    """Central difference of ``fn(., eta)`` along ``probe`` (defaults to ``eta``)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    eta = np.atleast_2d(np.asarray(eta, dtype=np.float64))
    probe = eta if probe is None else np.atleast_2d(np.asarray(probe, dtype=np.float64))
    hp = np.asarray(fn(p + step * probe, eta), dtype=np.float64)
    hm = np.asarray(fn(p - step * probe, eta), dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return (hp - hm) / (2.0 * step)


def directional_gradient_audit(model: SddfModel, p, eta, z=None, probe=None,
                               step: float = 1e-4) -> float:
    """Worst ``|grad_p h . eta + 1|`` over samples whose prediction stays finite.

    The gradient is probed by central differences along the viewing direction.
    """
    deriv = directional_derivative(lambda a, b: model.sddf_eval(a, b, z), p, eta, probe, step)
    ok = np.isfinite(deriv)
    if not np.any(ok):
        return 0.0
    return float(np.max(np.abs(deriv[ok] + 1.0)))


# --------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SDDF"
CKPT_VERSION = 1


def encode_checkpoint(model: SddfModel) -> bytes:
    arch = asdict(model.arch)
    arch["skips"] = list(arch["skips"])
    meta = json.dumps({"arch": arch, "squasher": model.squasher.kind}, sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(meta)), meta,
           struct.pack("<dd", model.scale, model.offset),
           struct.pack("<Q", len(model.theta)), model.theta.astype("<f8").tobytes(),
           struct.pack("<II", len(model.latent), model.arch.latent_dim)]
    for key, z in model.latent.items():
        k = key.encode("utf-8")
        out += [struct.pack("<I", len(k)), k, np.asarray(z, dtype="<f8").tobytes()]
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(data: bytes) -> SddfModel:
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint")
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("not an SDDF checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        # a truncated file reads its CRC from the middle of the payload
        raise CheckpointError("checksum mismatch (corrupt or truncated checkpoint)")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len))
    arch = ArchSpec(**{**meta["arch"], "skips": tuple(meta["arch"]["skips"])})
    scale, offset = r.unpack("<dd")
    (count,) = r.unpack("<Q")
    theta = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
    n_codes, m = r.unpack("<II")
    latent = {}
    for _ in range(n_codes):
        (klen,) = r.unpack("<I")
        key = r.take(klen).decode("utf-8")
        latent[key] = np.frombuffer(r.take(8 * m), dtype="<f8").astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return SddfModel(arch, theta, meta["squasher"], latent, scale, offset)


def checkpoint_save(model: SddfModel, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(model))


def checkpoint_load(path) -> SddfModel:
    return decode_checkpoint(Path(path).read_bytes())
