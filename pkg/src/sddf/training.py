"""Losses, Adam and the three optimization problems.

* single instance: one shape, no latent code
* multi instance: shared weights plus one latent code per instance
* code completion: weights frozen, one new code fitted to partial data
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .model import NonFiniteError, SddfModel, fit_prescale
from .scans import ScanSet, atomic_write_bytes

SHARD_SIZE = 512


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.0
    sigma: float = 0.001
    norm_power: float = 1.0
    rectifier: str = "relu"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if min(self.beta, self.gamma, self.sigma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.norm_power < 1:
            raise ValueError("norm_power must be >= 1")
        if self.rectifier not in ("relu", "gelu", "softplus"):
            raise ValueError(f"unknown rectifier {self.rectifier!r}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4096
    lr_theta: float = 0.005
    lr_latent: float = 0.0001
    decay_factor: float = 0.5
    decay_period: int = 1000
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    prescale_span: float = 2.0
    latent_init_std: float = 0.01
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    code_iterations: int = 500
    code_batch_size: int = 2000
    code_lr: float = 0.01
    code_decay_period: int = 200

    def __post_init__(self):
        if self.iterations < 0 or self.code_iterations < 0:
            raise ValueError("iteration counts must be nonnegative")
        if min(self.lr_theta, self.lr_latent, self.code_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if min(self.decay_period, self.code_decay_period, self.batch_size, self.code_batch_size) < 1:
            raise ValueError("periods and batch sizes must be positive")


def learning_rate(lr0: float, factor: float, period: int, k: int) -> float:
    return lr0 * factor ** (k // period)


class Adam:
    """Adam on a flat float64 vector; ``step`` updates in place."""

    def __init__(self, size: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, x: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        x -= lr * mhat / (np.sqrt(vhat) + self.eps)


class TrainingAborted(RuntimeError):
    """Raised on divergence; ``model`` holds the last state with a finite loss."""

    def __init__(self, message, model, trace):
        super().__init__(message)
        self.model = model
        self.trace = trace


# ----------------------------------------------------------------- batches


@dataclass
class RayBatch:
    """Rays of possibly several instances; ``inst`` indexes rows of the code matrix."""

    origins: np.ndarray
    directions: np.ndarray
    distances: np.ndarray
    inst: np.ndarray

    @classmethod
    def from_scans(cls, scans: list[ScanSet]) -> "RayBatch":
        if not scans:
            return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=int))
        return cls(np.concatenate([s.origins for s in scans]),
                   np.concatenate([s.directions for s in scans]),
                   np.concatenate([s.distances for s in scans]),
                   np.concatenate([np.full(len(s), i) for i, s in enumerate(scans)]).astype(int))

    def __len__(self):
        return len(self.distances)

    def take(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.distances[idx], self.inst[idx])


@dataclass
class LossResult:
    loss: float
    grad_theta: np.ndarray
    grad_codes: np.ndarray


def _rectify(u, kind):
    if kind == "relu":
        return np.maximum(u, 0.0), (u > 0).astype(np.float64)
    if kind == "softplus":
        return np.logaddexp(0.0, u), special.expit(u)
    cdf = special.ndtr(u)
    return u * cdf, cdf + u * np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)


def _abs_pow(x, p):
    """``|x|^p`` and its derivative."""
    a = np.abs(x)
    if p == 1:
        return a, np.sign(x)
    return a ** p, p * a ** (p - 1) * np.sign(x)


def tree_sum(parts: list[np.ndarray]) -> np.ndarray:
    """Pairwise summation in a fixed order."""
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _shards(n: int) -> list[slice]:
    return [slice(i, min(i + SHARD_SIZE, n)) for i in range(0, n, SHARD_SIZE)]


def evaluate(model: SddfModel, batch: RayBatch, codes: np.ndarray, cfg: LossConfig,
             mode: str = "single", theta=None, grad: bool = True, threads: int = 1) -> LossResult:
    """Loss and exact gradients.

    ``mode`` selects the normalization: ``single`` (per-term means plus the
    weight penalty), ``multi`` (pooled means, the code penalty shares the
    infinite-ray normalizer) or ``code`` (per-term means plus an unnormalized
    code penalty, no weight penalty).
    """
    if mode not in ("single", "multi", "code"):
        raise ValueError(f"unknown loss mode {mode!r}")
    theta = model.theta if theta is None else theta
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    n = len(batch)
    fin = np.isfinite(batch.distances)
    n_f, n_i = int(fin.sum()), int(n - fin.sum())
    p = cfg.norm_power
    phi = model.squasher

    shards = _shards(n)

    def forward(sl):
        z = codes[batch.inst[sl]] if codes.shape[1] else np.zeros((sl.stop - sl.start, 0))
        x = model.features(batch.origins[sl], batch.directions[sl], z)
        return model.run(x, theta)

    with ThreadPoolExecutor(max(1, threads)) as pool:
        tapes = list(pool.map(forward, shards)) if n else []
        f = np.concatenate([t.f for t in tapes]) if n else np.zeros(0)
        q = phi(f)

        terms = np.zeros(n)
        dq = np.zeros(n)
        if n_f:
            target = model.squash_target(batch.origins[fin], batch.directions[fin], batch.distances[fin])
            val, der = _abs_pow(target - q[fin], p)
            w = cfg.alpha / n_f
            terms[fin] = w * val
            dq[fin] = -w * der
        if n_i:
            r, dr = _rectify(phi.at_infinity - q[~fin], cfg.rectifier)
            val, der = _abs_pow(r, p)
            w = cfg.beta / n_i
            terms[~fin] = w * val
            dq[~fin] = -w * der * dr
        bad = ~np.isfinite(terms)
        if np.any(bad):
            raise NonFiniteError(f"non-finite loss term at sample {int(np.flatnonzero(bad)[0])}")
        loss = float(np.sum(terms))

        reg_theta = np.zeros_like(theta)
        if mode != "code" and cfg.gamma > 0:
            val, der = _abs_pow(theta, p)
            loss += cfg.gamma * float(np.sum(val))
            reg_theta = cfg.gamma * der
        code_scale = cfg.sigma
        if mode == "multi":
            code_scale = cfg.sigma / (n_i if n_i else 1)
        reg_codes = np.zeros_like(codes)
        if mode != "single" and codes.shape[1] and cfg.sigma > 0:
            loss += code_scale * float(np.sum(codes * codes))
            reg_codes = 2.0 * code_scale * codes

        if not math.isfinite(loss):
            raise NonFiniteError("non-finite loss")
        if not grad:
            return LossResult(loss, None, None)

        df = dq * phi.derivative(f)

        def backward(args):
            tape, sl = args
            return model.backward(tape, df[sl], theta)

        parts = list(pool.map(backward, zip(tapes, shards))) if n else []

    g_theta = tree_sum([g for g, _ in parts]) + reg_theta if parts else reg_theta.copy()
    g_codes = reg_codes.copy()
    m = model.arch.latent_dim
    if m and parts:
        dz = np.concatenate([dx[:, -m:] for _, dx in parts])
        np.add.at(g_codes, batch.inst, dz)
    for name, sl in zip(model.arch.block_names(), model.block_slices()):
        if not np.all(np.isfinite(g_theta[sl])):
            raise NonFiniteError(f"non-finite gradient in {name}")
    if not np.all(np.isfinite(g_codes)):
        raise NonFiniteError("non-finite gradient in latent codes")
    return LossResult(loss, g_theta, g_codes)


# ---------------------------------------------------------- public losses


def _split(scans) -> list[ScanSet]:
    return [scans] if isinstance(scans, ScanSet) else list(scans)


def loss_single(model: SddfModel, F: ScanSet, I: ScanSet | None, cfg: LossConfig) -> float:
    if len(F) == 0:
        raise ValueError("need at least one finite sample")
    parts = [F] + ([I] if I is not None and len(I) else [])
    batch = RayBatch.from_scans([ScanSet.concatenate(parts)])
    return evaluate(model, batch, np.zeros((1, model.arch.latent_dim)), cfg, "single", grad=False).loss


def loss_multi(model: SddfModel, data: dict, cfg: LossConfig) -> float:
    """``data`` maps instance id to a ScanSet (finite and infinite rays mixed)."""
    if not data:
        raise ValueError("need at least one instance")
    ids = list(data)
    missing = [k for k in ids if k not in model.latent]
    if missing:
        raise KeyError(f"instance {missing[0]!r} has no latent code")
    codes = np.stack([model.latent[k] for k in ids])
    batch = RayBatch.from_scans([data[k] for k in ids])
    if len(batch) and batch.origins.shape[1] != model.arch.dim:
        raise ValueError("dimension mismatch")
    return evaluate(model, batch, codes, cfg, "multi", grad=False).loss


def loss_code(model: SddfModel, z, scan: ScanSet, cfg: LossConfig) -> float:
    batch = RayBatch.from_scans([scan])
    return evaluate(model, batch, np.atleast_2d(z), cfg, "code", grad=False).loss


# ----------------------------------------------------------------- training


@dataclass
class TraceRow:
    iteration: int
    loss: float
    lr_theta: float
    lr_latent: float


def trace_csv(rows: list[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", "lr_theta", "lr_latent"])
    for r in rows:
        w.writerow([r.iteration, repr(r.loss), repr(r.lr_theta), repr(r.lr_latent)])
    return buf.getvalue()


def write_trace(path, rows: list[TraceRow]) -> None:
    atomic_write_bytes(path, trace_csv(rows).encode())


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        return [TraceRow(int(r["iteration"]), float(r["loss"]), float(r["lr_theta"]), float(r["lr_latent"]))
                for r in csv.DictReader(fh)]


@dataclass
class TrainResult:
    model: SddfModel
    trace: list[TraceRow] = field(default_factory=list)


def _pool(scan: ScanSet) -> RayBatch:
    return RayBatch.from_scans([scan])


def train(model: SddfModel, data: dict, loss_cfg: LossConfig, train_cfg: TrainConfig,
          threads: int = 1, refit_prescale: bool = True, progress=None) -> TrainResult:
    """Seeded minibatch Adam with step decay.

    ``data`` maps instance id to its merged (original plus synthesized) rays.
    Without a latent dimension the single-instance objective is used and
    ``data`` must hold exactly one instance.
    """
    if not data or not any(len(s) for s in data.values()):
        raise ValueError("empty training set")
    model = model.copy()
    rng = np.random.default_rng(train_cfg.seed)
    ids = list(data)
    m = model.arch.latent_dim
    mode = "multi" if m else "single"
    if mode == "single" and len(ids) != 1:
        raise ValueError("several instances need a latent dimension")
    if refit_prescale:
        merged = ScanSet.concatenate([data[k] for k in ids])
        model.scale, model.offset = fit_prescale(merged.origins, merged.directions,
                                                 merged.distances, train_cfg.prescale_span)
    for k in ids:
        if m and k not in model.latent:
            model.latent[k] = rng.normal(0.0, train_cfg.latent_init_std, size=m)
    codes = np.stack([model.latent[k] for k in ids]) if m else np.zeros((1, 0))
    pools = [_pool(data[k]) for k in ids]

    opt_t = Adam(model.theta.size, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    opt_z = Adam(codes.size, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    trace: list[TraceRow] = []
    last_good = model.copy()
    first_loss = None
    bad_run = 0

    for k in range(train_cfg.iterations):
        picks = []
        for i, pool in enumerate(pools):
            idx = rng.integers(0, len(pool), size=train_cfg.batch_size)
            b = pool.take(idx)
            b.inst = np.full(len(idx), i)
            picks.append(b)
        batch = RayBatch(np.concatenate([b.origins for b in picks]),
                         np.concatenate([b.directions for b in picks]),
                         np.concatenate([b.distances for b in picks]),
                         np.concatenate([b.inst for b in picks]))
        lr_t = learning_rate(train_cfg.lr_theta, train_cfg.decay_factor, train_cfg.decay_period, k)
        lr_z = learning_rate(train_cfg.lr_latent, train_cfg.decay_factor, train_cfg.decay_period, k)
        try:
            res = evaluate(model, batch, codes, loss_cfg, mode, threads=threads)
        except NonFiniteError as exc:
            raise TrainingAborted(f"iteration {k}: {exc}", last_good, trace) from exc
        trace.append(TraceRow(k, res.loss, lr_t, lr_z if m else 0.0))
        if first_loss is None:
            first_loss = res.loss
        bad_run = bad_run + 1 if res.loss > train_cfg.divergence_factor * first_loss else 0
        if bad_run >= train_cfg.divergence_patience:
            raise TrainingAborted(f"iteration {k}: loss diverged", last_good, trace)
        last_good.theta[:] = model.theta
        if m:
            for i, key in enumerate(ids):
                last_good.latent[key] = codes[i].copy()
        opt_t.step(model.theta, res.grad_theta, lr_t)
        if m:
            flat = codes.reshape(-1)
            opt_z.step(flat, res.grad_codes.reshape(-1), lr_z)
            codes = flat.reshape(codes.shape)
        if progress is not None:
            progress(k, res.loss)

    for i, key in enumerate(ids):
        if m:
            model.latent[key] = codes[i].copy()
    return TrainResult(model, trace)


def optimize_code(model: SddfModel, scan: ScanSet, loss_cfg: LossConfig, train_cfg: TrainConfig,
                  threads: int = 1, z0=None) -> tuple[np.ndarray, list[TraceRow]]:
    """Fit a latent code to partial observations with the weights frozen."""
    if len(scan) == 0:
        raise ValueError("need at least one observation")
    rng = np.random.default_rng(train_cfg.seed)
    z = (model.mean_code() if z0 is None else np.asarray(z0, dtype=np.float64)).copy()
    pool = _pool(scan)
    opt = Adam(z.size, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    trace = []
    for k in range(train_cfg.code_iterations):
        if len(pool) > train_cfg.code_batch_size:
            batch = pool.take(rng.integers(0, len(pool), size=train_cfg.code_batch_size))
        else:
            batch = pool
        lr = learning_rate(train_cfg.code_lr, train_cfg.decay_factor, train_cfg.code_decay_period, k)
        try:
            res = evaluate(model, batch, z[None, :], loss_cfg, "code", threads=threads)
        except NonFiniteError as exc:
            raise TrainingAborted(f"iteration {k}: {exc}", model, trace) from exc
        trace.append(TraceRow(k, res.loss, 0.0, lr))
        opt.step(z, res.grad_codes[0], lr)
    return z, trace


def interpolate_codes(z_a, z_b, w: float) -> np.ndarray:
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise ValueError("codes differ in dimension")
    return w * z_a + (1.0 - w) * z_b
