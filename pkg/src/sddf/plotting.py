"""Figures written next to the numeric outputs (PNG, Agg backend)."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .scans import atomic_write_bytes  # noqa: E402

STYLE = {
    "axes.spines.right": False,
    "axes.spines.top": False,
    "axes.labelsize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    # fixed metadata keeps the bytes reproducible
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_loss(rows, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        it = [r.iteration for r in rows]
        ax.semilogy(it, [max(r.loss, 1e-300) for r in rows], lw=0.8, color="#3969b1")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        lr = ax.twinx()
        lr.plot(it, [r.lr_theta for r in rows], lw=0.8, color="#cc2529", ls="--")
        lr.set_ylabel("learning rate (weights)")
        lr.spines["right"].set_visible(True)
        _save(fig, path)


def plot_distance_image(img, path) -> None:
    """Pinhole images as a heat map, lidar fans as range over beam angle."""
    with plt.rc_context(STYLE):
        v = np.where(np.isfinite(img.values), img.values, np.nan)
        if img.sensor.kind == "fan":
            fig, ax = plt.subplots(figsize=(5, 3))
            ang = np.degrees(img.sensor.beam_angles())
            ax.plot(ang, v[0], ".", ms=1.5, color="#3e9651")
            ax.set_xlabel("beam angle [deg]")
            ax.set_ylabel("distance")
        else:
            fig, ax = plt.subplots(figsize=(4, 4))
            im = ax.imshow(v, cmap="viridis")
            ax.set_axis_off()
            fig.colorbar(im, ax=ax, shrink=0.8, label="distance")
        _save(fig, path)


def plot_points(points, path, reference=None) -> None:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(4, 4))
        three_d = pts.shape[1] == 3
        ax = fig.add_subplot(projection="3d" if three_d else None)
        if reference is not None and len(reference):
            ref = np.atleast_2d(reference)
            ax.scatter(*ref.T, s=0.3, color="0.7", label="reference")
        if len(pts):
            ax.scatter(*pts.T, s=0.5, color="#3969b1", label="model")
        if not three_d:
            ax.set_aspect("equal")
        if reference is not None:
            ax.legend(loc="upper right")
        _save(fig, path)
