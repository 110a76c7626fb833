"""Matplotlib figures for simulation reports (written to files, never shown)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import BevGrid  # noqa: E402


def _extent(bev: BevGrid):
    h = bev.cell_size
    ny, nx = bev.shape
    x0, y0 = bev.origin
    return (x0 - h / 2, x0 + (nx - 0.5) * h, y0 - h / 2, y0 + (ny - 0.5) * h)


def _tracks(rows, kind):
    tracks = defaultdict(list)
    for r in rows:
        if r.kind == kind:
            tracks[r.id].append((r.x, r.y))
    return {k: np.asarray(v) for k, v in tracks.items()}


def plot_trajectories(bev: BevGrid, rows, path, lanes=(), crosswalks=(), title: str = "") -> Path:
    """Top-down map of the walkable area with every agent's path."""
    fig, ax = plt.subplots(figsize=(6, 6))
    base = np.where(bev.obstacle, 2, bev.walkable.astype(int))
    ax.imshow(base, origin="lower", extent=_extent(bev), cmap="Greys_r", vmin=-1, vmax=2,
              interpolation="nearest")
    for poly in (cw.polygon for cw in crosswalks):
        p = np.vstack([poly, poly[:1]])
        ax.plot(p[:, 0], p[:, 1], color="tab:orange", lw=1)
    for lane in lanes:
        pts = lane.points
        ax.plot(pts[:, 0], pts[:, 1], "--", color="tab:red", lw=0.8)
    for tr in _tracks(rows, "ped").values():
        ax.plot(tr[:, 0], tr[:, 1], lw=0.8, color="tab:blue", alpha=0.7)
        ax.plot(tr[-1, 0], tr[-1, 1], ".", color="tab:blue", ms=3)
    for tr in _tracks(rows, "car").values():
        ax.plot(tr[:, 0], tr[:, 1], lw=1.2, color="tab:red", alpha=0.5)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal")
    ax.set_title(title or "trajectories")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_speed_profile(rows, path, dt: float = 0.1) -> Path:
    """Active agent counts and mean car speed over time."""
    ticks = sorted({r.tick for r in rows})
    peds = defaultdict(int)
    cars = defaultdict(list)
    waiting = defaultdict(int)
    for r in rows:
        if r.kind == "ped":
            peds[r.tick] += 1
            waiting[r.tick] += r.state == "waiting"
        elif r.speed is not None:
            cars[r.tick].append(r.speed)
    t = np.asarray(ticks, dtype=float) * dt
    fig, (a0, a1) = plt.subplots(2, 1, figsize=(7, 4.5), sharex=True)
    a0.plot(t, [peds[k] for k in ticks], label="pedestrians")
    a0.plot(t, [waiting[k] for k in ticks], label="waiting")
    a0.plot(t, [len(cars[k]) for k in ticks], label="cars")
    a0.set_ylabel("count")
    a0.legend(loc="upper left", fontsize=8)
    a1.plot(t, [np.mean(cars[k]) if cars[k] else np.nan for k in ticks], color="tab:red")
    a1.set_ylabel("mean car speed (m/s)")
    a1.set_xlabel("time (s)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_fields(bev: BevGrid, plan, path, title: str = "") -> Path:
    """Potential, unit cost, discomfort and speed of one pedestrian's plan."""
    fig, axes = plt.subplots(2, 2, figsize=(8, 7))
    for ax, (name, arr) in zip(axes.flat, (("phi", plan.phi), ("C", plan.cost),
                                           ("G", plan.discomfort), ("V", plan.speed))):
        if arr is None:
            ax.set_axis_off()
            continue
        a = np.where(np.isfinite(arr), arr, np.nan)
        im = ax.imshow(a, origin="lower", extent=_extent(bev), interpolation="nearest")
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title(name)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
