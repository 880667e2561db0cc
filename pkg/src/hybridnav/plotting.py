"""Matplotlib figures for suite runs, terrain maps and the primitive cost function."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .primitives import CostConfig, primitive_cost  # noqa: E402


def _save(fig, path) -> None:
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_run(run, path, title: str = "") -> None:
    """Top-down view of the obstacles, the driven path and the goal region."""
    fig, ax = plt.subplots(figsize=(7, 5))
    pts = run.world_points
    if len(pts):
        low = pts[pts[:, 2] < 1.0]
        ax.scatter(low[::4, 0], low[::4, 1], s=0.5, c="0.5", label="obstacles")
    traj = run.trajectory
    ax.plot(traj[:, 0], traj[:, 1], "b-", lw=1.5, label="vehicle")
    ax.plot(traj[:1, 0], traj[:1, 1], "go", label="start")
    (x0, x1), (y0, y1) = run.end_ranges
    ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0, fc="g", alpha=0.2, label="end range"))
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"{title}: {run.line.status.value} at t={run.line.t:.1f} s")
    ax.legend(loc="upper left", fontsize=7)
    _save(fig, path)


def plot_terrain(tmap, path) -> None:
    """Roughness and slope maps side by side."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, data, label in ((axes[0], tmap.variance, "variance [m^2]"), (axes[1], tmap.slope, "slope [rad]")):
        im = ax.imshow(data, origin="lower", cmap="viridis")
        ax.set_title(label)
        fig.colorbar(im, ax=ax)
    _save(fig, path)


def plot_cost_function(path, cfg: CostConfig = CostConfig(), goal_angle: float = 0.0) -> None:
    """Collision cost against obstacle distance for one goal angle."""
    d = np.linspace(0.0, 2 * cfg.near_buffer, 400)
    c = [primitive_cost(goal_angle, x, cfg) for x in d]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(d, np.maximum(c, 1e-3))
    ax.axvline(cfg.collision_buffer, color="r", ls="--", label="collision buffer")
    ax.axvline(cfg.near_buffer, color="orange", ls="--", label="near buffer")
    ax.set_xlabel("min obstacle distance [m]")
    ax.set_ylabel("cost")
    ax.legend()
    _save(fig, path)
