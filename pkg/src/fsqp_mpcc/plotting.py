"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .vehicle import PX, PY, VF  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.savefig(path, bbox_inches="tight")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None
    finally:
        plt.close(fig)
    return path


def track_outline(ax, spline, n: int = 600) -> None:
    th = np.linspace(0.0, spline.length, n)
    c = spline.position(th)
    t = spline.tangent(th)
    nrm = np.stack([-t[:, 1], t[:, 0]], axis=1) / np.linalg.norm(t, axis=1)[:, None]
    half = spline.width / 2
    for side in (-1.0, 1.0):
        edge = c + side * half * nrm
        ax.plot(edge[:, 0], edge[:, 1], color="0.3", lw=0.8)
    ax.plot(c[:, 0], c[:, 1], color="0.6", lw=0.6, ls="--")


def run_figures(run, directory, spline=None) -> list[Path]:
    """Path coloured by forward speed plus per-step solve time and CV."""
    directory = Path(directory)
    if not run.steps:
        return []
    xs = np.array([r.state for r in run.steps])
    wall = 1e3 * np.array([r.wall_time for r in run.steps])
    cv = np.array([r.cv for r in run.steps])
    ok = run.converged
    out = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 4.5))
        if spline is not None:
            track_outline(ax, spline)
        sc = ax.scatter(xs[:, PX], xs[:, PY], c=xs[:, VF], s=3, cmap="viridis")
        fig.colorbar(sc, ax=ax, label="v_f [m/s]")
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_title(f"{run.mode.value}: {len(run.steps)} steps")
        out.append(_save(fig, directory / "trajectory.png"))

        fig, (a1, a2) = plt.subplots(2, 1, figsize=(7, 4.5), sharex=True)
        t = np.array([r.t for r in run.steps])
        a1.plot(t[ok], wall[ok], ".", ms=2, label="solved")
        a1.plot(t[~ok], wall[~ok], "x", ms=3, color="C3", label="fallback")
        a1.set_ylabel("solve time [ms]")
        a1.legend(loc="upper right", fontsize=7)
        a2.semilogy(t, np.maximum(cv, 1e-18), ".", ms=2)
        a2.set_ylabel("CV of adopted plan")
        a2.set_xlabel("step")
        out.append(_save(fig, directory / "solver.png"))
    return out


def replay_figures(table, directory) -> list[Path]:
    """CV distribution and cost/runtime per mode."""
    directory = Path(directory)
    if len(table.t) == 0:
        return []
    out = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        floor = 1e-16
        for m, res in table.results.items():
            cv = np.maximum(res["cv"].astype(float), floor)
            bins = np.logspace(-16, max(0.0, np.log10(cv.max()) + 0.5), 50)
            ax.hist(cv, bins=bins, histtype="step", label=m)
        ax.set_xscale("log")
        ax.set_xlabel(f"constraint violation (clipped at {floor:g})")
        ax.set_ylabel("instances")
        ax.legend()
        out.append(_save(fig, directory / "replay_cv.png"))

        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
        names = list(table.results)
        a1.boxplot([1e3 * table.results[m]["wall_time"].astype(float) for m in names], labels=names)
        a1.set_ylabel("solve time [ms]")
        ref: Optional[np.ndarray] = table.results["rti"]["cost"] if "rti" in table.results else None
        for m in names:
            if ref is not None and m != "rti":
                a2.plot(table.t, table.results[m]["cost"] / ref, ".", ms=2, label=f"{m}/rti")
        a2.set_xlabel("step")
        a2.set_ylabel("cost ratio")
        if a2.lines:
            a2.legend(fontsize=7)
        out.append(_save(fig, directory / "replay_stats.png"))
    return out
