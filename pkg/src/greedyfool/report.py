"""Tables (CSV / JSON lines) and figures (PNG via matplotlib's Agg backend)."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import perturbation_image  # noqa: E402

STYLE = {"figure.figsize": (5.0, 3.4), "axes.grid": True, "grid.alpha": 0.3, "font.size": 9}


def _clean(value):
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else round(float(value), 6)
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_csv(rows: list[dict], path, columns: list[str] | None = None) -> Path:
    """Flat CSV with a header; dict values that are not scalars are skipped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = []
        for row in rows:
            for k, v in row.items():
                if k not in columns and not isinstance(v, (dict, list, tuple, np.ndarray)) \
                        and not hasattr(v, "results"):
                    columns.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _clean(row.get(k, "")) for k in columns})
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_direction_curve(rows: list[dict], path) -> Path:
    """Mean pixel count and step/gradient cosine against the scaling percentile q."""
    q = [r["q"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(q, [r["mean_pixels"] for r in rows], "o-", color="C0")
        ax.set_xlabel("scaling percentile q")
        ax.set_ylabel("mean perturbed pixels", color="C0")
        twin = ax.twinx()
        twin.plot(q, [r["cosine"] for r in rows], "s--", color="C1")
        twin.set_ylabel("cosine(step, gradient)", color="C1")
        twin.grid(False)
        return _save(fig, path)


def plot_static_curve(curves: dict[str, list[tuple[int, float]]], path) -> Path:
    """Fooling rate under an m-pixel budget, one line per labelled curve."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, curve in curves.items():
            m, rate = zip(*curve) if curve else ((), ())
            ax.plot(m, rate, "o-", label=label)
        ax.set_xscale("log")
        ax.set_xlabel("pixel budget m")
        ax.set_ylabel("fooling rate (%)")
        ax.set_ylim(0, 100)
        ax.legend()
        return _save(fig, path)


def plot_kappa_sweep(rows: list[dict], path) -> Path:
    """Median pixel count and transfer rates across the confidence margin."""
    kappa = [r["kappa"] for r in rows]
    victims = [k for k in rows[0] if k.startswith("transfer_")] if rows else []
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        a.plot(kappa, [r["median_pixels"] for r in rows], "o-")
        a.set_xlabel("kappa")
        a.set_ylabel("median perturbed pixels")
        for v in victims:
            b.plot(kappa, [r[v] for r in rows], "o-", label=v.removeprefix("transfer_"))
        b.set_xlabel("kappa")
        b.set_ylabel("transfer fooling rate (%)")
        b.set_ylim(bottom=0)
        if victims:
            b.legend()
        return _save(fig, path)


def plot_examples(images, adversarial, maps=None, path="examples.png", n: int = 4) -> Path:
    """Grid of clean image, adversarial image, |perturbation| and (optionally) rho."""
    n = min(n, len(images))
    cols = 4 if maps is not None else 3
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, cols, figsize=(1.6 * cols, 1.6 * n), squeeze=False)
        for i in range(n):
            x, xa = np.asarray(images[i]), np.asarray(adversarial[i])
            panels = [x, xa, perturbation_image(xa - x)]
            if maps is not None:
                panels.append(np.asarray(maps[i])[None] * 255.0)
            for j, p in enumerate(panels):
                ax = axes[i, j]
                img = p[0] if p.shape[0] == 1 else p.transpose(1, 2, 0) / 255.0
                ax.imshow(img, cmap="gray", vmin=0, vmax=255 if p.shape[0] == 1 else None)
                ax.set_axis_off()
        for j, title in enumerate(["clean", "adversarial", "|r|", "rho"][:cols]):
            axes[0, j].set_title(title)
        return _save(fig, path)
