"""Static report artifacts: MAE heat-maps, synthesized RGB previews, per-band CSV."""
from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cubeio import atomic_write  # noqa: E402
from .metrics import mae_map, mae_per_band  # noqa: E402
from .pipeline import synthesize_rgb  # noqa: E402

CMAP = "viridis"
MAE_VMAX = 0.1


def _save(fig, path, dpi=150) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=dpi)
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def mae_heatmap(pred, ref, path, vmax: float = MAE_VMAX, title: str | None = None) -> np.ndarray:
    """Band-averaged absolute error on a fixed colour scale ``[0, vmax]``."""
    emap = mae_map(pred, ref)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(emap, cmap=CMAP, vmin=0.0, vmax=vmax, interpolation="nearest")
    fig.colorbar(im, ax=ax, label="MAE")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    return emap


def rgb_preview(cube, path, responses=None, title: str | None = None) -> np.ndarray:
    rgb = np.clip(synthesize_rgb(cube, responses), 0.0, 1.0).transpose(1, 2, 0)
    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    ax.imshow(rgb, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    return rgb


def band_mae_plot(per_band: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(per_band)), per_band, marker=".", lw=1)
    ax.set_xlabel("band")
    ax.set_ylabel("MAE")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def write_band_csv(per_band: np.ndarray, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["band", "mae"])
    for i, v in enumerate(per_band):
        writer.writerow([i, repr(float(v))])
    atomic_write(path, buf.getvalue().encode("utf-8"))


def read_band_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(row["mae"]) for row in csv.DictReader(fh)])


def report(pred, ref, out_dir, vmax: float = MAE_VMAX, responses=None) -> dict[str, str]:
    """Write the full artifact set into ``out_dir``; returns name -> path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_band = mae_per_band(pred, ref)
    paths = {
        "csv": out / "mae_per_band.csv",
        "heatmap": out / "mae_map.png",
        "rgb_pred": out / "rgb_pred.png",
        "rgb_ref": out / "rgb_ref.png",
        "band_curve": out / "mae_per_band.png",
    }
    write_band_csv(per_band, paths["csv"])
    mae_heatmap(pred, ref, paths["heatmap"], vmax)
    rgb_preview(pred, paths["rgb_pred"], responses, "prediction")
    rgb_preview(ref, paths["rgb_ref"], responses, "reference")
    band_mae_plot(per_band, paths["band_curve"])
    return {k: str(v) for k, v in paths.items()}
