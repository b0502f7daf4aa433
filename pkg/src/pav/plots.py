"""Report figures written next to the CSV outputs."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}


def read_loss_csv(path) -> dict[str, list[float]]:
    cols: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k, v in row.items():
                cols.setdefault(k, []).append(float(v))
    return cols


def plot_loss(csv_path, png_path=None) -> Path:
    """Log-scale loss curves from a ``loss.csv``; the figure goes next to it by default."""
    csv_path = Path(csv_path)
    png_path = Path(png_path) if png_path is not None else csv_path.with_suffix(".png")
    cols = read_loss_csv(csv_path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        it = cols.get("iteration", [])
        for key, label in (("total", "total"), ("L_color", "color"), ("L_depth", "depth")):
            if key in cols and it:
                ax.plot(it, cols[key], label=label, lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        if it:
            ax.set_yscale("log")
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(png_path)
        plt.close(fig)
    return png_path


def plot_metrics(rows: list[dict], png_path) -> Path:
    """Bar chart of PSNR and SSIM per appearance row of a metrics table."""
    png_path = Path(png_path)
    labels = [f"{r['appearance']}/{r['split']}" for r in rows]
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2)
        x = range(len(rows))
        a.bar(x, [float(r["psnr"]) for r in rows], color="tab:blue")
        a.set_ylabel("PSNR (dB)")
        b.bar(x, [float(r["ssim"]) for r in rows], color="tab:orange")
        b.set_ylabel("SSIM")
        b.set_ylim(0, 1)
        for ax in (a, b):
            ax.set_xticks(list(x))
            ax.set_xticklabels(labels, rotation=45, ha="right")
        fig.tight_layout()
        fig.savefig(png_path)
        plt.close(fig)
    return png_path
