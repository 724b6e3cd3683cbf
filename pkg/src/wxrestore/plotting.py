"""Report figures written next to the text/CSV outputs."""

from __future__ import annotations

import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

_FIELD = re.compile(r"(\w+)=([-+0-9.eE]+|nan|inf)")


def parse_log(lines) -> dict[str, np.ndarray]:
    """Columns of a ``step=.. loss=.. [psnr=.. ssim=..]`` log; missing entries are NaN."""
    rows = [dict(_FIELD.findall(line)) for line in lines if line.strip()]
    keys = ("step", "loss", "psnr", "ssim")
    return {k: np.array([float(r.get(k, "nan")) for r in rows]) for k in keys}


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if len(x) < window or window <= 1:
        return x.copy()
    c = np.cumsum(np.insert(x, 0, 0.0))
    head = c[1:window] / np.arange(1, window)
    return np.concatenate([head, (c[window:] - c[:-window]) / window])


def plot_training_log(lines, path: str | Path, window: int = 20) -> Path:
    cols = parse_log(lines)
    has_eval = np.isfinite(cols["psnr"]).any()
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2 if has_eval else 1, figsize=(7 if has_eval else 4, 2.8),
                                 squeeze=False)
        ax = axes[0, 0]
        ax.plot(cols["step"], cols["loss"], color="0.75", lw=0.6, label="loss")
        ax.plot(cols["step"], moving_average(cols["loss"], window), color="C0", lw=1.2,
                label=f"mean of {window}")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("Charbonnier loss")
        ax.legend(frameon=False)
        if has_eval:
            ok = np.isfinite(cols["psnr"])
            ax2 = axes[0, 1]
            ax2.plot(cols["step"][ok], cols["psnr"][ok], "o-", ms=3, color="C1")
            ax2.set_xlabel("step")
            ax2.set_ylabel("eval PSNR (dB)")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_eval_report(per_sample, baseline, path: str | Path) -> Path:
    """Restored vs degraded-input PSNR per sample; points above the diagonal improved."""
    restored = np.array([p for p, _ in per_sample])
    base = np.array([p for p, _ in baseline])
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3.2))
        lo = float(min(restored.min(), base.min())) - 1
        hi = float(max(restored.max(), base.max())) + 1
        ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8, ls="--")
        ax.scatter(base, restored, s=10, color="C0")
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        ax.set_xlabel("degraded PSNR (dB)")
        ax.set_ylabel("restored PSNR (dB)")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
