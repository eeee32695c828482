"""Training-curve plots and a text summary for one run directory."""
from __future__ import annotations

from pathlib import Path

import numpy as np

REWARD_COLUMNS = ("reward_all", "reward_class", "reward_iou")
LOSS_COLUMNS = ("loss_total", "ce", "bce", "dice", "dis", "grpo")


def slope(y: np.ndarray) -> float:
    """Least-squares slope of ``y`` against its index."""
    if len(y) < 2:
        return 0.0
    return float(np.polyfit(np.arange(len(y), dtype=float), y, 1)[0])


def _plot(path: Path, x, series: dict, title: str, ylabel: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, y in series.items():
        ax.plot(x, y, label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def render_report(curves_path, out_dir) -> str:
    from .pipeline import read_curves

    c = read_curves(curves_path)
    out = Path(out_dir)
    x = c["step"]
    written = []
    if "reward_all" in c:
        _plot(out / "rewards.png", x, {k: c[k] for k in REWARD_COLUMNS}, "rewards", "mean reward")
        _plot(out / "reasoning_length.png", x, {"mean_reasoning_length": c["mean_reasoning_length"]},
              "reasoning length", "tokens")
        _plot(out / "intra_group_std.png", x, {"intra_group_std": c["intra_group_std"]},
              "intra-group std", "std of total reward")
        written += ["rewards.png", "reasoning_length.png", "intra_group_std.png"]
    losses = {k: c[k] for k in LOSS_COLUMNS if k in c}
    _plot(out / "losses.png", x, losses, "loss components", "loss")
    written.append("losses.png")

    lines = [f"{'column':<24} {'first':>10} {'last':>10} {'mean':>10} {'slope':>11}"]
    for k, y in c.items():
        if k == "step":
            continue
        lines.append(f"{k:<24} {y[0]:10.4f} {y[-1]:10.4f} {y.mean():10.4f} {slope(y):11.2e}")
    lines.append("plots: " + ", ".join(written))
    summary = "\n".join(lines)
    (out / "summary.txt").write_text(summary + "\n")
    return summary
