"""Figure rendering for analysis reports.

Matplotlib charts (PNG) are written alongside the delimited exports, plus a
small hand-rolled SVG bar chart whose rect heights are exactly proportional
to the selection ratios, so downstream checks can read them back without a
rasterizer.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SVG_W, _SVG_H, _SVG_PAD = 420, 240, 30


def selection_ratio_svg(ratios, path) -> None:
    """Emit a minimal SVG bar chart; bar height = ratio * plot height."""
    r = np.asarray(ratios, dtype=np.float64)
    plot_h = _SVG_H - 2 * _SVG_PAD
    plot_w = _SVG_W - 2 * _SVG_PAD
    slot = plot_w / r.size
    bar_w = 0.7 * slot
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<line x1="{_SVG_PAD}" y1="{_SVG_H - _SVG_PAD}" x2="{_SVG_W - _SVG_PAD}" '
        f'y2="{_SVG_H - _SVG_PAD}" stroke="black"/>',
    ]
    for i, v in enumerate(r):
        h = v * plot_h
        x = _SVG_PAD + i * slot + (slot - bar_w) / 2
        y = _SVG_H - _SVG_PAD - h
        parts.append(f'<rect x="{x:.3f}" y="{y:.6f}" width="{bar_w:.3f}" '
                     f'height="{h:.6f}" fill="#4878a8"/>')
        parts.append(f'<text x="{x + bar_w / 2:.3f}" y="{_SVG_H - _SVG_PAD + 16}" '
                     f'font-size="11" text-anchor="middle">{i + 1}</text>')
    parts.append(f'<text x="{_SVG_W / 2}" y="{_SVG_PAD - 12}" font-size="12" '
                 f'text-anchor="middle">selection ratio per block</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


def svg_bar_heights(path) -> np.ndarray:
    """Read back the bar heights written by :func:`selection_ratio_svg`."""
    import re

    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return np.array([float(m) for m in re.findall(r'height="([0-9.eE+-]+)" fill', text)])


def render_selection_figure(report, path) -> None:
    """Bar chart of selection ratios with the residual prompt weight noted."""
    blocks = np.arange(1, report.ratios.size + 1)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.bar(blocks, report.ratios, color="#4878a8", width=0.7)
    ax.set_xlabel("block")
    ax.set_ylabel("selection ratio")
    ax.set_xticks(blocks)
    ax.set_ylim(0.0, max(1.0, float(report.ratios.max()) * 1.1))
    ax.set_title(f"block influence on final prompts "
                 f"(residual initial-prompt weight {report.residual_weight:.3g})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_attention_figure(grid: np.ndarray, block: int, path) -> None:
    """Heatmap of the CLS-row attention over the patch grid."""
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(grid, cmap="viridis")
    ax.set_title(f"CLS attention, block {block} (mean over heads)")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_metrics_figure(epochs, losses, acc_points, path) -> None:
    """Training-loss curve with accuracy checkpoints on a twin axis."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(epochs, losses, color="#4878a8", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if acc_points:
        ax2 = ax.twinx()
        xs = [p[0] for p in acc_points]
        ys = [p[1] for p in acc_points]
        ax2.plot(xs, ys, "o-", color="#b0413e", label="train accuracy")
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
