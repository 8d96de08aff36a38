"""Report figures written as PNG files (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import PRPoint  # noqa: E402

_META = {"Software": None}


def plot_pr_curve(path, curve: list[PRPoint], area: float, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot([p.recall for p in curve], [p.precision for p in curve], marker=".", lw=1.2)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"{title} A_PR={area:.3f}".strip())
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_score_trace(path, s: np.ndarray, per_channel: np.ndarray, tau: float, channel_names,
                     rate: float = 2.0, t_gt: int | None = None, title: str = "") -> None:
    """Anomaly score over time with the threshold, above a per-channel score heat strip."""
    t = np.arange(s.size) / rate
    fig, (ax, ax2) = plt.subplots(2, 1, figsize=(9, 5.5), sharex=True,
                                  gridspec_kw={"height_ratios": [1.3, 1]})
    ax.plot(t, s, lw=0.8, label="s")
    ax.axhline(tau, color="tab:red", ls="--", lw=1, label="tau")
    if t_gt is not None:
        ax.axvline(t_gt / rate, color="k", ls=":", lw=1, label="anomaly onset")
    ax.set_ylabel("NLL")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    # clip the colour range so a single spike does not flatten the strip
    lo, hi = np.percentile(per_channel, [1, 99])
    ax2.imshow(per_channel.T, aspect="auto", interpolation="nearest", cmap="magma",
               extent=(t[0], t[-1] if t.size > 1 else 1.0, per_channel.shape[1] - 0.5, -0.5),
               vmin=lo, vmax=hi)
    ax2.set_yticks(range(len(channel_names)))
    ax2.set_yticklabels(channel_names, fontsize=6)
    ax2.set_xlabel("time [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
