"""Drop-curve figures (matplotlib, headless)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_drop_curves(curves: dict, path, sd: dict | None = None, title: str = "Node dropping", xs=None) -> None:
    """One line per method; ``sd`` adds a shaded mean +/- sd band, ``xs`` overrides the removal count axis."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(curves):
        acc = np.asarray(curves[method], dtype=np.float64)
        k = np.arange(len(acc)) if xs is None else np.asarray(xs)
        ax.plot(k, acc, label=method, lw=1.5)
        if sd is not None and method in sd:
            s = np.asarray(sd[method], dtype=np.float64)
            ax.fill_between(k, acc - s, acc + s, alpha=0.15)
    ax.set_xlabel("neighbors removed" if xs is None else "fraction of neighbors removed")
    ax.set_ylabel("target accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
