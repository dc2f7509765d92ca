"""PNG renderings of the exported boundary grids and gradient tables.

Uses the non-interactive Agg backend so figures can be written on headless
machines. Each function takes the same arrays that the CSV exports contain.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_boundaries", "plot_gradient_distributions"]


def plot_boundaries(x1, x2, logits, ensemble_prob, path, data=None, title=None):
    """Filled ensemble probability with every member's zero-logit contour.

    ``x1``/``x2`` are the grid axes, ``logits`` is M x len(x2) x len(x1) and
    ``ensemble_prob`` is len(x2) x len(x1). ``data`` optionally overlays
    ``(X, y)`` training points.
    """
    fig, ax = plt.subplots(figsize=(4.5, 4.2))
    cf = ax.contourf(x1, x2, ensemble_prob, levels=np.linspace(0, 1, 11), cmap="RdBu_r", alpha=0.55)
    fig.colorbar(cf, ax=ax, label="ensemble P(y=1)")
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for m, L in enumerate(logits):
        if L.min() < 0 < L.max():
            ax.contour(x1, x2, L, levels=[0.0], colors=[colors[m % len(colors)]], linewidths=2)
        ax.plot([], [], color=colors[m % len(colors)], lw=2, label=f"member {m}")
    if data is not None:
        X, y = data
        ax.scatter(X[:, 0], X[:, 1], c=np.where(np.asarray(y) > 0.5, "k", "w"), edgecolors="k", s=10, lw=0.5)
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.legend(loc="lower right", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_gradient_distributions(grads, feature_names, path, max_features=12):
    """Violin plot of per-feature input-gradient components, one colour per member.

    ``grads`` is M x n x D.
    """
    M, _, D = grads.shape
    k = min(D, max_features)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * k * M), 3.6))
    width = 0.8 / M
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for m in range(M):
        pos = np.arange(k) + (m - (M - 1) / 2) * width
        parts = ax.violinplot([grads[m, :, j] for j in range(k)], positions=pos, widths=width,
                              showmeans=True, showextrema=False)
        for body in parts["bodies"]:
            body.set_facecolor(colors[m % len(colors)])
            body.set_alpha(0.6)
        ax.plot([], [], color=colors[m % len(colors)], lw=6, label=f"member {m}")
    ax.axhline(0.0, color="0.5", lw=0.8)
    ax.set_xticks(np.arange(k))
    ax.set_xticklabels(list(feature_names)[:k], rotation=45 if k > 6 else 0, ha="right" if k > 6 else "center")
    ax.set_ylabel("d logit / d x")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
