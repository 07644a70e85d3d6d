"""Figure rendering for the report paths (headless matplotlib).

Every report command writes its delimited output first; these helpers
render the companion figures next to it.  Matplotlib is imported
lazily with the Agg backend so library use never needs a display.
"""

from __future__ import annotations


def _plt():
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt
    return plt


def save_utilization_histogram(hist: dict[int, int], path, title: str = "") -> None:
    """Posting-size histogram: how often identifiers are shared."""
    plt = _plt()
    sizes = sorted(hist)
    counts = [hist[s] for s in sizes]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(sizes, counts, width=0.85, color="#4878a8", edgecolor="black",
           linewidth=0.4)
    ax.set_xlabel("documents sharing one identifier")
    ax.set_ylabel("number of identifiers")
    if max(counts, default=1) / max(min(counts, default=1), 1) > 50:
        ax.set_yscale("log")
    ax.set_title(title or "identifier utilization")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curves(metrics: list[dict], path) -> None:
    """Per-component loss trajectories from a metrics log."""
    plt = _plt()
    steps = [m["step"] for m in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("l_c", "l_ce", "total"):
        ax1.plot(steps, [m[key] for m in metrics], label=key)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax1.set_title("objective")
    for key in ("l_di", "l_bot", "l_ib", "l_quant"):
        if any(m.get(key, 0.0) != 0.0 for m in metrics):
            ax2.plot(steps, [m[key] for m in metrics], label=key)
    ax2.plot(steps, [m["unique_probe_ids"] for m in metrics],
             label="unique probe ids", linestyle="--", color="black")
    ax2.set_xlabel("step")
    ax2.legend()
    ax2.set_title("auxiliary criteria / probe")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_by_split(metrics_doc: dict, path) -> None:
    """Grouped bars of expectation metrics, overall and per split."""
    plt = _plt()
    groups = {"full": metrics_doc}
    groups.update(metrics_doc.get("per_split", {}))
    names = list(groups)
    keys = ["recall_expected"]
    fig, ax = plt.subplots(figsize=(1.8 + 2.2 * len(names), 4))
    ks = sorted(groups[names[0]]["recall_expected"], key=int)
    width = 0.8 / (len(ks) + 1)
    for j, k in enumerate(ks):
        xs = [i + j * width for i in range(len(names))]
        ax.bar(xs, [groups[n]["recall_expected"][k] for n in names],
               width=width, label=f"R@{k}")
    xs = [i + len(ks) * width for i in range(len(names))]
    ax.bar(xs, [groups[n]["mrr10_expected"] for n in names], width=width,
           label="MRR@10", color="#777777")
    ax.set_xticks([i + width * len(ks) / 2 for i in range(len(names))])
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("expectation metric")
    ax.legend()
    ax.set_title("retrieval quality")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
