"""Training-curve rendering: a PNG beside each run's metrics CSV."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

# columns drawn on the right-hand [0, 1] axis instead of the loss axis
QUALITY_COLUMNS = ("accuracy", "hmean")
SKIP_COLUMNS = ("epoch", "lr")


def render_curves(log, out_path, title=None):
    """Plot loss columns against epoch, quality columns on a twin axis.

    The loss axis switches to log scale only when every plotted value is
    positive (ablation runs legitimately log all-zero columns).
    """
    epochs = log.column("epoch")
    loss_cols = [c for c in log.columns
                 if c not in SKIP_COLUMNS and c not in QUALITY_COLUMNS]
    quality_cols = [c for c in log.columns if c in QUALITY_COLUMNS]

    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    positive = True
    for name in loss_cols:
        vals = log.column(name)
        positive = positive and all(v > 0 for v in vals)
        ax.plot(epochs, vals, label=name, linewidth=1.4)
    if loss_cols and positive:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.25)

    handles, labels = ax.get_legend_handles_labels()
    if quality_cols:
        twin = ax.twinx()
        for name in quality_cols:
            line, = twin.plot(epochs, log.column(name), "--", color="tab:green",
                              linewidth=1.6, label=name)
            handles.append(line)
            labels.append(name)
        twin.set_ylabel(" / ".join(quality_cols))
        twin.set_ylim(0.0, 1.05)
    if title:
        ax.set_title(title)
    if handles:
        ax.legend(handles, labels, loc="center right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
