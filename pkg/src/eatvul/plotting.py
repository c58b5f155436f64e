"""Report figures rendered to PNG files next to the delimited outputs."""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_convergence(gen_log, path):
    gens = [e["gen"] for e in gen_log]
    best = [e["best_score"] for e in gen_log]
    mean = [e["mean_score"] for e in gen_log]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(gens, best, marker="o", label="best")
    ax.plot(gens, mean, marker=".", linestyle="--", label="mean")
    ax.set_xlabel("generation")
    ax.set_ylabel("fitness")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_topk(metrics, path):
    ks = [k for k, v in metrics["topk"].items() if v is not None]
    vals = [metrics["topk"][k] for k in ks] + [metrics["asr"]]
    names = [f"top@{k}" for k in ks] + ["all"]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(names, vals, color="tab:red")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("attack success rate")
    ax.set_title(f"snippet size {metrics['snippet_size']}")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_projection(csv_path, path):
    groups = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["label"], row["adversarial"] == "1")
            groups.setdefault(key, ([], []))
            groups[key][0].append(float(row["x"]))
            groups[key][1].append(float(row["y"]))
    fig, ax = plt.subplots(figsize=(5, 4))
    for (label, adv), (xs, ys) in sorted(groups.items()):
        name = f"{label} (adversarial)" if adv else label
        ax.scatter(xs, ys, s=14, marker="x" if adv else "o", label=name)
    ax.legend(fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def render_figures(out_dir, gen_log, metrics, projection_csv=None):
    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    written = []
    p = os.path.join(fig_dir, "fga_convergence.png")
    plot_convergence(gen_log, p)
    written.append(p)
    p = os.path.join(fig_dir, "topk.png")
    plot_topk(metrics, p)
    written.append(p)
    if projection_csv:
        p = os.path.join(fig_dir, "projection.png")
        plot_projection(projection_csv, p)
        written.append(p)
    return written
