"""Figures written next to the CLI's JSON/CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no timestamp / version metadata so reruns give identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(records: list[dict], path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        steps = [r["step"] for r in records]
        for key, style in (("loss", "-"), ("l_p2i", "--"), ("l_p2t", ":")):
            ax.plot(steps, [r[key] for r in records], style, lw=1.2, label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("contrastive loss")
        ax2 = ax.twinx()
        ax2.plot(steps, [r["logit_scale"] for r in records], color="0.6", lw=0.8)
        ax2.set_ylabel("logit scale", color="0.4")
        ax.legend(loc="upper right")
        return save_figure(fig, path)


def plot_report(report: dict, path) -> Path:
    names = report["classes"]
    conf = np.array([[report["confusion"][a][b] for b in names] for a in names], dtype=float)
    with plt.rc_context(RC):
        fig, (ax, bx) = plt.subplots(1, 2, figsize=(7.5, 3.2), gridspec_kw={"width_ratios": [3, 2]})
        im = ax.imshow(conf, cmap="Blues")
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
        ax.set_yticks(range(len(names)), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        for i in range(len(names)):
            for j in range(len(names)):
                ax.text(j, i, int(conf[i, j]), ha="center", va="center", fontsize=7,
                        color="white" if conf[i, j] > conf.max() / 2 else "black")
        fig.colorbar(im, ax=ax, fraction=0.046)
        keys = list(report["topk"])
        bx.bar(keys, [report["topk"][k] for k in keys], color="0.45")
        bx.set_ylim(0, 100)
        bx.set_ylabel("accuracy (%)")
        return save_figure(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    labels = [r["label"] for r in rows]
    params = [r["trainable_params"] for r in rows]
    accs = [r.get("top1") for r in rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(rows) + 1.5), 3.2))
        x = np.arange(len(rows))
        ax.bar(x, params, color="0.55")
        ax.set_xticks(x, labels, rotation=45, ha="right")
        ax.set_ylabel("trainable parameters")
        if any(a not in (None, "") for a in accs):
            ax2 = ax.twinx()
            ax2.plot(x, [np.nan if a in (None, "") else float(a) for a in accs], "o-", color="C3")
            ax2.set_ylabel("held-out top-1 (%)", color="C3")
            ax2.set_ylim(0, 100)
        return save_figure(fig, path)
