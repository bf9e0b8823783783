"""Static PNG plots for evaluation reports and ablation tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PRIMARY_METRIC = {"pir": "psnr", "classification": "accuracy", "segmentation": "miou"}


def plot_eval(report: dict, out: str | Path) -> list[Path]:
    """One metric-vs-severity figure per task, restored and LQ curves per degradation kind."""
    out = Path(out)
    written = []
    for task_id, entry in report.items():
        metric = PRIMARY_METRIC[entry["kind"]]
        series: dict[str, list] = {}
        for key, vals in entry["per_degradation"].items():
            kind, sev = key.split(":")
            series.setdefault(kind, []).append((int(sev), vals["restored"].get(metric), vals["lq"].get(metric)))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for kind, pts in sorted(series.items()):
            pts.sort()
            xs = [p[0] for p in pts]
            line = ax.plot(xs, [p[1] for p in pts], marker="o", label=f"{kind} restored")[0]
            ax.plot(xs, [p[2] for p in pts], marker="x", linestyle="--", color=line.get_color(), label=f"{kind} LQ")
        ax.set_xlabel("severity")
        ax.set_ylabel(metric)
        ax.set_title(task_id)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"eval_{task_id}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def plot_ablation(result: dict, out: str | Path) -> Path:
    """Bar charts of mean PSNR and accuracy per configuration."""
    summary = result["summary"]
    names = list(summary)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, metric in zip(axes, ("psnr", "accuracy")):
        vals = [summary[n][metric] if summary[n][metric] is not None else 0.0 for n in names]
        ax.bar(range(len(names)), vals)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels([n.split("/", 1)[1] for n in names], rotation=45, ha="right", fontsize=7)
        ax.set_ylabel(metric)
        lo = min(v for v in vals if v) if any(vals) else 0.0
        ax.set_ylim(bottom=lo * 0.95)
    fig.tight_layout()
    path = Path(out) / "ablation.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
