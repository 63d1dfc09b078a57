"""Benchmark report rendering: aligned text table, CSV/JSON, and figures."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .instructions import TASKS
from .scoring import SUBSCORE_FIELDS, round2

_TABLE_COLUMNS = list(SUBSCORE_FIELDS) + ["s_ea", "s_vn", "s_vq", "s"]


def render_text_table(table: dict[str, dict[str, float]]) -> str:
    """Fixed-width table of per-task rows, two-decimal rounded."""
    header = ["task", "n"] + _TABLE_COLUMNS
    rows = [header]
    for task in TASKS:
        if task not in table:
            continue
        row = table[task]
        rows.append(
            [task, str(int(row["count"]))]
            + [f"{round2(row[col]):.2f}" for col in _TABLE_COLUMNS]
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for r in rows:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def plot_category_scores(table: dict[str, dict[str, float]], path: str | Path) -> None:
    """Grouped bar chart of category and overall scores per task."""
    tasks = [t for t in TASKS if t in table]
    metrics = ["s_ea", "s_vn", "s_vq", "s"]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.2
    for i, metric in enumerate(metrics):
        xs = [j + (i - 1.5) * width for j in range(len(tasks))]
        ax.bar(xs, [table[t][metric] for t in tasks], width=width, label=metric)
    ax.set_xticks(range(len(tasks)))
    ax.set_xticklabels(tasks)
    ax.set_ylim(0, 10)
    ax.set_ylabel("score")
    ax.set_title("benchmark category scores by task")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_benchmark_report(table: dict[str, dict[str, float]], out_dir: str | Path) -> dict:
    """Emit report.json, report.csv, report.txt and the category-score figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rounded = {
        task: {k: (round2(v) if k != "count" else int(v)) for k, v in row.items()}
        for task, row in table.items()
    }
    paths = {
        "json": out_dir / "report.json",
        "csv": out_dir / "report.csv",
        "txt": out_dir / "report.txt",
        "figure": out_dir / "category_scores.png",
    }
    with open(paths["json"], "w") as f:
        json.dump({"table": table, "rounded": rounded}, f, indent=2)
    with open(paths["csv"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "count"] + _TABLE_COLUMNS)
        for task in TASKS:
            if task not in table:
                continue
            row = table[task]
            writer.writerow(
                [task, int(row["count"])] + [f"{round2(row[c]):.2f}" for c in _TABLE_COLUMNS]
            )
    text = render_text_table(table)
    with open(paths["txt"], "w") as f:
        f.write(text)
    plot_category_scores(table, paths["figure"])
    return {name: str(p) for name, p in paths.items()}


def export_png_frames(video, out_dir: str | Path) -> list[Path]:
    """Write each frame as frame_NNNN.png for quick visual inspection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(video.values):
        path = out_dir / f"frame_{i:04d}.png"
        plt.imsave(path, frame)
        paths.append(path)
    return paths


def plot_loss_curves(log_path: str | Path, out_path: str | Path) -> None:
    """Loss-term curves from a JSONL training log."""
    steps, series = [], {}
    with open(log_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            steps.append(record["step"])
            for key in ("l_ic", "l_latent", "l_attn", "total"):
                series.setdefault(key, []).append(record[key])
    if not steps:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, values in series.items():
        ax.plot(steps, values, label=key, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training losses")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
