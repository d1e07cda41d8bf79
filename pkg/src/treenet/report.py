"""Rendering of metric and efficiency results: tables, CSV, and figures.

Everything here works from the structured rows persisted by earlier
commands -- no models are loaded. The report directory ends up with
aligned-text tables, comma-delimited copies of every row set, and PNG
figures for the metric and efficiency comparisons.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .assembly import MetricsReport


def write_ndjson(path: str | Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_ndjson(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_csv(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    fields = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def render_table(headers: list[str], rows: list[list[str]]) -> str:
    """Plain aligned-column text table."""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines) + "\n"


def _num(x, digits=4) -> str:
    return f"{x:.{digits}f}" if isinstance(x, (int, float)) else str(x)


def render_metrics_table(summaries: list[dict]) -> str:
    """Side-by-side Dice/IoU/Acc rows, one line per (model, dataset)."""
    headers = ["Model", "Dataset", "Images", "Dice", "IoU", "Acc"]
    rows = [[s["model"], s["dataset"], str(s["n_images"]),
             _num(s["dice"]), _num(s["iou"]), _num(s["acc"])] for s in summaries]
    return render_table(headers, rows)


def render_efficiency_table(records: list[dict], ratios: dict[str, float] | None = None) -> str:
    """FLOPs/parameters/peak-memory rows plus per-family reduction factors."""
    headers = ["Model", "Variant", "Batch", "FLOPs (GFLOP)", "Parameters (M)",
               "Peak Memory (GB)"]
    rows = []
    for r in records:
        mem = "unavailable" if r.get("peak_mem_gb") is None else _num(r["peak_mem_gb"], 3)
        rows.append([r["family"], r["variant"], str(r["batch"]),
                     _num(r["flops_g"], 3), _num(r["params_m"], 3), mem])
    text = render_table(headers, rows)
    if ratios:
        lines = [f"FLOP reduction (original/treenet): {fam} = {ratio:.2f}x"
                 for fam, ratio in sorted(ratios.items())]
        text += "\n" + "\n".join(lines) + "\n"
    return text


def write_metrics_artifacts(out_dir: str | Path, report: MetricsReport) -> None:
    """Persist one evaluation: per-image rows, summary, rendered table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = report.summary_row()
    rows = [dict(row, model=report.model_name, dataset=report.dataset_name)
            for row in report.rows]
    write_ndjson(out_dir / "metrics.ndjson", rows)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    (out_dir / "table.txt").write_text(render_metrics_table([summary]))


def write_efficiency_artifacts(out_dir: str | Path, records: list[dict],
                               ratios: dict[str, float]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_ndjson(out_dir / "efficiency.ndjson", records)
    (out_dir / "ratios.json").write_text(json.dumps(ratios, indent=2) + "\n")
    (out_dir / "table.txt").write_text(render_efficiency_table(records, ratios))


def _metrics_figure(summaries: list[dict], path: Path) -> None:
    labels = [f"{s['model']}\n{s['dataset']}" for s in summaries]
    x = range(len(summaries))
    width = 0.25
    fig, ax = plt.subplots(figsize=(max(5, 1.8 * len(summaries)), 4))
    for offset, key in zip((-width, 0.0, width), ("dice", "iou", "acc")):
        ax.bar([i + offset for i in x], [s[key] for s in summaries],
               width=width, label=key.capitalize() if key != "iou" else "IoU")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("Segmentation metrics by model")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _dice_histogram(per_image: list[dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.hist([r["dice"] for r in per_image], bins=20, range=(0, 1),
            color="tab:blue", edgecolor="black")
    ax.set_xlabel("per-image Dice")
    ax.set_ylabel("count")
    ax.set_title("Dice distribution on the test split")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _efficiency_figure(records: list[dict], path: Path) -> None:
    labels = [f"{r['family']}/{r['variant']}\nb{r['batch']}" for r in records]
    values = [r["flops_g"] for r in records]
    colors = ["tab:green" if r["variant"] == "treenet" else "tab:red" for r in records]
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(records)), 4))
    ax.bar(range(len(records)), values, color=colors)
    ax.set_xticks(range(len(records)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_yscale("log")
    ax.set_ylabel("GFLOPs")
    ax.set_title("Forward-pass cost by variant")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _training_curves_figure(logs: dict[str, list[dict]], path: Path) -> None:
    fig, axes = plt.subplots(1, len(logs), figsize=(4 * len(logs), 3.5), squeeze=False)
    for ax, (phase, log) in zip(axes[0], sorted(logs.items())):
        epochs = [e["epoch"] for e in log]
        ax.plot(epochs, [e["train_loss"] for e in log], label="train")
        if log and "val_loss" in log[0]:
            ax.plot(epochs, [e["val_loss"] for e in log], label="val")
        ax.set_title(phase)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def generate_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Regenerate tables, CSV exports and figures from persisted rows only."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    summaries = []
    per_image = []
    for eval_dir in sorted(run_dir.glob("**/eval")):
        summary_path = eval_dir / "summary.json"
        rows_path = eval_dir / "metrics.ndjson"
        if summary_path.exists():
            summaries.append(json.loads(summary_path.read_text()))
        if rows_path.exists():
            per_image.extend(read_ndjson(rows_path))
    if summaries:
        table = render_metrics_table(summaries)
        (out_dir / "metrics_table.txt").write_text(table)
        write_csv(out_dir / "metrics_summary.csv", summaries)
        _metrics_figure(summaries, out_dir / "metrics_by_model.png")
        written += [out_dir / "metrics_table.txt", out_dir / "metrics_summary.csv",
                    out_dir / "metrics_by_model.png"]
    if per_image:
        write_csv(out_dir / "metrics_per_image.csv", per_image)
        _dice_histogram(per_image, out_dir / "dice_distribution.png")
        written += [out_dir / "metrics_per_image.csv", out_dir / "dice_distribution.png"]

    eff_path = run_dir / "profile" / "efficiency.ndjson"
    if eff_path.exists():
        records = read_ndjson(eff_path)
        ratios_path = run_dir / "profile" / "ratios.json"
        ratios = json.loads(ratios_path.read_text()) if ratios_path.exists() else {}
        (out_dir / "efficiency_table.txt").write_text(
            render_efficiency_table(records, ratios))
        write_csv(out_dir / "efficiency.csv", records)
        _efficiency_figure(records, out_dir / "efficiency_flops.png")
        written += [out_dir / "efficiency_table.txt", out_dir / "efficiency.csv",
                    out_dir / "efficiency_flops.png"]

    logs = {}
    logs_dir = run_dir / "logs"
    if logs_dir.is_dir():
        for log_path in sorted(logs_dir.glob("*.json")):
            entries = json.loads(log_path.read_text())
            if entries:
                logs[log_path.stem] = entries
    if logs:
        _training_curves_figure(logs, out_dir / "training_curves.png")
        written.append(out_dir / "training_curves.png")

    return written
