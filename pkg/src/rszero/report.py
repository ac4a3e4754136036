"""Report rendering: JSON, aligned text table, CSV, and matplotlib figures."""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import RECALL_IOU_THRESHOLDS, EvalReport

_SEEN_COLOR = "#4878b0"
_UNSEEN_COLOR = "#d1615d"


def _fmt(v, width=8, digits=4):
    if v is None:
        return " " * (width - 1) + "-"
    return f"{v:{width}.{digits}f}"


def _class_rows(report: EvalReport):
    for cid in sorted(report.per_class_gt):
        name = (
            report.class_names[cid]
            if cid < len(report.class_names)
            else f"class-{cid}"
        )
        group = "seen" if cid in report.seen_class_ids else "unseen"
        yield cid, name, group


def format_text_table(report: EvalReport) -> str:
    """Aligned per-class table plus the aggregate block."""
    name_w = max([len("class")] + [len(n) for _, n, _ in _class_rows(report)])
    header = (
        f"{'id':>4}  {'class':<{name_w}}  {'group':<6}  {'n_gt':>5}  "
        f"{'AP@0.5':>8}  {'R@100/0.4':>9}  {'R@100/0.5':>9}  {'R@100/0.6':>9}"
    )
    lines = [f"protocol: {report.protocol}", "", header, "-" * len(header)]
    for cid, name, group in _class_rows(report):
        recalls = [report.per_class_recall.get((cid, t)) for t in RECALL_IOU_THRESHOLDS]
        lines.append(
            f"{cid:>4}  {name:<{name_w}}  {group:<6}  {report.per_class_gt[cid]:>5}  "
            f"{_fmt(report.per_class_ap.get(cid))}  "
            f"{_fmt(recalls[0], 9)}  {_fmt(recalls[1], 9)}  {_fmt(recalls[2], 9)}"
        )
    lines.append("-" * len(header))
    lines.append("aggregates (percent):")
    lines.append(
        f"  mAP    seen {_fmt(report.map_seen)}  unseen {_fmt(report.map_unseen)}"
        f"  HM {_fmt(report.hm_map)}"
    )
    lines.append(
        f"  R@100  seen {_fmt(report.recall_seen)}  unseen {_fmt(report.recall_unseen)}"
        f"  HM {_fmt(report.hm_recall)}"
    )
    return "\n".join(lines) + "\n"


def write_csv_report(path, report: EvalReport) -> None:
    """Per-class metrics as comma-delimited rows."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            ["class_id", "class_name", "group", "n_gt", "ap_50"]
            + [f"recall_100_{t:g}" for t in RECALL_IOU_THRESHOLDS]
        )
        for cid, name, group in _class_rows(report):
            writer.writerow(
                [
                    cid,
                    name,
                    group,
                    report.per_class_gt[cid],
                    f"{report.per_class_ap.get(cid):.6f}",
                ]
                + [
                    f"{report.per_class_recall[(cid, t)]:.6f}"
                    for t in RECALL_IOU_THRESHOLDS
                ]
            )


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata={"Software": "rszero"})
    plt.close(fig)


def figure_ap_bars(report: EvalReport, path) -> None:
    rows = list(_class_rows(report))
    names = [n for _, n, _ in rows]
    aps = [report.per_class_ap.get(cid, 0.0) for cid, _, _ in rows]
    colors = [_SEEN_COLOR if g == "seen" else _UNSEEN_COLOR for _, _, g in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(rows) + 2), 4))
    ax.bar(range(len(rows)), aps, color=colors)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("AP @ IoU 0.5")
    ax.set_title(f"Per-class AP ({report.protocol})")
    handles = [
        plt.Rectangle((0, 0), 1, 1, color=_SEEN_COLOR),
        plt.Rectangle((0, 0), 1, 1, color=_UNSEEN_COLOR),
    ]
    ax.legend(handles, ["seen", "unseen"], loc="upper right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def figure_pr_curves(report: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    for cid, name, group in _class_rows(report):
        curve = report.pr_curves.get(cid)
        if not curve or not curve[0]:
            continue
        recalls, precisions = curve
        style = "-" if group == "seen" else "--"
        ax.plot([0.0] + recalls, [1.0] + precisions, style, label=name, linewidth=1.2)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.05)
    ax.set_title("PR curves @ IoU 0.5 (dashed = unseen)")
    ax.legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    _save(fig, path)


def figure_recall_thresholds(report: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for cid, name, group in _class_rows(report):
        ys = [report.per_class_recall.get((cid, t)) for t in RECALL_IOU_THRESHOLDS]
        style = "-o" if group == "seen" else "--s"
        ax.plot(RECALL_IOU_THRESHOLDS, ys, style, label=name, linewidth=1.2, markersize=3)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("Recall@100")
    ax.set_ylim(0, 1.05)
    ax.set_xticks(RECALL_IOU_THRESHOLDS)
    ax.set_title("Recall@100 vs IoU threshold (dashed = unseen)")
    ax.legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    _save(fig, path)


def write_report(outdir, report: EvalReport) -> dict[str, str]:
    """Write report.json / report.txt / report.csv plus figures; returns the paths."""
    os.makedirs(outdir, exist_ok=True)
    figures_dir = os.path.join(outdir, "figures")
    os.makedirs(figures_dir, exist_ok=True)
    paths = {
        "json": os.path.join(outdir, "report.json"),
        "txt": os.path.join(outdir, "report.txt"),
        "csv": os.path.join(outdir, "report.csv"),
        "ap_bars": os.path.join(figures_dir, "ap_per_class.png"),
        "pr_curves": os.path.join(figures_dir, "pr_curves.png"),
        "recall_thresholds": os.path.join(figures_dir, "recall_vs_iou.png"),
    }
    with open(paths["json"], "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(paths["txt"], "w", encoding="utf-8") as f:
        f.write(format_text_table(report))
    write_csv_report(paths["csv"], report)
    figure_ap_bars(report, paths["ap_bars"])
    figure_pr_curves(report, paths["pr_curves"])
    figure_recall_thresholds(report, paths["recall_thresholds"])
    return paths
