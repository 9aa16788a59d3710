"""Report rendering: delimited files plus matplotlib figures, written
atomically (temp file + rename) next to each other in the run directory.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _save_figure(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.",
                               suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)


def _fmt(x):
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# training report


def write_train_report(report, out_dir):
    out_dir = Path(out_dir)
    cats = list(report.category_names)

    lines = ["fold," + ",".join(f"waf1_{c}" for c in cats)]
    for f, row in enumerate(report.fold_scores):
        lines.append(f"{f}," + ",".join(_fmt(v) for v in row))
    lines.append("mean," + ",".join(_fmt(v) for v in report.mean))
    lines.append("std," + ",".join(_fmt(v) for v in report.std))
    atomic_write_text(out_dir / "metrics.csv", "\n".join(lines) + "\n")

    txt = ["Weighted F1 over cross-validation folds", ""]
    for c, name in enumerate(cats):
        txt.append(f"  {name}: {report.mean[c] * 100:.2f} "
                   f"+/- {report.std[c] * 100:.2f}")
    atomic_write_text(out_dir / "summary.txt", "\n".join(txt) + "\n")

    if report.history:
        h = ["fold,epoch,loss,ce,con"]
        for f, hist in enumerate(report.history):
            for row in hist:
                h.append(f"{f},{row['epoch']},{_fmt(row['loss'])},"
                         f"{_fmt(row['ce'])},{_fmt(row['con'])}")
        atomic_write_text(out_dir / "loss_history.csv", "\n".join(h) + "\n")

    fig, ax = plt.subplots(figsize=(7, 4))
    k, ncat = report.fold_scores.shape
    width = 0.8 / ncat
    xs = np.arange(k)
    for c, name in enumerate(cats):
        ax.bar(xs + c * width, report.fold_scores[:, c], width, label=name)
    ax.set_xlabel("fold")
    ax.set_ylabel("weighted F1")
    ax.set_ylim(0, 1.05)
    ax.set_xticks(xs + width)
    ax.set_xticklabels([str(i) for i in range(k)])
    ax.legend(fontsize=8)
    _save_figure(fig, out_dir / "figures" / "fold_scores.png")

    if report.history:
        fig, ax = plt.subplots(figsize=(7, 4))
        for f, hist in enumerate(report.history):
            ax.plot([r["epoch"] for r in hist], [r["loss"] for r in hist],
                    label=f"fold {f}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.legend(fontsize=8)
        _save_figure(fig, out_dir / "figures" / "loss_curves.png")


# ---------------------------------------------------------------------------
# ablation report


def _mask_label(mask):
    order = ("manometry", "impedance", "patient")
    return "+".join(m[:3] for m in order if m in mask)


def write_ablation_report(report, out_dir):
    out_dir = Path(out_dir)
    cats = list(report.category_names)

    header = ["manometry", "impedance", "patient"]
    lines = [",".join(header + [f"waf1_{c}_mean,waf1_{c}_std" for c in cats])]
    for row in report.ablation_rows:
        flags = ["1" if m in row["mask"] else "0" for m in header]
        vals = []
        for c in range(len(cats)):
            vals.append(_fmt(row["mean"][c]))
            vals.append(_fmt(row["std"][c]))
        lines.append(",".join(flags + vals))
    atomic_write_text(out_dir / "ablation.csv", "\n".join(lines) + "\n")

    txt = ["Modality ablation (weighted F1, mean +/- std over folds)", ""]
    for row in report.ablation_rows:
        cells = "  ".join(f"{row['mean'][c] * 100:6.2f}+/-{row['std'][c] * 100:5.2f}"
                          for c in range(len(cats)))
        txt.append(f"  {_mask_label(row['mask']):<15} {cells}")
    atomic_write_text(out_dir / "ablation_summary.txt", "\n".join(txt) + "\n")

    stat_lines = ["category,friedman_statistic,friedman_p"]
    for name, (statv, p) in report.friedman.items():
        stat_lines.append(f"{name},{_fmt(statv)},{_fmt(p)}")
    stat_lines.append("")
    stat_lines.append("category,model_a,model_b,raw_p,holm_p")
    for name, details in report.holm.items():
        for d in details:
            i, j = d["pair"]
            stat_lines.append(f"{name},{i},{j},{_fmt(d['raw_p'])},"
                              f"{_fmt(d['corrected_p'])}")
    atomic_write_text(out_dir / "statistics.csv", "\n".join(stat_lines) + "\n")

    fig, ax = plt.subplots(figsize=(8, 4))
    n = len(report.ablation_rows)
    width = 0.8 / len(cats)
    xs = np.arange(n)
    for c, name in enumerate(cats):
        means = [row["mean"][c] for row in report.ablation_rows]
        stds = [row["std"][c] for row in report.ablation_rows]
        ax.bar(xs + c * width, means, width, yerr=stds, capsize=2, label=name)
    ax.set_xticks(xs + width)
    ax.set_xticklabels([_mask_label(r["mask"]) for r in report.ablation_rows],
                       rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("weighted F1")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    _save_figure(fig, out_dir / "figures" / "ablation.png")


# ---------------------------------------------------------------------------
# correlation report


def write_correlation_report(corr, out_dir):
    out_dir = Path(out_dir)
    measures = ("pearson", "spearman", "nmi")
    header = ["feature"]
    for t in corr.target_names:
        for m in measures:
            header.append(f"{t}_{m}")
        header.append(f"{t}_score")
    header.append("final_score")
    lines = [",".join(header)]
    for i, name in enumerate(corr.names):
        row = [name]
        for t in range(len(corr.target_names)):
            row.extend(_fmt(corr.per_measure[i, t, m]) for m in range(3))
            row.append(_fmt(corr.per_target[i, t]))
        row.append(_fmt(corr.final[i]))
        lines.append(",".join(row))
    atomic_write_text(out_dir / "correlations.csv", "\n".join(lines) + "\n")

    order = np.argsort(corr.final)
    fig, ax = plt.subplots(figsize=(7, max(4, 0.18 * len(corr.names))))
    ax.barh(np.arange(len(order)), corr.final[order])
    ax.set_yticks(np.arange(len(order)))
    ax.set_yticklabels([corr.names[i] for i in order], fontsize=6)
    ax.set_xlabel("aggregated correlation score")
    _save_figure(fig, out_dir / "figures" / "correlations.png")


# ---------------------------------------------------------------------------
# embeddings


def write_embeddings_csv(rows, category_names, path):
    if not rows:
        raise ValueError("no embedding rows to write")
    dim = len(rows[0][3])
    header = ["patient_id", "category", "label"] + [f"e{i}" for i in range(dim)]
    lines = [",".join(header)]
    for pid, c, label, vec in rows:
        lines.append(",".join([pid, category_names[c], str(label)]
                              + [_fmt(v) for v in vec]))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# gradcheck


def write_gradcheck_report(results, path):
    lines = ["variants,group,max_rel_error,passed"]
    for r in results:
        lines.append(f"{r['variants']},{r['group']},{r['max_rel_error']:.3e},"
                     f"{int(r['passed'])}")
    atomic_write_text(path, "\n".join(lines) + "\n")
