"""Report emission: machine JSON, CSV tables, and matplotlib figures.

Every report path writes the figures next to the delimited output, so a
run directory is self-contained: metrics.json + metrics.csv + *.png.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .pipeline import AblationRow, EvalSummary


def _write_json(path, payload: dict):
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_eval_report(outdir: str, summary: EvalSummary, extra: dict | None = None):
    """metrics.json, per-case metrics.csv, and the metric histogram figure."""
    os.makedirs(outdir, exist_ok=True)
    payload = summary.to_dict()
    if extra:
        payload.update(extra)
    _write_json(os.path.join(outdir, "metrics.json"), payload)

    with open(os.path.join(outdir, "metrics.csv"), "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "tooth_type", "cd_l2_mm2", "fidelity_mm",
                         "f_score", "margin_mm", "tau_mm", "n_pred", "n_gt"])
        for r in summary.results:
            writer.writerow([
                r.case_id, r.tooth_type, repr(r.report.cd_l2_mm2),
                repr(r.report.fidelity_mm), repr(r.report.f_score),
                repr(r.margin_distance_mm), repr(r.report.tau_mm),
                r.report.n_pred, r.report.n_gt,
            ])

    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    panels = [
        ("cd_l2_mm2", "CD-L2 (mm$^2$)"),
        ("fidelity_mm", "fidelity (mm)"),
        ("f_score", "F-score"),
    ]
    for ax, (attr, title) in zip(axes, panels):
        vals = [getattr(r.report, attr) for r in summary.results]
        ax.hist(vals, bins=min(20, max(5, len(vals) // 3)), color="#4878a8")
        ax.axvline(float(np.mean(vals)), color="#a83232", lw=1.2)
        ax.set_xlabel(title)
        ax.set_ylabel("cases")
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "metrics_hist.png"), dpi=130)
    plt.close(fig)

    per_type = summary.per_type()
    if per_type:
        fig, ax = plt.subplots(figsize=(6.4, 3.4))
        types = list(per_type)
        x = np.arange(len(types))
        ax.bar(x - 0.2, [per_type[t]["cd_l2_mm2"] for t in types], 0.4,
               label="CD-L2 (mm$^2$)", color="#4878a8")
        ax.bar(x + 0.2, [per_type[t]["fidelity_mm"] for t in types], 0.4,
               label="fidelity (mm)", color="#6aa36a")
        ax.set_xticks(x, types)
        ax.legend(frameon=False)
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
        fig.tight_layout()
        fig.savefig(os.path.join(outdir, "per_type.png"), dpi=130)
        plt.close(fig)


_ABLATION_FIELDS = ("pcr", "tp_prompt", "cmpl", "cd_l2_mm2", "fidelity_mm",
                    "f_score", "margin_mm", "error")


def write_ablation_report(outdir: str, rows: list[AblationRow],
                          extra: dict | None = None):
    """ablation.json, the toggle/metric CSV table, and a bar figure."""
    os.makedirs(outdir, exist_ok=True)
    payload = {"rows": [r.to_dict() for r in rows]}
    if extra:
        payload.update(extra)
    _write_json(os.path.join(outdir, "ablation.json"), payload)

    with open(os.path.join(outdir, "ablation.csv"), "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["PCR", "TP Prompt", "CMPL", "CD-L2 (mm2)",
                         "Fidelity (mm)", "F-Score", "Margin (mm)", "Error"])
        for r in rows:
            d = r.to_dict()
            writer.writerow([
                "yes" if d["pcr"] else "no",
                "yes" if d["tp_prompt"] else "no",
                "yes" if d["cmpl"] else "no",
                repr(d["cd_l2_mm2"]), repr(d["fidelity_mm"]),
                repr(d["f_score"]), repr(d["margin_mm"]), d["error"],
            ])

    ok = [r for r in rows if not r.error]
    if ok:
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
        names = [
            f"PCR={'y' if r.use_refiner else 'n'}\nTP={'y' if r.use_tp_prompt else 'n'}\n{r.loss}"
            for r in ok
        ]
        x = np.arange(len(ok))
        for ax, attr, title in zip(
            axes, ("cd_l2_mm2", "fidelity_mm", "f_score"),
            ("CD-L2 (mm$^2$)", "fidelity (mm)", "F-score"),
        ):
            ax.bar(x, [getattr(r, attr) for r in ok], color="#4878a8")
            ax.set_xticks(x, names, fontsize=7)
            ax.set_title(title, fontsize=9)
            ax.spines["top"].set_visible(False)
            ax.spines["right"].set_visible(False)
        fig.tight_layout()
        fig.savefig(os.path.join(outdir, "ablation.png"), dpi=130)
        plt.close(fig)


def write_training_report(outdir: str, history: list[dict]):
    """history.csv plus the loss-curve figure."""
    os.makedirs(outdir, exist_ok=True)
    fields = ["iteration", "stage", "bce", "cmpl", "normals", "total"]
    with open(os.path.join(outdir, "history.csv"), "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in history:
            writer.writerow([row["iteration"], row["stage"]] +
                            [repr(float(row[k])) for k in fields[2:]])
    if not history:
        return
    fig, ax = plt.subplots(figsize=(6.8, 3.6))
    its = [row["iteration"] for row in history]
    for key, color in (("total", "#333333"), ("bce", "#4878a8"),
                       ("cmpl", "#a83232"), ("normals", "#6aa36a")):
        ax.plot(its, [row[key] for row in history], label=key, lw=1.0, color=color)
    boundary = [row["iteration"] for row in history if row["stage"] == 2]
    if boundary and boundary[0] > 0:
        ax.axvline(boundary[0], color="#888888", ls="--", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "training.png"), dpi=130)
    plt.close(fig)
