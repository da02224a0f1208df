"""Headline tables, context-window sweep and figure data from probe results."""

from __future__ import annotations

import csv
import io
import logging
from typing import Mapping

import numpy as np

from .probe import ProbeReport, aggregate_scores, best_layer, best_per_task
from .probe.metrics import as_accuracy_like

log = logging.getLogger(__name__)

# Relative accuracy of the best layer under each chunk length versus full
# context, as reported for 600M+ parameter Conformers.  Shown for comparison
# only; desk-scale runs are never checked against it.
LARGE_SCALE_REFERENCE = {"4s": 0.99, "3s": 0.99, "2s": 0.98, "1s": 0.96, "0.5s": 0.91}


def _policy_seconds(policy: str) -> float:
    return float("inf") if policy == "full" else float(policy.rstrip("s"))


def sort_policies(policies) -> list[str]:
    return sorted(policies, key=_policy_seconds, reverse=True)


def report_context_sweep(reports: Mapping[str, ProbeReport]) -> dict:
    """Relative accuracy per window and the per-(model, layer, task) loss table.

    Ratio for window w = test aggregate at the dev-best layer under w divided
    by the same quantity under full context.  Windows without results are
    omitted with a warning.
    """
    ratios: dict[str, dict[str, float]] = {}
    losses = []
    for model, rep in reports.items():
        pols = set(rep.policies())
        if "full" not in pols:
            raise ValueError(f"model {model}: full-context results missing")
        test = aggregate_scores(rep, "test")
        full = test[(best_layer(rep, "full"), "full")]
        ratios[model] = {}
        for w in sort_policies(pols - {"full"}):
            ratios[model][w] = test[(best_layer(rep, w), w)] / full
        full_rows = {(r.task, r.layer): r for r in rep.chosen() if r.policy == "full"}
        for r in rep.chosen():
            if r.policy == "full":
                continue
            base = full_rows.get((r.task, r.layer))
            if base is None:
                continue
            losses.append({
                "model": model, "layer": r.layer, "task": r.task, "policy": r.policy,
                "loss": as_accuracy_like(base.test_metric, r.metric)
                - as_accuracy_like(r.test_metric, r.metric),
            })
    all_windows = sort_policies({w for m in ratios.values() for w in m})
    summary = {}
    for w in all_windows:
        present = [m for m in ratios if w in ratios[m]]
        if len(present) < len(ratios):
            log.warning("window %s missing for some models; omitted there", w)
        # mean over (models x layers) of the task-averaged loss
        cells: dict[tuple[str, int], list[float]] = {}
        for row in losses:
            if row["policy"] == w:
                cells.setdefault((row["model"], row["layer"]), []).append(row["loss"])
        per_cell = [float(np.mean(v)) for _, v in sorted(cells.items())]
        summary[w] = {
            "mean_ratio": float(np.mean([ratios[m][w] for m in present])),
            "loss_mean": float(np.mean(per_cell)) if per_cell else None,
            "loss_std": float(np.std(per_cell)) if per_cell else None,
            "num_cells": len(per_cell),
        }
    return {
        "ratios": ratios,
        "summary": summary,
        "losses": losses,
        "reference_large_scale": dict(LARGE_SCALE_REFERENCE),
        "reference_note": "relative accuracy reported for 600M+ parameter Conformers on the "
                          "full benchmark; cited for comparison, not asserted",
    }


def context_loss_csv(sweep: dict, header: Mapping[str, str] | None = None) -> str:
    buf = _with_header(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "layer", "task", "policy", "loss"])
    for r in sweep["losses"]:
        w.writerow([r["model"], r["layer"], r["task"], r["policy"], repr(r["loss"])])
    return buf.getvalue()


def context_ratio_csv(sweep: dict, header: Mapping[str, str] | None = None) -> str:
    buf = _with_header(header)
    ref = " ".join(f"{k}={v}" for k, v in sweep["reference_large_scale"].items())
    buf.write(f"# reference (large-scale, not asserted): {ref}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "policy", "relative_accuracy"])
    for model, ratios in sweep["ratios"].items():
        for pol, v in ratios.items():
            w.writerow([model, pol, repr(v)])
    for pol, s in sweep["summary"].items():
        w.writerow(["mean", pol, repr(s["mean_ratio"])])
    return buf.getvalue()


def headline_tables(reports: Mapping[str, ProbeReport], policy: str = "full") -> dict:
    """Best (model, layer) per task on dev, and every model's best single layer."""
    per_task: dict[str, dict] = {}
    for model, rep in reports.items():
        for task, row in best_per_task(rep, policy).items():
            info = rep.tasks[task]
            key = as_accuracy_like(row.dev_metric, info.metric)
            cur = per_task.get(task)
            if cur is None or key > cur["_key"]:
                per_task[task] = {"_key": key, "model": model, "layer": row.layer,
                                  "classifier": row.classifier, "metric": info.metric,
                                  "dev": row.dev_metric, "test": row.test_metric}
    for v in per_task.values():
        v.pop("_key")
    single = {}
    for model, rep in reports.items():
        layer = best_layer(rep, policy)
        agg = aggregate_scores(rep, "test")[(layer, policy)]
        single[model] = {
            "layer": layer,
            "aggregate_test": agg,
            "aggregate_dev": aggregate_scores(rep, "dev")[(layer, policy)],
            "tasks": {r.task: r.test_metric for r in rep.chosen()
                      if r.layer == layer and r.policy == policy},
        }
    return {"best_per_task": dict(sorted(per_task.items())), "best_single_layer": single}


def headline_csv(tables: dict, header: Mapping[str, str] | None = None) -> str:
    buf = _with_header(header)
    w = csv.writer(buf, lineterminator="\n")
    tasks = sorted(tables["best_per_task"])
    w.writerow(["row"] + tasks)
    w.writerow(["best_per_task"] + [repr(tables["best_per_task"][t]["test"]) for t in tasks])
    w.writerow(["best_per_task_source"] + [
        f"{tables['best_per_task'][t]['model']}:{tables['best_per_task'][t]['layer']}"
        for t in tasks])
    for model, s in tables["best_single_layer"].items():
        w.writerow([f"best_single_layer:{model}:{s['layer']}"]
                   + [repr(s["tasks"].get(t, float("nan"))) for t in tasks])
    return buf.getvalue()


def aggregates_csv(report: ProbeReport, header: Mapping[str, str] | None = None) -> str:
    buf = _with_header(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "policy", "dev_aggregate", "test_aggregate"])
    dev, test = aggregate_scores(report, "dev"), aggregate_scores(report, "test")
    for (layer, pol) in sorted(test, key=lambda k: (-_policy_seconds(k[1]), k[0])):
        w.writerow([layer, pol, repr(dev[(layer, pol)]), repr(test[(layer, pol)])])
    return buf.getvalue()


def _with_header(header: Mapping[str, str] | None) -> io.StringIO:
    buf = io.StringIO()
    for k, v in (header or {}).items():
        buf.write(f"# {k}: {v}\n")
    return buf


def render_markdown(report: dict) -> str:
    """Short human-readable summary of a run report."""
    out = [f"# Run report `{report['fingerprint']}`", ""]
    tables = report.get("headline")
    if tables:
        out += ["## Best per task (dev-selected)", "", "| task | metric | test | model | layer |",
                "|---|---|---|---|---|"]
        for t, v in tables["best_per_task"].items():
            out.append(f"| {t} | {v['metric']} | {v['test']:.4f} | {v['model']} | {v['layer']} |")
        out += ["", "## Best single layer", "", "| model | layer | dev agg | test agg |",
                "|---|---|---|---|"]
        for m, v in tables["best_single_layer"].items():
            out.append(f"| {m} | {v['layer']} | {v['aggregate_dev']:.4f} | "
                       f"{v['aggregate_test']:.4f} |")
    sweep = report.get("context_sweep")
    if sweep:
        out += ["", "## Context windows (relative to full context)", "",
                "| window | mean ratio | mean loss | std |", "|---|---|---|---|"]
        for w, s in sweep["summary"].items():
            lm = "" if s["loss_mean"] is None else f"{s['loss_mean']:.4f}"
            ls = "" if s["loss_std"] is None else f"{s['loss_std']:.4f}"
            out.append(f"| {w} | {s['mean_ratio']:.4f} | {lm} | {ls} |")
        ref = ", ".join(f"{k}: {v}" for k, v in sweep["reference_large_scale"].items())
        out += ["", f"Large-scale reference ({sweep['reference_note']}): {ref}"]
    dis = report.get("disagreement")
    if dis:
        out += ["", "## P(column correct | row and column disagree)", "",
                "| | " + " | ".join(dis["models"]) + " |",
                "|---" * (len(dis["models"]) + 1) + "|"]
        for m, row in zip(dis["models"], dis["values"]):
            out.append(f"| {m} | " + " | ".join("" if v is None else f"{v:.3f}" for v in row)
                       + " |")
    return "\n".join(out) + "\n"
