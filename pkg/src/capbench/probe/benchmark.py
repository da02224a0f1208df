"""Dev-selected linear probing across tasks, layers and window policies."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .linear import CLASSIFIERS, ProbeError, ProbeSpec, Standardizer, fit
from .metrics import as_accuracy_like, higher_is_better, metric

log = logging.getLogger(__name__)

DEFAULT_SPECS = tuple(ProbeSpec(c) for c in CLASSIFIERS)


@dataclass(frozen=True)
class TaskInfo:
    task_id: str
    metric: str = "accuracy"
    positive: str | None = None  # positive label for eer tasks


@dataclass
class ProbeRow:
    task: str
    layer: int
    policy: str
    classifier: str
    metric: str
    dev_metric: float
    test_metric: float
    chosen: bool = False


@dataclass
class Predictions:
    clip_ids: list[str]
    labels: list[str]
    predictions: list[str]
    scores: list[float] | None = None


@dataclass
class ProbeReport:
    rows: list[ProbeRow] = field(default_factory=list)
    # (task, layer, policy) -> chosen classifier's test predictions
    predictions: dict[tuple[str, int, str], Predictions] = field(default_factory=dict)
    tasks: dict[str, TaskInfo] = field(default_factory=dict)

    def chosen(self) -> list[ProbeRow]:
        return [r for r in self.rows if r.chosen]

    def chosen_row(self, task: str, layer: int, policy: str) -> ProbeRow:
        for r in self.rows:
            if r.chosen and (r.task, r.layer, r.policy) == (task, layer, policy):
                return r
        raise KeyError((task, layer, policy))

    def layers(self) -> list[int]:
        return sorted({r.layer for r in self.rows})

    def policies(self) -> list[str]:
        return sorted({r.policy for r in self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "layer", "policy", "classifier", "metric", "dev_metric",
                    "test_metric", "chosen"])
        for r in self.rows:
            w.writerow([r.task, r.layer, r.policy, r.classifier, r.metric,
                        repr(r.dev_metric), repr(r.test_metric), int(r.chosen)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ProbeReport":
        rows = []
        lines = [l for l in text.splitlines() if l and not l.startswith("#")]
        for d in csv.DictReader(lines):
            rows.append(ProbeRow(d["task"], int(d["layer"]), d["policy"], d["classifier"],
                                 d["metric"], float(d["dev_metric"]), float(d["test_metric"]),
                                 bool(int(d["chosen"]))))
        rep = cls(rows)
        rep.tasks = {r.task: TaskInfo(r.task, r.metric) for r in rows}
        return rep


def _split(meta: Sequence[dict], X: np.ndarray, split: str):
    idx = [i for i, m in enumerate(meta) if m["split"] == split]
    if not idx:
        raise ProbeError(f"missing split: {split}")
    return (X[idx], np.array([meta[i]["label"] for i in idx]),
            [meta[i]["clip_id"] for i in idx])


def _evaluate(model, X, y, info: TaskInfo):
    pred = model.predict(X)
    scores = None
    if info.metric == "eer":
        pos = info.positive if info.positive is not None else model.classes[-1]
        col = int(np.flatnonzero(model.classes == pos)[0])
        scores = model.predict_proba(X)[:, col]
        value = metric("eer", y, scores=scores, positive=pos)
    else:
        value = metric(info.metric, y, pred=pred)
    return value, pred, scores


def probe_cell(meta: Sequence[dict], X: np.ndarray, info: TaskInfo,
               specs: Sequence[ProbeSpec] = DEFAULT_SPECS):
    """Fit every spec on train, choose on dev, report test.  Returns (rows, predictions)."""
    Xtr, ytr, _ = _split(meta, X, "train")
    Xdv, ydv, _ = _split(meta, X, "dev")
    Xte, yte, ids = _split(meta, X, "test")
    std = Standardizer.fit(Xtr)
    classes = np.unique(ytr)
    results = []
    for spec in specs:
        model = fit(spec, std(Xtr), ytr, classes=classes)
        dev, _, _ = _evaluate(model, std(Xdv), ydv, info)
        test, pred, scores = _evaluate(model, std(Xte), yte, info)
        results.append((spec.classifier, dev, test, pred, scores))
    sign = 1.0 if higher_is_better(info.metric) else -1.0
    best = max(range(len(results)), key=lambda i: (sign * results[i][1], -i))
    rows = [ProbeRow(info.task_id, -1, "", name, info.metric, dev, test, i == best)
            for i, (name, dev, test, _, _) in enumerate(results)]
    _, _, _, pred, scores = results[best]
    preds = Predictions(ids, list(map(str, yte)), list(map(str, pred)),
                        None if scores is None else [float(s) for s in scores])
    return rows, preds


def run_benchmark(table, tasks: Sequence[TaskInfo],
                  specs: Sequence[ProbeSpec] = DEFAULT_SPECS,
                  layers: Sequence[int] | None = None,
                  policies: Sequence[str] | None = None,
                  workers: int | None = 1) -> ProbeReport:
    """Probe every (task, layer, policy) cell of an EmbeddingTable.

    ``workers > 1`` (or None for the CPU count) fits cells on a thread pool;
    results are assembled in cell order, so the report does not depend on it.
    """
    report = ProbeReport(tasks={t.task_id: t for t in tasks})
    present = set(table.tasks())
    for t in tasks:
        if t.task_id not in present:
            raise ProbeError(f"task {t.task_id!r} not present in embedding table")
    layers = table.layers() if layers is None else layers
    policies = table.policies() if policies is None else policies
    cells = [(t, layer, policy) for t in tasks for policy in policies for layer in layers]

    def run(cell):
        t, layer, policy = cell
        meta, X = table.select(t.task_id, layer, policy)
        return probe_cell(meta, X, t, specs)

    if workers == 1:
        results = [run(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, cells))
    for (t, layer, policy), (rows, preds) in zip(cells, results):
        for r in rows:
            r.layer, r.policy = layer, policy
        report.rows.extend(rows)
        report.predictions[(t.task_id, layer, policy)] = preds
    return report


# ---------------------------------------------------------------------------
# aggregation


def aggregate_scores(report: ProbeReport, which: str = "test",
                     tasks: Sequence[str] | None = None) -> dict[tuple[int, str], float]:
    """Mean over tasks of accuracy-like metrics (EER as 1 - EER), per (layer, policy)."""
    cells: dict[tuple[int, str], list[float]] = {}
    for r in report.chosen():
        if tasks is not None and r.task not in tasks:
            continue
        v = r.test_metric if which == "test" else r.dev_metric
        cells.setdefault((r.layer, r.policy), []).append(as_accuracy_like(v, r.metric))
    return {k: float(np.mean(sorted(v))) for k, v in sorted(cells.items())}


def best_layer(report: ProbeReport, policy: str = "full") -> int:
    """Universal layer: argmax of the dev aggregate (ties go to the shallower layer)."""
    dev = aggregate_scores(report, "dev")
    cands = [(s, -l) for (l, p), s in dev.items() if p == policy]
    if not cands:
        raise ProbeError(f"no results for policy {policy!r}")
    return -max(cands)[1]


def best_per_task(report: ProbeReport, policy: str = "full") -> dict[str, ProbeRow]:
    """Per task, the chosen row of the layer with the best dev metric."""
    out = {}
    for task, info in report.tasks.items():
        rows = [r for r in report.chosen() if r.task == task and r.policy == policy]
        if not rows:
            continue
        sign = 1.0 if higher_is_better(info.metric) else -1.0
        out[task] = max(rows, key=lambda r: (sign * r.dev_metric, -r.layer))
    return out


# ---------------------------------------------------------------------------
# per-example disagreement


@dataclass
class DisagreementMatrix:
    models: list[str]
    values: list[list[float | None]]
    excluded: list[tuple[str, str, str]]  # (model X, model Y, task)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_x"] + self.models)
        for name, row in zip(self.models, self.values):
            w.writerow([name] + ["" if v is None else repr(v) for v in row])
        return buf.getvalue()


def disagreement_matrix(predictions: Mapping[str, Mapping[str, Predictions]]
                        ) -> DisagreementMatrix:
    """P[X][Y]: task-mean of P(Y correct | X and Y disagree).

    ``predictions[model][task]`` must cover the same clips for every model.
    Tasks without any disagreement are dropped for that pair (recorded).
    """
    models = list(predictions)
    if len(models) < 2:
        raise ProbeError("need at least two models")
    tasks = sorted(set.intersection(*(set(p) for p in predictions.values())))
    values: list[list[float | None]] = []
    excluded = []
    for x in models:
        row = []
        for y in models:
            if x == y:
                row.append(None)
                continue
            per_task = []
            for t in tasks:
                px, py = predictions[x][t], predictions[y][t]
                if px.clip_ids != py.clip_ids:
                    raise ProbeError(f"models {x} and {y} predict different clips on {t}")
                a, b = np.array(px.predictions), np.array(py.predictions)
                lab = np.array(px.labels)
                dis = a != b
                if not dis.any():
                    excluded.append((x, y, t))
                    continue
                per_task.append(float(np.mean(b[dis] == lab[dis])))
            row.append(float(np.mean(per_task)) if per_task else None)
        values.append(row)
    return DisagreementMatrix(models, values, excluded)


def predictions_jsonl(preds: Predictions) -> str:
    lines = []
    for i, cid in enumerate(preds.clip_ids):
        row = {"clip_id": cid, "label": preds.labels[i], "prediction": preds.predictions[i]}
        if preds.scores is not None:
            row["score"] = preds.scores[i]
        lines.append(json.dumps(row, sort_keys=True))
    return "".join(l + "\n" for l in lines)


def read_predictions_jsonl(text: str) -> Predictions:
    rows = [json.loads(l) for l in text.splitlines() if l.strip()]
    scores = [r["score"] for r in rows] if rows and "score" in rows[0] else None
    return Predictions([r["clip_id"] for r in rows], [r["label"] for r in rows],
                       [r["prediction"] for r in rows], scores)
