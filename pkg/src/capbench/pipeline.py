"""Declarative run configuration and the staged pipeline.

Stages run in order ``synth -> pretrain -> extract -> probe -> analyze ->
report``.  Each stage writes a stamp holding a fingerprint of everything it
depends on; a stage whose stamp matches and whose outputs exist is skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import analysis, report as rpt
from .conformer import EncoderConfig
from .extract import EmbeddingTable, WindowPolicy, extract_all
from .featenc import FeatEncConfig
from .frontend import (AudioClip, SyntheticTaskSpec, ingest_wav_dir, log_mel, read_manifest,
                       read_wav, synthesize_corpus, write_manifest, write_wav)
from .pretrain import (Trainer, TrainConfig, build_model, load_checkpoint, train,
                       write_metrics)
from .probe import (ProbeReport, ProbeSpec, TaskInfo, aggregate_scores, best_layer,
                    disagreement_matrix, run_benchmark)
from .probe.benchmark import predictions_jsonl, read_predictions_jsonl
from .util import atomic_write_text, canonical_json, fingerprint, set_single_thread

log = logging.getLogger(__name__)

STAGES = ("synth", "pretrain", "extract", "probe", "analyze", "report")
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage {stage} failed: {cause}")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TaskEntry:
    """A benchmark task: either a synthetic recipe or a ``<split>/<label>/*.wav`` tree."""

    task_id: str
    synthetic: SyntheticTaskSpec | None = None
    wav_dir: str | None = None
    metric: str | None = None
    positive: str | None = None

    @property
    def info(self) -> TaskInfo:
        kind = self.metric or (self.synthetic.metric_kind if self.synthetic else "accuracy")
        pos = self.positive
        if kind == "eer" and pos is None and self.synthetic is not None:
            pos = self.synthetic.labels()[-1]
        return TaskInfo(self.task_id, kind, pos)

    def to_dict(self) -> dict:
        d = {"task_id": self.task_id, "metric": self.metric, "positive": self.positive}
        if self.synthetic is not None:
            d["synthetic"] = self.synthetic.to_dict()
        if self.wav_dir is not None:
            d["wav_dir"] = self.wav_dir
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskEntry":
        syn = d.get("synthetic")
        spec = SyntheticTaskSpec.from_dict({**syn, "task_id": d["task_id"]}) if syn else None
        return cls(d["task_id"], spec, d.get("wav_dir"), d.get("metric"), d.get("positive"))


@dataclass
class ModelEntry:
    name: str
    featenc: FeatEncConfig = field(default_factory=FeatEncConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int | None = None  # falls back to the run seed

    def to_dict(self) -> dict:
        return {"name": self.name, "featenc": asdict(self.featenc), "encoder": asdict(self.encoder),
                "train": asdict(self.train), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelEntry":
        return cls(d["name"], FeatEncConfig(**d.get("featenc", {})),
                   EncoderConfig(**d.get("encoder", {})), TrainConfig(**d.get("train", {})),
                   d.get("seed"))


@dataclass
class AnalysisConfig:
    cka_clips: int = 256
    attention_clips: int = 64
    plateau_tol: float = 0.02


@dataclass
class RunConfig:
    pretrain_corpus: list[SyntheticTaskSpec]
    tasks: list[TaskEntry]
    models: list[ModelEntry]
    policies: list[str] = field(default_factory=lambda: ["full"])
    layers: list[int] | None = None
    probes: list[ProbeSpec] = field(default_factory=lambda: [
        ProbeSpec("logreg"), ProbeSpec("balanced_logreg"), ProbeSpec("lda")])
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 7
    output_dir: str = "runs/desk"
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "pretrain_corpus": [s.to_dict() for s in self.pretrain_corpus],
            "tasks": [t.to_dict() for t in self.tasks],
            "models": [m.to_dict() for m in self.models],
            "policies": list(self.policies),
            "layers": self.layers,
            "probes": [asdict(p) for p in self.probes],
            "analysis": asdict(self.analysis),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if d.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')!r}")
        try:
            cfg = cls(
                pretrain_corpus=[SyntheticTaskSpec.from_dict(s) for s in d["pretrain_corpus"]],
                tasks=[TaskEntry.from_dict(t) for t in d["tasks"]],
                models=[ModelEntry.from_dict(m) for m in d["models"]],
                policies=list(d.get("policies", ["full"])),
                layers=d.get("layers"),
                probes=[ProbeSpec(**p) for p in d.get("probes", [{"classifier": c} for c in
                                                                  ("logreg", "balanced_logreg",
                                                                   "lda")])],
                analysis=AnalysisConfig(**d.get("analysis", {})),
                seed=int(d.get("seed", 7)),
                output_dir=d.get("output_dir", "runs/desk"),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed config: {e}") from e
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self) -> None:
        names = [m.name for m in self.models]
        if not names:
            raise ConfigError("at least one model is required")
        if len(set(names)) != len(names):
            raise ConfigError("model names must be unique")
        ids = [t.task_id for t in self.tasks]
        if not ids or len(set(ids)) != len(ids):
            raise ConfigError("task ids must be unique and non-empty")
        for t in self.tasks:
            if (t.synthetic is None) == (t.wav_dir is None):
                raise ConfigError(f"task {t.task_id}: give exactly one of synthetic / wav_dir")
            if t.synthetic is not None:
                t.synthetic.validate()
        for s in self.pretrain_corpus:
            s.validate()
        if not self.pretrain_corpus and any(m.train.steps > 0 for m in self.models):
            raise ConfigError("pretraining needs a pretrain_corpus")
        pols = [WindowPolicy.parse(p).name for p in self.policies]
        if "full" not in pols:
            raise ConfigError("policies must include full")
        if self.layers is not None:
            for m in self.models:
                bad = [l for l in self.layers if not 0 <= l <= m.encoder.num_layers]
                if bad:
                    raise ConfigError(f"model {m.name}: layers {bad} out of range")

    def content_dict(self) -> dict:
        """Everything that determines results; the output location is excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        return d

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.content_dict())

    def model_seed(self, m: ModelEntry) -> int:
        return self.seed if m.seed is None else m.seed

    def layers_for(self, m: ModelEntry) -> list[int]:
        return sorted(self.layers) if self.layers is not None \
            else list(range(m.encoder.num_layers + 1))


def default_config() -> RunConfig:
    """Desk-scale defaults: 512-clip pretraining corpus, four probe tasks, trained vs random."""
    return RunConfig(
        pretrain_corpus=[SyntheticTaskSpec("pretrain", "speaker", 32, (16, 0, 0), (2.0, 4.0),
                                           seed=123)],
        tasks=[
            TaskEntry("speaker", SyntheticTaskSpec("speaker", "speaker", 10, (20, 10, 10),
                                                   (2.0, 4.0), seed=7)),
            TaskEntry("prosody", SyntheticTaskSpec("prosody", "prosody", 3, (20, 10, 10),
                                                   (2.0, 4.0), seed=11)),
            TaskEntry("prosody_imbalanced",
                      SyntheticTaskSpec("prosody_imbalanced", "prosody", 3, (60, 30, 30),
                                        (2.0, 4.0), seed=13, class_proportions=(0.7, 0.2, 0.1))),
            TaskEntry("spoof", SyntheticTaskSpec("spoof", "spoof", 2, (30, 10, 10), (2.0, 4.0),
                                                 seed=17)),
        ],
        models=[ModelEntry("cap"), ModelEntry("random", train=TrainConfig(steps=0))],
        policies=["full", "2s", "1s", "0.5s"],
    )


# ---------------------------------------------------------------------------
# corpus persistence


def _clip_file(root: Path, clip: AudioClip | dict) -> Path:
    d = clip if isinstance(clip, dict) else clip.manifest_row()
    name = d["clip_id"].replace("/", "__") + ".wav"
    return root / d["split"] / d["label"] / name


def save_corpus(clips: list[AudioClip], root: Path) -> None:
    for c in clips:
        path = _clip_file(root, c)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(path, c.samples)
    write_manifest(clips, root / "manifest.jsonl")


def load_corpus(root: Path) -> list[AudioClip]:
    clips = []
    for row in read_manifest(root / "manifest.jsonl"):
        x, _ = read_wav(_clip_file(root, row))
        clips.append(AudioClip(x, row["clip_id"], row["label"], row["split"], row["task_id"]))
    return clips


# ---------------------------------------------------------------------------
# run context + stages


@dataclass
class StageResult:
    stage: str
    status: str  # ran | skipped | failed
    seconds: float
    outputs: list[str]
    error: str | None = None


@dataclass
class RunReport:
    fingerprint: str
    stages: list[StageResult]
    report: dict | None = None

    @property
    def ok(self) -> bool:
        return all(s.status != "failed" for s in self.stages)

    @property
    def failed_stage(self) -> str | None:
        return next((s.stage for s in self.stages if s.status == "failed"), None)


class Run:
    def __init__(self, config: RunConfig, out_dir: str | Path | None = None,
                 single_thread: bool = False, skip_bad: bool = False):
        self.cfg = config
        self.out = Path(out_dir if out_dir is not None else config.output_dir)
        self.single_thread = single_thread
        self.skip_bad = skip_bad
        self._corpora: dict[str, list[AudioClip]] = {}
        if single_thread:
            set_single_thread()

    # paths
    def corpus_dir(self, task_id: str) -> Path:
        return self.out / "corpus" / task_id

    def model_dir(self, name: str) -> Path:
        return self.out / "models" / name

    def emb_path(self, name: str) -> Path:
        return self.out / "embeddings" / f"{name}.emb"

    def probe_dir(self, name: str) -> Path:
        return self.out / "probe" / name

    @property
    def header(self) -> dict:
        return {"run_fingerprint": self.cfg.fingerprint}

    def write_text(self, path: Path, text: str) -> str:
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(path, text)
        return str(path.relative_to(self.out))

    # stage fingerprints chain through their dependencies
    def stage_fingerprint(self, stage: str) -> str:
        c = self.cfg
        parts = {
            "synth": lambda: [[s.to_dict() for s in c.pretrain_corpus],
                              [t.to_dict() for t in c.tasks]],
            "pretrain": lambda: [self.stage_fingerprint("synth"),
                                 [m.to_dict() for m in c.models], c.seed],
            "extract": lambda: [self.stage_fingerprint("pretrain"), c.layers,
                                [WindowPolicy.parse(p).name for p in c.policies]],
            "probe": lambda: [self.stage_fingerprint("extract"), [asdict(p) for p in c.probes],
                              [asdict(t.info) for t in c.tasks]],
            "analyze": lambda: [self.stage_fingerprint("extract"), asdict(c.analysis)],
            "report": lambda: [self.stage_fingerprint("probe"), self.stage_fingerprint("analyze"),
                               c.fingerprint],
        }
        return fingerprint({"stage": stage, "deps": parts[stage]()})

    def _stamp(self, stage: str) -> Path:
        return self.out / "stamps" / f"{stage}.json"

    def is_current(self, stage: str) -> bool:
        p = self._stamp(stage)
        if not p.exists():
            return False
        stamp = json.loads(p.read_text())
        return stamp.get("fingerprint") == self.stage_fingerprint(stage) and all(
            (self.out / o).exists() for o in stamp.get("outputs", []))

    def _write_stamp(self, stage: str, outputs: list[str]) -> None:
        self.write_text(self._stamp(stage), canonical_json(
            {"stage": stage, "fingerprint": self.stage_fingerprint(stage),
             "outputs": sorted(outputs)}) + "\n")

    def run_stage(self, stage: str, force: bool = False) -> StageResult:
        t0 = time.perf_counter()
        if not force and self.is_current(stage):
            outputs = json.loads(self._stamp(stage).read_text())["outputs"]
            return StageResult(stage, "skipped", time.perf_counter() - t0, outputs)
        fn: Callable[[], list[str]] = getattr(self, f"stage_{stage}")
        try:
            outputs = fn()
        except Exception as e:  # noqa: BLE001 - reported with the stage name
            log.exception("stage %s failed", stage)
            raise StageError(stage, e) from e
        self._write_stamp(stage, outputs)
        return StageResult(stage, "ran", time.perf_counter() - t0, outputs)

    # -- corpora -----------------------------------------------------------

    def corpus(self, task_id: str) -> list[AudioClip]:
        if task_id not in self._corpora:
            root = self.corpus_dir(task_id)
            if not (root / "manifest.jsonl").exists():
                raise FileNotFoundError(f"corpus {task_id} missing; run synth first")
            self._corpora[task_id] = load_corpus(root)
        return self._corpora[task_id]

    def task_clips(self) -> list[AudioClip]:
        return [c for t in self.cfg.tasks for c in self.corpus(t.task_id)]

    def stage_synth(self) -> list[str]:
        outputs = []
        specs = [(s.task_id, s, None) for s in self.cfg.pretrain_corpus] + \
                [(t.task_id, t.synthetic, t.wav_dir) for t in self.cfg.tasks]
        for task_id, spec, wav_dir in specs:
            if spec is not None:
                clips = synthesize_corpus(spec)
            else:
                clips = ingest_wav_dir(wav_dir, task_id=task_id, skip_bad=self.skip_bad)
            root = self.corpus_dir(task_id)
            save_corpus(clips, root)
            self._corpora.pop(task_id, None)
            outputs.append(str((root / "manifest.jsonl").relative_to(self.out)))
        return outputs

    # -- pretraining -------------------------------------------------------

    def pretrain_mels(self) -> list[np.ndarray]:
        bins = self.cfg.models[0].featenc.mel_bins
        return [log_mel(c, bins).frames.astype(np.float32)
                for s in self.cfg.pretrain_corpus for c in self.corpus(s.task_id)]

    def stage_pretrain(self) -> list[str]:
        outputs = []
        mels = self.pretrain_mels() if self.cfg.pretrain_corpus else []
        for m in self.cfg.models:
            d = self.model_dir(m.name)
            tcfg = replace(m.train, seed=self.cfg.model_seed(m))
            if tcfg.steps == 0:
                d.mkdir(parents=True, exist_ok=True)
                model = build_model(m.featenc, m.encoder, tcfg.seed, mels,
                                    dtype=getattr(torch, tcfg.dtype))
                trainer = Trainer(model, tcfg)
                trainer.save(d / "checkpoint.bin")
                write_metrics([], d / "metrics.csv")
            else:
                train(mels, m.featenc, m.encoder, tcfg, out_dir=d, progress=True)
            outputs += [str((d / "checkpoint.bin").relative_to(self.out)),
                        str((d / "metrics.csv").relative_to(self.out))]
        return outputs

    def load_model(self, name: str):
        model, _ = load_checkpoint(self.model_dir(name) / "checkpoint.bin")
        model.eval()
        return model

    # -- extraction --------------------------------------------------------

    def stage_extract(self) -> list[str]:
        outputs = []
        clips = self.task_clips()
        policies = [WindowPolicy.parse(p) for p in self.cfg.policies]
        for m in self.cfg.models:
            path = self.emb_path(m.name)
            path.parent.mkdir(parents=True, exist_ok=True)
            ck = self.model_dir(m.name) / "checkpoint.bin"
            ck_hash = hashlib.sha256(ck.read_bytes()).hexdigest()[:16]
            meta_path = path.with_name(path.name + ".meta.json")
            table = None
            if path.exists() and meta_path.exists() and \
                    json.loads(meta_path.read_text()).get("checkpoint") == ck_hash:
                table = EmbeddingTable.load(path)
            model = self.load_model(m.name)
            table, added = extract_all(clips, model, self.cfg.layers_for(m), policies, table)
            log.info("model %s: %d embedding rows computed", m.name, added)
            table.save(path)
            self.write_text(meta_path, canonical_json(
                {"checkpoint": ck_hash, **self.header}) + "\n")
            outputs += [str(path.relative_to(self.out)),
                        str(path.with_name(path.name + ".jsonl").relative_to(self.out))]
        return outputs

    def table(self, name: str) -> EmbeddingTable:
        return EmbeddingTable.load(self.emb_path(name))

    # -- probing -----------------------------------------------------------

    def stage_probe(self) -> list[str]:
        outputs = []
        infos = [t.info for t in self.cfg.tasks]
        for m in self.cfg.models:
            rep = run_benchmark(self.table(m.name), infos, self.cfg.probes,
                                workers=1 if self.single_thread else None)
            d = self.probe_dir(m.name)
            outputs.append(self.write_text(d / "probe_report.csv",
                                           _header_lines(self.header) + rep.to_csv()))
            outputs.append(self.write_text(d / "aggregates.csv",
                                           rpt.aggregates_csv(rep, self.header)))
            layer = best_layer(rep, "full")
            for t in infos:
                preds = rep.predictions[(t.task_id, layer, "full")]
                outputs.append(self.write_text(d / "predictions" / f"{t.task_id}.jsonl",
                                               predictions_jsonl(preds)))
        return outputs

    def probe_report(self, name: str) -> ProbeReport:
        rep = ProbeReport.from_csv((self.probe_dir(name) / "probe_report.csv").read_text())
        rep.tasks = {t.task_id: t.info for t in self.cfg.tasks}
        return rep

    # -- analysis ----------------------------------------------------------

    def _sample_ids(self, table: EmbeddingTable, n: int) -> list[str]:
        ids = sorted({m["clip_id"] for m in table.meta if m["window_policy"] == "full"},
                     key=lambda c: hashlib.sha1(f"{self.cfg.seed}:{c}".encode()).hexdigest())
        return sorted(ids[:n])

    def _layer_acts(self, table: EmbeddingTable, ids: list[str]) -> dict[int, np.ndarray]:
        pos = {c: i for i, c in enumerate(ids)}
        acts: dict[int, np.ndarray] = {}
        vecs = table.vectors
        for layer in table.layers():
            rows = [(pos[m["clip_id"]], i) for i, m in enumerate(table.meta)
                    if m["layer_index"] == layer and m["window_policy"] == "full"
                    and m["clip_id"] in pos]
            rows.sort()
            acts[layer] = vecs[[i for _, i in rows]].astype(np.float64)
        return acts

    def stage_analyze(self) -> list[str]:
        outputs = []
        a = self.cfg.analysis
        tables = {m.name: self.table(m.name) for m in self.cfg.models}
        ids = self._sample_ids(tables[self.cfg.models[0].name], a.cka_clips)
        acts = {name: self._layer_acts(t, ids) for name, t in tables.items()}
        d = self.out / "analysis"
        names = list(acts)
        for i, x in enumerate(names):
            grid = analysis.cka_grid(acts[x], model_a=x)
            outputs.append(self.write_text(d / f"cka_{x}.csv", grid.to_csv(self.header)))
            for y in names[i + 1:]:
                grid = analysis.cka_grid(acts[x], acts[y], model_a=x, model_b=y)
                outputs.append(self.write_text(d / f"cka_{x}_vs_{y}.csv",
                                               grid.to_csv(self.header)))
        clips = {c.clip_id: c for c in self.task_clips()}
        attn_ids = self._sample_ids(tables[names[0]], a.attention_clips)
        for m in self.cfg.models:
            model = self.load_model(m.name)
            maps = []
            with torch.no_grad():
                for cid in attn_ids:
                    mel = torch.as_tensor(log_mel(clips[cid], m.featenc.mel_bins).frames[None],
                                          dtype=next(model.parameters()).dtype)
                    stack = model.activations(mel, keep_attention=True)
                    maps.append([w[0].double().numpy() for w in stack.attention])
            prof = analysis.attention_profile(maps)
            outputs.append(self.write_text(d / f"attention_{m.name}.csv",
                                           prof.to_csv(self.header)))
        return outputs

    # -- report ------------------------------------------------------------

    def stage_report(self) -> list[str]:
        outputs = []
        d = self.out / "report"
        reports = {m.name: self.probe_report(m.name) for m in self.cfg.models}
        headline = rpt.headline_tables(reports)
        outputs.append(self.write_text(d / "headline.csv", rpt.headline_csv(headline, self.header)))
        sweep = None
        if any(p != "full" for r in reports.values() for p in r.policies()):
            sweep = rpt.report_context_sweep(reports)
            outputs.append(self.write_text(d / "context_ratios.csv",
                                           rpt.context_ratio_csv(sweep, self.header)))
            outputs.append(self.write_text(d / "context_loss.csv",
                                           rpt.context_loss_csv(sweep, self.header)))
        dis = None
        if len(reports) >= 2:
            preds = {name: {t.task_id: read_predictions_jsonl(
                (self.probe_dir(name) / "predictions" / f"{t.task_id}.jsonl").read_text())
                for t in self.cfg.tasks} for name in reports}
            mat = disagreement_matrix(preds)
            outputs.append(self.write_text(d / "disagreement.csv",
                                           _header_lines(self.header) + mat.to_csv()))
            dis = {"models": mat.models, "values": mat.values,
                   "excluded": [list(e) for e in mat.excluded]}
        aggs = {name: {l: v for (l, p), v in aggregate_scores(r, "test").items() if p == "full"}
                for name, r in reports.items()}
        curves = analysis.layer_curve(aggs, self.cfg.analysis.plateau_tol)
        outputs.append(self.write_text(d / "layer_curves.csv",
                                       analysis.curves_csv(curves, self.header)))
        body = {
            "fingerprint": self.cfg.fingerprint,
            "stages": {s: self.stage_fingerprint(s) for s in STAGES},
            "headline": headline,
            "context_sweep": sweep,
            "disagreement": dis,
            "layer_curves": {c.model: {"points": c.points, "plateau": list(c.plateau)}
                             for c in curves},
            "analysis_files": sorted(p.name for p in (self.out / "analysis").glob("*.csv")),
        }
        outputs.append(self.write_text(d / "report.json",
                                       json.dumps(body, indent=2, sort_keys=True) + "\n"))
        outputs.append(self.write_text(d / "report.md", rpt.render_markdown(body)))
        return outputs

    # -- driver ------------------------------------------------------------

    def run(self, stages=STAGES, force: bool = False) -> RunReport:
        results = []
        self.out.mkdir(parents=True, exist_ok=True)
        self.write_text(self.out / "config.json",
                        json.dumps(self.cfg.content_dict(), indent=2, sort_keys=True) + "\n")
        try:
            for s in stages:
                results.append(self.run_stage(s, force=force))
        except StageError as e:
            results.append(StageResult(e.stage, "failed", 0.0, [], str(e.cause)))
        self._write_status(results)
        body = None
        rp = self.out / "report" / "report.json"
        if rp.exists() and all(r.status != "failed" for r in results):
            body = json.loads(rp.read_text())
        return RunReport(self.cfg.fingerprint, results, body)

    def _write_status(self, results: list[StageResult]) -> None:
        # wall-clock lives here, outside the deterministic artifacts
        status = {"run_fingerprint": self.cfg.fingerprint,
                  "stages": [asdict(r) for r in results]}
        self.write_text(self.out / "run_status.json", json.dumps(status, indent=2) + "\n")


def _header_lines(header: dict) -> str:
    return "".join(f"# {k}: {v}\n" for k, v in header.items())
