"""Masked contrastive pretraining with linear-projection targets.

Encoded features are masked (spans replaced by a learned embedding) before the
Conformer; the final-layer context vector at each masked frame must pick out
that frame's target, a learned linear projection of the *unmasked* encoded
features, from distractors drawn at other masked frames of the same clip.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .conformer import ActivationStack, ConformerEncoder, EncoderConfig
from .featenc import FeatEncConfig, FeatureEncoder
from .util import fingerprint

log = logging.getLogger(__name__)

MASK_CAP = 0.75


class MaskError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MaskPlan:
    indices: np.ndarray
    starts: np.ndarray
    span: int
    start_prob: float
    length: int

    @property
    def fraction(self) -> float:
        return len(self.indices) / self.length

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.length, dtype=bool)
        m[self.indices] = True
        return m


def _union(starts, span: int, length: int) -> np.ndarray:
    m = np.zeros(length, dtype=bool)
    for s in starts:
        m[s: s + span] = True
    return np.flatnonzero(m)


def sample_mask(length: int, start_prob: float, span: int, rng: np.random.Generator,
                cap: float = MASK_CAP) -> MaskPlan:
    """Mark each admissible frame as a span start with probability ``start_prob``.

    Spans lie fully inside the sequence.  An empty draw is retried once, then a
    single random span is forced.  Plans above ``cap`` drop random spans until
    they fit; a single span that alone exceeds the cap is rejected.
    """
    if span > cap * length:
        raise MaskError("mask plan exceeds cap")
    n_starts = length - span + 1
    starts = np.flatnonzero(rng.random(n_starts) < start_prob)
    if len(starts) == 0:
        starts = np.flatnonzero(rng.random(n_starts) < start_prob)
    if len(starts) == 0:
        starts = np.array([rng.integers(n_starts)])
    idx = _union(starts, span, length)
    if len(idx) > cap * length:
        order = rng.permutation(len(starts))
        keep = np.ones(len(starts), dtype=bool)
        for j in order:
            keep[j] = False
            idx = _union(starts[keep], span, length)
            if len(idx) <= cap * length:
                break
        starts = starts[keep]
    return MaskPlan(idx, starts, span, start_prob, length)


@dataclass
class ContrastiveBatchLoss:
    loss: torch.Tensor
    accuracy: float
    logits: list[torch.Tensor] = field(default_factory=list)
    reduced_k: list[tuple[int, int]] = field(default_factory=list)  # (clip, k used)


def sample_distractors(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """(n, k) indices; row i holds k distinct positions != i, in ascending order."""
    keys = rng.random((n, n))
    np.fill_diagonal(keys, np.inf)
    return np.sort(np.argsort(keys, axis=1, kind="stable")[:, :k], axis=1)


def contrastive_logits(context: torch.Tensor, targets: torch.Tensor, distractors,
                       temperature: float) -> torch.Tensor:
    """Candidate logits, true target first, then distractors in ascending index order."""
    d = torch.as_tensor(np.sort(np.asarray(distractors), axis=1), dtype=torch.long)
    c = F.normalize(context, dim=-1, eps=1e-12)
    t = F.normalize(targets, dim=-1, eps=1e-12)
    cand = torch.cat([t.unsqueeze(1), t[d]], dim=1)  # (n, k+1, D)
    return (cand @ c.unsqueeze(-1)).squeeze(-1) / temperature


def contrastive_loss(context: torch.Tensor | Sequence[torch.Tensor],
                     targets: torch.Tensor | Sequence[torch.Tensor],
                     num_distractors: int, temperature: float,
                     rng: np.random.Generator | None = None,
                     distractors: Sequence[np.ndarray] | np.ndarray | None = None
                     ) -> ContrastiveBatchLoss:
    """InfoNCE over cosine similarity / temperature, mean over masked frames.

    ``context``/``targets`` are per-clip (n_i, D) tensors at masked frames (a
    single tensor means one clip).  Distractors come from the same clip; when a
    clip has fewer than ``num_distractors + 1`` masked frames its k is reduced.
    """
    if torch.is_tensor(context):
        context, targets = [context], [targets]
        if distractors is not None:
            distractors = [distractors]
    if num_distractors < 1:
        raise ValueError("need at least one distractor")
    losses, logits_out, reduced, correct = [], [], [], 0
    for i, (c, t) in enumerate(zip(context, targets)):
        n = c.shape[0]
        k = min(num_distractors, n - 1)
        if k < 1:
            reduced.append((i, 0))
            continue
        if k < num_distractors:
            reduced.append((i, k))
        d = distractors[i] if distractors is not None else sample_distractors(n, k, rng)
        logits = contrastive_logits(c, t, d, temperature)
        losses.append(torch.logsumexp(logits, dim=1) - logits[:, 0])
        with torch.no_grad():
            correct += int((logits[:, 0] > logits[:, 1:].max(dim=1).values).sum())
        logits_out.append(logits)
    if not losses:
        raise MaskError("no clip has enough masked frames for a contrastive pair")
    per_pos = torch.cat(losses)
    return ContrastiveBatchLoss(per_pos.mean(), correct / per_pos.numel(), logits_out, reduced)


# ---------------------------------------------------------------------------
# model


class CAPModel(nn.Module):
    """Feature encoder + Conformer stack + target projection + mask embedding."""

    def __init__(self, featenc_cfg: FeatEncConfig, encoder_cfg: EncoderConfig):
        super().__init__()
        if featenc_cfg.output_dim != encoder_cfg.model_dim:
            raise ValueError("feature encoder output_dim must equal model_dim")
        self.featenc_cfg, self.encoder_cfg = featenc_cfg, encoder_cfg
        self.featenc = FeatureEncoder(featenc_cfg)
        self.encoder = ConformerEncoder(encoder_cfg)
        self.target_proj = nn.Linear(encoder_cfg.model_dim, encoder_cfg.model_dim)
        self.mask_emb = nn.Parameter(torch.empty(encoder_cfg.model_dim).uniform_(-1, 1))

    @property
    def config_fingerprint(self) -> str:
        return fingerprint({"featenc": asdict(self.featenc_cfg),
                            "encoder": asdict(self.encoder_cfg)})

    def activations(self, mel: torch.Tensor, keep_attention: bool = False,
                    upto: int | None = None) -> ActivationStack:
        return self.encoder(self.featenc(mel), keep_attention=keep_attention, upto=upto)

    def contrastive(self, mel: torch.Tensor, masks: Sequence[np.ndarray], num_distractors: int,
                    temperature: float, rng=None, distractors=None) -> ContrastiveBatchLoss:
        feats = self.featenc(mel)  # (B, T', D)
        m = torch.as_tensor(np.stack(masks), dtype=torch.bool)
        x = torch.where(m.unsqueeze(-1), self.mask_emb.to(feats.dtype), feats)
        context = self.encoder(x).layers[-1]
        targets = self.target_proj(feats)
        cs = [context[b, m[b]] for b in range(len(masks))]
        ts = [targets[b, m[b]] for b in range(len(masks))]
        return contrastive_loss(cs, ts, num_distractors, temperature, rng=rng,
                                distractors=distractors)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    crop_frames: int = 200
    lr: float = 1e-3
    warmup_steps: int = 100
    grad_clip: float = 1.0
    mask_prob: float = 0.065
    mask_span: int = 10
    num_distractors: int = 10
    temperature: float = 0.1
    seed: int = 0
    checkpoint_every: int = 500
    dtype: str = "float32"


def lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


def corpus_stats(mels: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    allf = np.concatenate(mels, axis=0)
    return allf.mean(axis=0), allf.std(axis=0)


def build_model(featenc_cfg: FeatEncConfig, encoder_cfg: EncoderConfig, seed: int,
                mels: Sequence[np.ndarray] | None = None, dtype=torch.float32) -> CAPModel:
    torch.manual_seed(seed)
    model = CAPModel(featenc_cfg, encoder_cfg).to(dtype)
    if mels:
        mean, std = corpus_stats(mels)
        model.featenc.set_input_stats(mean, std)
    return model


class Trainer:
    """Owns the model, optimizer and RNG streams; the single writer of parameters."""

    def __init__(self, model: CAPModel, cfg: TrainConfig):
        self.model, self.cfg = model, cfg
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.98), eps=1e-8)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.history: list[dict] = []

    def _batch(self, mels: Sequence[np.ndarray]):
        cfg = self.cfg
        idx = self.rng.integers(len(mels), size=cfg.batch_size)
        crop = min(cfg.crop_frames, min(len(mels[i]) for i in idx))
        out = []
        for i in idx:
            off = int(self.rng.integers(len(mels[i]) - crop + 1))
            out.append(mels[i][off: off + crop])
        dtype = next(self.model.parameters()).dtype
        return torch.as_tensor(np.stack(out), dtype=dtype)

    def train_step(self, mels: Sequence[np.ndarray]) -> dict:
        cfg = self.cfg
        self.model.train()
        x = self._batch(mels)
        t_enc = _enc_len(x.shape[1], self.model.featenc_cfg.strides)
        masks = [sample_mask(t_enc, cfg.mask_prob, cfg.mask_span, self.rng).as_bool()
                 for _ in range(x.shape[0])]
        out = self.model.contrastive(x, masks, cfg.num_distractors, cfg.temperature, rng=self.rng)
        if not torch.isfinite(out.loss):
            raise TrainingDiverged(f"non-finite loss at step {self.step}")
        lr = lr_at(self.step, cfg)
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.opt.zero_grad(set_to_none=True)
        out.loss.backward()
        nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.opt.step()
        self.step += 1
        row = {"step": self.step, "loss": float(out.loss.detach()),
               "contrastive_accuracy": out.accuracy, "lr": lr}
        self.history.append(row)
        return row

    # -- checkpointing -----------------------------------------------------

    def state_sections(self) -> dict:
        model = self.model
        meta = {
            "format": "capbench-checkpoint",
            "step": self.step,
            "config_fingerprint": model.config_fingerprint,
            "featenc": asdict(model.featenc_cfg),
            "encoder": asdict(model.encoder_cfg),
            "train": asdict(self.cfg),
            "numpy_rng": self.rng.bit_generator.state,
        }
        sections = {"meta": meta, "torch_rng": torch.get_rng_state()}
        for name, p in model.state_dict().items():
            sections[f"param/{name}"] = p
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in self.opt.state.items():
            n = names[id(p)]
            sections[f"optim/{n}/exp_avg"] = st["exp_avg"]
            sections[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"]
        return sections

    def save(self, path: str | Path) -> None:
        ckpt.save(path, self.state_sections())


def _enc_len(t: int, strides) -> int:
    for s in strides:
        t = -(-t // s)
    return t


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None
                    ) -> tuple[CAPModel, Trainer]:
    sections = ckpt.load(path)
    meta = sections["meta"]
    fe, en = FeatEncConfig(**meta["featenc"]), EncoderConfig(**meta["encoder"])
    tcfg = TrainConfig(**meta["train"])
    model = CAPModel(fe, en).to(getattr(torch, tcfg.dtype))
    if expected_fingerprint is not None and model.config_fingerprint != expected_fingerprint:
        raise ckpt.CheckpointError("config fingerprint mismatch")
    if model.config_fingerprint != meta["config_fingerprint"]:
        raise ckpt.CheckpointError("config fingerprint mismatch")
    model.load_state_dict({k[len("param/"):]: v for k, v in sections.items()
                           if k.startswith("param/")})
    trainer = Trainer(model, tcfg)
    trainer.step = meta["step"]
    trainer.rng.bit_generator.state = meta["numpy_rng"]
    torch.set_rng_state(sections["torch_rng"])
    for n, p in model.named_parameters():
        if f"optim/{n}/exp_avg" in sections:
            trainer.opt.state[p] = {
                "step": torch.tensor(float(meta["step"])),
                "exp_avg": sections[f"optim/{n}/exp_avg"].to(p.dtype),
                "exp_avg_sq": sections[f"optim/{n}/exp_avg_sq"].to(p.dtype),
            }
    return model, trainer


def train(mels: Sequence[np.ndarray], featenc_cfg: FeatEncConfig, encoder_cfg: EncoderConfig,
          cfg: TrainConfig, out_dir: str | Path | None = None,
          progress: bool = False) -> tuple[CAPModel, Trainer]:
    """Pretrain from scratch; writes ``checkpoint.bin`` and ``metrics.csv`` to ``out_dir``."""
    if not len(mels):
        raise ValueError("empty pretraining corpus")
    dtype = getattr(torch, cfg.dtype)
    model = build_model(featenc_cfg, encoder_cfg, cfg.seed, mels, dtype=dtype)
    trainer = Trainer(model, cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    try:
        while trainer.step < cfg.steps:
            row = trainer.train_step(mels)
            if progress and row["step"] % 100 == 0:
                log.info("step %d loss %.4f acc %.3f", row["step"], row["loss"],
                         row["contrastive_accuracy"])
            if out_dir is not None and cfg.checkpoint_every and \
                    trainer.step % cfg.checkpoint_every == 0 and trainer.step < cfg.steps:
                trainer.save(out_dir / "checkpoint.bin")
    finally:
        if out_dir is not None:
            write_metrics(trainer.history, out_dir / "metrics.csv")
    if out_dir is not None:
        trainer.save(out_dir / "checkpoint.bin")
    return model, trainer


def write_metrics(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "loss", "contrastive_accuracy", "lr"])
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
