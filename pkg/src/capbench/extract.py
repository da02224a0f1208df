"""Per-layer, time-averaged clip embeddings under full or chunked context windows."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .frontend import HOP_LENGTH, SAMPLE_RATE, WIN_LENGTH, AudioClip, log_mel
from .util import atomic_write_text

MAGIC = b"EMB1"
# shortest chunk that still yields four mel frames (the encoder minimum)
MIN_CHUNK_SAMPLES = WIN_LENGTH + 3 * HOP_LENGTH


class ExtractError(ValueError):
    pass


@dataclass(frozen=True)
class WindowPolicy:
    mode: str = "full"
    chunk_seconds: float | None = None

    def __post_init__(self):
        if self.mode not in ("full", "chunked"):
            raise ExtractError(f"unknown window mode {self.mode!r}")
        if self.mode == "chunked" and not (self.chunk_seconds and self.chunk_seconds > 0):
            raise ExtractError("chunked policy needs chunk_seconds > 0")

    @property
    def name(self) -> str:
        return "full" if self.mode == "full" else f"{self.chunk_seconds:g}s"

    @classmethod
    def parse(cls, text: str) -> "WindowPolicy":
        if text == "full":
            return cls()
        return cls("chunked", float(text.rstrip("s")))


FULL = WindowPolicy()


def chunk_bounds(num_samples: int, policy: WindowPolicy) -> list[tuple[int, int]]:
    """Non-overlapping, sample-aligned chunks; the trailing partial chunk is kept.

    A tail too short to reach the encoder is merged into the preceding chunk.
    """
    if policy.mode == "full":
        return [(0, num_samples)]
    size = int(round(policy.chunk_seconds * SAMPLE_RATE))
    if size >= num_samples:
        return [(0, num_samples)]
    bounds = [(a, min(a + size, num_samples)) for a in range(0, num_samples, size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < MIN_CHUNK_SAMPLES:
        tail = bounds.pop()
        bounds[-1] = (bounds[-1][0], tail[1])
    return bounds


def _param_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def local_embeddings(clip: AudioClip | np.ndarray, model, layers: Sequence[int],
                     policy: WindowPolicy = FULL) -> dict[int, np.ndarray]:
    """Per-chunk time-mean of each requested layer: layer -> (num_chunks, D) float64."""
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip)
    model.eval()
    bounds = chunk_bounds(len(samples), policy)
    upto = max(layers)
    out = {l: np.zeros((len(bounds), model.encoder_cfg.model_dim)) for l in layers}
    # chunks of equal length share one forward pass
    groups: dict[int, list[int]] = {}
    for i, (a, b) in enumerate(bounds):
        groups.setdefault(b - a, []).append(i)
    for _, idx in sorted(groups.items()):
        mel = np.stack([log_mel(samples[bounds[i][0]: bounds[i][1]]).frames for i in idx])
        stack = model.activations(torch.as_tensor(mel, dtype=_param_dtype(model)), upto=upto)
        for l in layers:
            means = stack.layers[l].mean(dim=1).double().numpy()
            out[l][idx] = means
    return out


def average_chunks(local: np.ndarray) -> np.ndarray:
    """Unweighted mean over chunks, summed in a canonical (sorted-row) order."""
    order = np.lexsort(local.T[::-1])
    return local[order].sum(axis=0) / len(local)


def embed_clip_layers(clip, model, layers: Sequence[int], policy: WindowPolicy = FULL
                      ) -> dict[int, np.ndarray]:
    local = local_embeddings(clip, model, layers, policy)
    return {l: average_chunks(v) for l, v in local.items()}


def embed_clip(clip, model, layer: int, policy: WindowPolicy = FULL) -> np.ndarray:
    """D-vector: time mean of layer ``layer`` (0 = feature encoder), averaged over chunks."""
    if not 0 <= layer <= model.encoder_cfg.num_layers:
        raise ExtractError(f"layer {layer} out of range")
    return embed_clip_layers(clip, model, [layer], policy)[layer]


# ---------------------------------------------------------------------------
# embedding table + store


META_FIELDS = ("clip_id", "task_id", "label", "split", "layer_index", "window_policy")


class EmbeddingTable:
    """Rows of (metadata, float32 vector), one per (clip, layer, policy)."""

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self.meta: list[dict] = []
        self._vecs: list[np.ndarray] = []
        self._keys: set[tuple] = set()

    def __len__(self) -> int:
        return len(self.meta)

    @staticmethod
    def key(row: dict) -> tuple:
        return (row["task_id"], row["clip_id"], row["layer_index"], row["window_policy"])

    def __contains__(self, key) -> bool:
        return key in self._keys

    def add(self, row: dict, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float32)
        if self.dim is None:
            self.dim = vec.shape[0]
        if vec.shape != (self.dim,):
            raise ExtractError(f"dimension mismatch: store has {self.dim}, got {vec.shape[0]}")
        if not np.all(np.isfinite(vec)):
            raise ExtractError(f"non-finite embedding for {row['clip_id']}")
        k = self.key(row)
        if k in self._keys:
            raise ExtractError(f"duplicate row {k}")
        self._keys.add(k)
        self.meta.append({f: row[f] for f in META_FIELDS})
        self._vecs.append(vec)

    def remove(self, indices: Iterable[int]) -> None:
        drop = set(indices)
        keep = [i for i in range(len(self)) if i not in drop]
        self.meta = [self.meta[i] for i in keep]
        self._vecs = [self._vecs[i] for i in keep]
        self._keys = {self.key(r) for r in self.meta}

    @property
    def vectors(self) -> np.ndarray:
        if not self._vecs:
            return np.zeros((0, self.dim or 0), dtype=np.float32)
        return np.stack(self._vecs)

    def select(self, task_id: str, layer: int, policy: str) -> tuple[list[dict], np.ndarray]:
        idx = [i for i, m in enumerate(self.meta)
               if m["task_id"] == task_id and m["layer_index"] == layer
               and m["window_policy"] == policy]
        idx.sort(key=lambda i: self.meta[i]["clip_id"])
        return [self.meta[i] for i in idx], np.stack([self._vecs[i] for i in idx]) if idx \
            else np.zeros((0, self.dim or 0), np.float32)

    def tasks(self) -> list[str]:
        return sorted({m["task_id"] for m in self.meta})

    def layers(self) -> list[int]:
        return sorted({m["layer_index"] for m in self.meta})

    def policies(self) -> list[str]:
        return sorted({m["window_policy"] for m in self.meta})

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write ``path`` (EMB1 binary) and ``path.jsonl`` (row manifest)."""
        path = Path(path)
        vecs = self.vectors.astype("<f4")
        head = MAGIC + struct.pack("<II", len(self), self.dim or 0)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(head + vecs.tobytes())
        tmp.replace(path)
        lines = [json.dumps({"row": i, **m}, sort_keys=True) for i, m in enumerate(self.meta)]
        atomic_write_text(manifest_path(path), "".join(l + "\n" for l in lines))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        path = Path(path)
        data = path.read_bytes()
        if data[:4] != MAGIC:
            raise ExtractError("bad magic: not an EMB1 store")
        rows, dim = struct.unpack_from("<II", data, 4)
        vecs = np.frombuffer(data, dtype="<f4", offset=12, count=rows * dim).reshape(rows, dim)
        with open(manifest_path(path)) as f:
            meta = [json.loads(l) for l in f if l.strip()]
        if len(meta) != rows:
            raise ExtractError("manifest row count does not match store")
        table = cls(dim)
        for m, v in zip(sorted(meta, key=lambda m: m["row"]), vecs):
            table.add(m, v.astype(np.float32))
        return table


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".jsonl")


def extract_all(corpus: Sequence[AudioClip], model, layers: Sequence[int],
                policies: Sequence[WindowPolicy], table: EmbeddingTable | None = None
                ) -> tuple[EmbeddingTable, int]:
    """Fill ``table`` with every missing (clip, layer, policy) row.

    Returns the table and the number of rows computed on this call.
    """
    table = table if table is not None else EmbeddingTable()
    dim = model.encoder_cfg.model_dim
    if table.dim is not None and table.dim != dim:
        raise ExtractError(f"dimension mismatch: store has {table.dim}, model has {dim}")
    layers = sorted(set(layers))
    added = 0
    for clip in sorted(corpus, key=lambda c: (c.task_id, c.clip_id)):
        for policy in policies:
            base = {"clip_id": clip.clip_id, "task_id": clip.task_id, "label": clip.label,
                    "split": clip.split, "window_policy": policy.name}
            missing = [l for l in layers
                       if EmbeddingTable.key({**base, "layer_index": l}) not in table]
            if not missing:
                continue
            vecs = embed_clip_layers(clip, model, missing, policy)
            for l in missing:
                table.add({**base, "layer_index": l}, vecs[l])
                added += 1
    return table, added
