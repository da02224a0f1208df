"""Layer similarity (linear CKA) and attention geometry (mean attention distance)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .featenc import ENCODED_FRAME_PERIOD


class AnalysisError(ValueError):
    pass


def linear_cka(X, Y) -> float:
    """||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) on column-centred inputs."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise AnalysisError(f"example count mismatch: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise AnalysisError("need at least two examples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0 or yy == 0:
        return 0.0
    return float(np.linalg.norm(Y.T @ X) ** 2 / (xx * yy))


@dataclass
class CkaMatrix:
    model_a: str
    model_b: str
    layers_a: list[int]
    layers_b: list[int]
    grid: np.ndarray
    num_examples: int

    def to_csv(self, header: Mapping[str, str] | None = None) -> str:
        buf = io.StringIO()
        for k, v in {"model_a": self.model_a, "model_b": self.model_b,
                     "num_examples": str(self.num_examples), **(header or {})}.items():
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_a"] + [str(l) for l in self.layers_b])
        for l, row in zip(self.layers_a, self.grid):
            w.writerow([l] + [repr(float(v)) for v in row])
        return buf.getvalue()


def cka_grid(acts_a: Mapping[int, np.ndarray], acts_b: Mapping[int, np.ndarray] | None = None,
             model_a: str = "a", model_b: str | None = None) -> CkaMatrix:
    """All-pairs layer CKA.  ``acts_*[layer]`` is (N, D) over a shared clip sample.

    Passing only ``acts_a`` gives the within-model grid (symmetric, unit diagonal).
    """
    if not acts_a or (acts_b is not None and not acts_b):
        raise AnalysisError("empty layer set")
    within = acts_b is None
    acts_b = acts_a if within else acts_b
    la, lb = sorted(acts_a), sorted(acts_b)
    grid = np.zeros((len(la), len(lb)))
    for i, a in enumerate(la):
        for j, b in enumerate(lb):
            if within and j < i:
                grid[i, j] = grid[j, i]
            elif within and i == j:
                grid[i, j] = 1.0 if np.any(acts_a[a] - acts_a[a].mean(0)) else 0.0
            else:
                grid[i, j] = linear_cka(acts_a[a], acts_b[b])
    n = next(iter(acts_a.values())).shape[0]
    return CkaMatrix(model_a, model_a if within else (model_b or "b"), la, lb, grid, n)


def mean_attention_distance(attn, frame_period: float = ENCODED_FRAME_PERIOD,
                            atol: float = 1e-4) -> np.ndarray:
    """Per-head attention-weighted mean |query - key| offset, in seconds.

    ``attn`` is (H, T, T) for one clip or (N, H, T, T) for a same-length
    batch; batches are averaged over clips.
    """
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[-1] != a.shape[-2]:
        raise AnalysisError("attention maps must be (..., H, T, T)")
    if np.any(np.abs(a.sum(-1) - 1.0) > atol) or np.any(a < -atol):
        raise AnalysisError("attention rows are not normalized")
    t = a.shape[-1]
    pos = np.arange(t)
    dist = np.abs(pos[:, None] - pos[None, :])
    per_clip = (a * dist).sum(axis=(-1, -2)) / t  # (N, H) frames
    return per_clip.mean(axis=0) * frame_period


@dataclass
class AttnDistanceProfile:
    distances: dict[int, np.ndarray]  # layer -> per-head seconds
    num_clips: int = 0

    @property
    def shortest(self) -> dict[int, float]:
        return {l: float(d.min()) for l, d in sorted(self.distances.items())}

    def to_csv(self, header: Mapping[str, str] | None = None) -> str:
        buf = io.StringIO()
        for k, v in {"num_clips": str(self.num_clips), "unit": "seconds",
                     **(header or {})}.items():
            buf.write(f"# {k}: {v}\n")
        heads = len(next(iter(self.distances.values())))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer"] + [f"head{h}" for h in range(heads)] + ["shortest"])
        for l, d in sorted(self.distances.items()):
            w.writerow([l] + [repr(float(v)) for v in d] + [repr(float(d.min()))])
        return buf.getvalue()


def attention_profile(per_clip_maps: Sequence[Sequence[np.ndarray]],
                      frame_period: float = ENCODED_FRAME_PERIOD) -> AttnDistanceProfile:
    """Average per-head distances over clips.  ``per_clip_maps[c][l]`` is (H, T_c, T_c)."""
    if not per_clip_maps:
        raise AnalysisError("no clips")
    n_layers = len(per_clip_maps[0])
    acc = {l: [] for l in range(1, n_layers + 1)}
    for maps in per_clip_maps:
        for l, m in enumerate(maps, start=1):
            acc[l].append(mean_attention_distance(m, frame_period))
    return AttnDistanceProfile({l: np.mean(v, axis=0) for l, v in acc.items()},
                               len(per_clip_maps))


@dataclass
class LayerCurve:
    model: str
    points: list[tuple[float, float]]  # (layer / num_layers, score)
    plateau: tuple[int, int]

    def rows(self):
        return [(self.model, pos, score) for pos, score in self.points]


def plateau(scores: Sequence[float], tol: float = 0.02) -> tuple[int, int]:
    """Maximal contiguous layer range around the peak scoring within ``tol`` (relative) of it."""
    s = np.asarray(scores, dtype=np.float64)
    peak = int(np.argmax(s))
    floor = s[peak] - tol * abs(s[peak])
    lo = hi = peak
    while lo > 0 and s[lo - 1] >= floor:
        lo -= 1
    while hi < len(s) - 1 and s[hi + 1] >= floor:
        hi += 1
    return lo, hi


def layer_curve(aggregates: Mapping[str, Mapping[int, float]], tol: float = 0.02
                ) -> list[LayerCurve]:
    """Normalized-depth curves: ``aggregates[model][layer]`` with layers 0..L."""
    curves = []
    for model, by_layer in aggregates.items():
        layers = sorted(by_layer)
        num_layers = max(layers)
        scores = [by_layer[l] for l in layers]
        pts = [(l / num_layers if num_layers else 0.0, by_layer[l]) for l in layers]
        lo, hi = plateau(scores, tol)
        curves.append(LayerCurve(model, pts, (layers[lo], layers[hi])))
    return curves


def curves_csv(curves: Sequence[LayerCurve], header: Mapping[str, str] | None = None) -> str:
    buf = io.StringIO()
    for k, v in (header or {}).items():
        buf.write(f"# {k}: {v}\n")
    for c in curves:
        buf.write(f"# plateau {c.model}: layers {c.plateau[0]}-{c.plateau[1]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "position", "score"])
    for c in curves:
        for m, pos, score in c.rows():
            w.writerow([m, repr(pos), repr(score)])
    return buf.getvalue()
