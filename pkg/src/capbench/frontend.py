"""Audio frontend: log-mel features, synthetic task corpora and WAV ingestion.

All audio is handled at 16 kHz.  Log-mel frames use a 25 ms Hann window and
a 10 ms hop, giving the 100 Hz frame rate the encoder expects.
"""

from __future__ import annotations

import hashlib
import json
import logging
import wave
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import resample_poly

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
FRAME_PERIOD = HOP_LENGTH / SAMPLE_RATE
DEFAULT_MEL_BINS = 80
POWER_FLOOR = 1e-10
MIN_DURATION = 0.5
MAX_DURATION = 30.0
SPLITS = ("train", "dev", "test")
GENERATOR_KINDS = ("speaker", "prosody", "spoof")


class FrontendError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    clip_id: str
    label: str
    split: str
    task_id: str
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise FrontendError(f"{self.clip_id}: sample rate must be {SAMPLE_RATE}")
        if self.split not in SPLITS:
            raise FrontendError(f"{self.clip_id}: unknown split {self.split!r}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def validate(self) -> None:
        if not MIN_DURATION <= self.duration <= MAX_DURATION:
            raise FrontendError(
                f"{self.clip_id}: duration {self.duration:.3f}s outside "
                f"[{MIN_DURATION}, {MAX_DURATION}]"
            )
        if np.any(np.abs(self.samples) > 1.0) or not np.all(np.isfinite(self.samples)):
            raise FrontendError(f"{self.clip_id}: samples must be finite and in [-1, 1]")

    def manifest_row(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "task_id": self.task_id,
            "label": self.label,
            "split": self.split,
            "duration_s": round(self.duration, 6),
        }


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, M)
    frame_period: float = FRAME_PERIOD

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def num_mel_frames(num_samples: int) -> int:
    if num_samples < WIN_LENGTH:
        return 0
    return (num_samples - WIN_LENGTH) // HOP_LENGTH + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


_FILTERBANKS: dict[int, np.ndarray] = {}


def mel_filterbank(mel_bins: int = DEFAULT_MEL_BINS, f_min: float = 20.0,
                   f_max: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape (mel_bins, N_FFT // 2 + 1)."""
    key = (mel_bins, f_min, f_max)
    if key in _FILTERBANKS:
        return _FILTERBANKS[key]
    freqs = np.linspace(0.0, SAMPLE_RATE / 2, N_FFT // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), mel_bins + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(up, down))
    _FILTERBANKS[key] = fb
    return fb


def _frames(samples: np.ndarray) -> np.ndarray:
    n = num_mel_frames(len(samples))
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n)[:, None]
    return samples[idx]


def log_mel(clip: AudioClip | np.ndarray, mel_bins: int = DEFAULT_MEL_BINS) -> MelSpectrogram:
    """Log-mel spectrogram at 100 Hz; ``T = (N - 400) // 160 + 1``."""
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if len(samples) < WIN_LENGTH:
        raise FrontendError("clip too short")
    window = np.hanning(WIN_LENGTH + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(_frames(samples) * window, n=N_FFT, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    mel_power = power @ mel_filterbank(mel_bins).T
    return MelSpectrogram(np.log(mel_power + POWER_FLOOR))


# ---------------------------------------------------------------------------
# split assignment


def split_of(clip_id: str) -> str:
    """80/10/10 split as a pure function of the clip id."""
    bucket = int(hashlib.sha1(clip_id.encode("utf-8")).hexdigest()[:8], 16) % 100
    if bucket < 80:
        return "train"
    return "dev" if bucket < 90 else "test"


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass
class SyntheticTaskSpec:
    """Recipe for a deterministic labeled corpus.

    ``clips_per_class`` gives (train, dev, test) counts.  When
    ``class_proportions`` is set the counts are instead read as per-split
    totals and divided between classes by those proportions.
    """

    task_id: str
    kind: str
    num_classes: int
    clips_per_class: tuple[int, int, int] = (20, 10, 10)
    duration_range: tuple[float, float] = (1.5, 3.0)
    seed: int = 0
    class_proportions: tuple[float, ...] | None = None
    metric: str | None = None

    def __post_init__(self):
        self.clips_per_class = tuple(int(c) for c in self.clips_per_class)
        self.duration_range = tuple(float(d) for d in self.duration_range)
        if self.class_proportions is not None:
            self.class_proportions = tuple(float(p) for p in self.class_proportions)

    def validate(self) -> None:
        if self.kind not in GENERATOR_KINDS:
            raise FrontendError(f"unknown generator kind {self.kind!r}")
        if self.num_classes < 1:
            raise FrontendError("task needs at least one class")
        if self.kind == "spoof" and self.num_classes != 2:
            raise FrontendError("spoof task has exactly 2 classes")
        if len(self.clips_per_class) != 3 or min(self.clips_per_class) < 0 \
                or sum(self.clips_per_class) == 0:
            raise FrontendError("task needs at least one clip")
        lo, hi = self.duration_range
        if not MIN_DURATION <= lo <= hi <= MAX_DURATION:
            raise FrontendError(f"bad duration range {self.duration_range}")
        if self.class_proportions is not None:
            if len(self.class_proportions) != self.num_classes:
                raise FrontendError("class_proportions must have one entry per class")

    @property
    def metric_kind(self) -> str:
        if self.metric:
            return self.metric
        if self.kind == "spoof":
            return "eer"
        return "uar" if self.class_proportions is not None else "accuracy"

    def labels(self) -> list[str]:
        if self.kind == "spoof":
            return ["bonafide", "spoof"]
        if self.kind == "prosody":
            return [_prosody_label(c) for c in range(self.num_classes)]
        return [f"spk{c:03d}" for c in range(self.num_classes)]

    def quotas(self) -> list[dict[str, int]]:
        if self.class_proportions is None:
            return [dict(zip(SPLITS, self.clips_per_class)) for _ in range(self.num_classes)]
        weights = np.asarray(self.class_proportions) / sum(self.class_proportions)
        return [
            {s: max(1, int(round(total * w))) if total else 0
             for s, total in zip(SPLITS, self.clips_per_class)}
            for w in weights
        ]

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "kind": self.kind,
            "num_classes": self.num_classes,
            "clips_per_class": list(self.clips_per_class),
            "duration_range": list(self.duration_range),
            "seed": self.seed,
            "class_proportions": None if self.class_proportions is None
            else list(self.class_proportions),
            "metric": self.metric,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        return cls(**d)


_SLOPES = (1.0, 0.0, -1.0)
_SLOPE_NAMES = ("rising", "flat", "falling")


def _prosody_label(c: int) -> str:
    name = _SLOPE_NAMES[c % 3]
    return name if c < 3 else f"{name}_am{c // 3}"


# Vowel formant targets (F1, F2, F3) in Hz for an average adult tract.
_VOWELS = np.array([
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [300.0, 870.0, 2240.0],
    [640.0, 1190.0, 2390.0],
    [440.0, 1020.0, 2240.0],
])
_BANDWIDTHS = np.array([90.0, 110.0, 170.0])


def _rng(*parts) -> np.random.Generator:
    words = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass
class _Voice:
    f0: float
    tract_scale: float
    tilt: float
    jitter: float = 0.0
    shimmer: float = 0.0
    rate: float | None = None  # syllables per second; drawn per clip when None
    sharpness: float = 0.8  # envelope exponent
    skew: float = 0.0  # attack/decay asymmetry of each syllable


def _speaker_voice(spec: SyntheticTaskSpec, c: int) -> _Voice:
    r = _rng(spec.seed, spec.task_id, "speaker", c)
    return _Voice(f0=float(r.uniform(90.0, 250.0)),
                  tract_scale=float(r.uniform(0.85, 1.2)),
                  tilt=float(r.uniform(0.6, 1.6)),
                  jitter=0.01, shimmer=0.05,
                  rate=float(r.uniform(2.5, 6.0)),
                  sharpness=float(r.uniform(0.5, 2.0)),
                  skew=float(r.uniform(-0.6, 0.6)))


def _harmonic_gains(f0: float, formants: np.ndarray, tilt: float, nyquist: float = 7600.0):
    k = np.arange(1, max(2, int(nyquist // f0)) + 1)
    f = k * f0
    resp = np.zeros_like(f)
    for fc, bw in zip(formants, _BANDWIDTHS):
        resp += 1.0 / (1.0 + ((f - fc) / bw) ** 2)
    return k, (resp + 0.02) * k ** (-tilt)


def _render(n: int, f0_track: np.ndarray, formants_track: np.ndarray, env: np.ndarray,
            tilt: float) -> np.ndarray:
    """Additive harmonic synthesis driven by per-sample pitch and formant tracks.

    Harmonic amplitudes are re-evaluated every 10 ms and linearly interpolated.
    """
    phase = 2 * np.pi * np.cumsum(f0_track) / SAMPLE_RATE
    step = HOP_LENGTH
    knots = np.arange(0, n + step, step)
    knots[-1] = min(knots[-1], n - 1)
    max_k = int(7600.0 // max(f0_track.min(), 40.0)) + 1
    table = np.zeros((len(knots), max_k))
    for i, s in enumerate(knots):
        k, g = _harmonic_gains(float(f0_track[s]), formants_track[s], tilt)
        table[i, : len(k)] = g[:max_k]
    out = np.zeros(n)
    t = np.arange(n)
    for k in range(1, max_k + 1):
        amp = np.interp(t, knots, table[:, k - 1])
        if not amp.any():
            continue
        out += amp * np.sin(k * phase)
    return out * env


def _voice_clip(r: np.random.Generator, n: int, voice: _Voice, f0_curve: np.ndarray,
                am_rate: float = 0.0) -> np.ndarray:
    """Rhythmic voiced speech: one vowel per syllable cycle, smooth formant glides.

    The syllable rate (3-5 Hz) drifts slowly; formants move between per-syllable
    vowel targets and pitch carries a slow intonation wobble on top of ``f0_curve``.
    """
    t = np.arange(n) / SAMPLE_RATE
    rate = voice.rate if voice.rate else r.uniform(3.0, 5.0)
    phase0 = r.uniform(0, 2 * np.pi)
    drift = 1.0 + 0.05 * np.sin(2 * np.pi * 0.3 * t + r.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(rate * drift) / SAMPLE_RATE + phase0
    env = np.maximum(0.0, np.sin(phase + voice.skew * np.sin(phase))) ** voice.sharpness
    cycles = (phase - phase0) / (2 * np.pi)
    n_syl = int(cycles[-1]) + 2
    vowels = _VOWELS[r.integers(len(_VOWELS), size=n_syl)] / voice.tract_scale
    vowels = vowels * r.uniform(0.95, 1.05, size=vowels.shape)
    formants = np.stack([np.interp(cycles, np.arange(n_syl), vowels[:, j]) for j in range(3)], 1)
    wobble = 1.0 + 0.06 * np.sin(2 * np.pi * r.uniform(0.2, 0.6) * t + r.uniform(0, 2 * np.pi))
    f0 = voice.f0 * f0_curve * wobble
    if voice.jitter > 0:
        # pitch jitter and amplitude shimmer, redrawn every 5 ms
        knots = np.arange(0, n + 80, 80)
        f0 *= 1.0 + voice.jitter * np.interp(np.arange(n), knots, r.standard_normal(len(knots)))
        env *= 1.0 + voice.shimmer * np.interp(np.arange(n), knots, r.standard_normal(len(knots)))
    if am_rate > 0:
        env *= 0.55 + 0.45 * np.sin(2 * np.pi * am_rate * t)
    return _render(n, f0, formants, env, voice.tilt)


def _channel(r: np.random.Generator, x: np.ndarray, depth_db: float) -> np.ndarray:
    """Random smooth equalizer over log frequency, up to about ``depth_db`` of ripple."""
    spec = np.fft.rfft(x)
    logf = np.log(np.fft.rfftfreq(len(x), 1.0 / SAMPLE_RATE) + 50.0)
    u = (logf - logf[0]) / (logf[-1] - logf[0])
    gain_db = sum(r.uniform(-1, 1) * depth_db / 3 * np.cos(j * np.pi * u + r.uniform(0, 2 * np.pi))
                  for j in (1, 2, 3))
    return np.fft.irfft(spec * 10 ** (gain_db / 20), n=len(x))


def _finish(r: np.random.Generator, x: np.ndarray, snr_db: tuple[float, float]) -> np.ndarray:
    x = x / (np.max(np.abs(x)) + 1e-12)
    power = np.mean(x ** 2) + 1e-12
    noise_power = power / 10 ** (r.uniform(*snr_db) / 10)
    x = x + np.sqrt(noise_power) * r.standard_normal(len(x))
    gain = r.uniform(0.3, 0.9)
    return np.clip(gain * x / (np.max(np.abs(x)) + 1e-12), -1.0, 1.0)


def _generate(spec: SyntheticTaskSpec, c: int, clip_id: str) -> np.ndarray:
    r = _rng(spec.seed, spec.task_id, clip_id)
    n = int(r.uniform(*spec.duration_range) * SAMPLE_RATE)
    if spec.kind == "speaker":
        base = _speaker_voice(spec, c)
        voice = _Voice(f0=base.f0 * r.uniform(0.88, 1.12),
                       tract_scale=base.tract_scale * r.uniform(0.95, 1.05),
                       tilt=base.tilt + r.uniform(-0.3, 0.3),
                       jitter=base.jitter, shimmer=base.shimmer,
                       rate=base.rate * r.uniform(0.97, 1.03),
                       sharpness=base.sharpness, skew=base.skew)
        x = _channel(r, _voice_clip(r, n, voice, np.ones(n)), 6.0)
        return _finish(r, x, (10.0, 30.0))
    if spec.kind == "prosody":
        voice = _Voice(f0=r.uniform(100.0, 220.0), tract_scale=r.uniform(0.85, 1.2),
                       tilt=r.uniform(0.7, 1.4), jitter=0.004, shimmer=0.02)
        slope = _SLOPES[c % 3] * r.uniform(0.35, 0.6)  # octave-ish fraction over the clip
        curve = 2.0 ** (slope * np.linspace(-0.5, 0.5, n))
        am_rate = 0.0 if c < 3 else 2.0 + 2.0 * (c // 3)
        x = _voice_clip(r, n, voice, curve, am_rate=am_rate)
        return _finish(r, x, (15.0, 30.0))
    # spoof: jittered natural-ish source vs perfectly periodic synthetic source
    voice = _Voice(f0=r.uniform(90.0, 240.0), tract_scale=r.uniform(0.85, 1.2),
                   tilt=r.uniform(0.7, 1.4))
    if c == 0:
        voice.jitter, voice.shimmer = r.uniform(0.015, 0.03), r.uniform(0.08, 0.15)
    x = _voice_clip(r, n, voice, np.ones(n))
    return _finish(r, x, (15.0, 30.0))


def _clip_ids(spec: SyntheticTaskSpec, label: str, quota: dict[str, int]):
    """Walk candidate ids in order, keeping each one whose hash-split still has room."""
    need = dict(quota)
    n = 0
    while any(need.values()):
        cid = f"{spec.task_id}/{label}/{n:05d}"
        s = split_of(cid)
        if need[s] > 0:
            need[s] -= 1
            yield cid, s
        n += 1


def synthesize_corpus(spec: SyntheticTaskSpec) -> list[AudioClip]:
    """Deterministic labeled corpus for one synthetic task."""
    spec.validate()
    clips = []
    for c, (label, quota) in enumerate(zip(spec.labels(), spec.quotas())):
        for cid, split in _clip_ids(spec, label, quota):
            x = _generate(spec, c, cid)
            clips.append(AudioClip(x, clip_id=cid, label=label, split=split,
                                   task_id=spec.task_id))
    return clips


# ---------------------------------------------------------------------------
# WAV I/O


class IngestError(FrontendError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors) if self.errors else "ingest failed")


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono RIFF file as floats in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise FrontendError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2 or w.getcomptype() != "NONE":
                raise FrontendError(f"{path}: expected 16-bit PCM")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError, OSError) as e:
        raise FrontendError(f"{path}: unreadable ({e})") from e
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def resample(x: np.ndarray, sr: int, target: int = SAMPLE_RATE) -> np.ndarray:
    if sr == target:
        return x
    g = np.gcd(sr, target)
    return resample_poly(x, target // g, sr // g)


def ingest_wav_dir(root: str | Path, task_id: str | None = None,
                   skip_bad: bool = False) -> list[AudioClip]:
    """Load ``<root>/<split>/<label>/<file>.wav`` into clips at 16 kHz."""
    root = Path(root)
    task_id = task_id or root.name
    clips, errors = [], []
    for split in SPLITS:
        split_dir = root / split
        files = sorted(split_dir.glob("*/*.wav")) if split_dir.is_dir() else []
        if not files:
            raise FrontendError(f"split has no clips: {split}")
        for path in files:
            label = path.parent.name
            try:
                x, sr = read_wav(path)
                x = np.clip(resample(x, sr), -1.0, 1.0)
                clip = AudioClip(x, clip_id=f"{task_id}/{split}/{label}/{path.stem}",
                                 label=label, split=split, task_id=task_id)
                clip.validate()
            except FrontendError as e:
                errors.append(str(e))
                continue
            clips.append(clip)
    if errors:
        for e in errors:
            log.warning("bad file: %s", e)
        if not skip_bad:
            raise IngestError(errors)
    return clips


def write_manifest(clips: Iterable[AudioClip], path: str | Path) -> None:
    with open(path, "w") as f:
        for c in clips:
            f.write(json.dumps(c.manifest_row(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
