import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from capbench import checkpoint as ckpt
from capbench.pretrain import (MaskError, TrainConfig, Trainer, build_model, contrastive_loss,
                               load_checkpoint, lr_at, sample_distractors, sample_mask, train)


# -- masking -------------------------------------------------------------------


def test_full_span_exceeds_cap():
    with pytest.raises(MaskError, match="mask plan exceeds cap"):
        sample_mask(20, 1.0, 20, np.random.default_rng(0))


def test_zero_probability_forces_one_span():
    plan = sample_mask(50, 0.0, 10, np.random.default_rng(0))
    assert len(plan.indices) == 10
    assert len(plan.starts) == 1
    assert np.array_equal(plan.indices, np.arange(plan.starts[0], plan.starts[0] + 10))


@settings(max_examples=200, deadline=None)
@given(t=st.integers(14, 300), p=st.floats(0.0, 1.0), span=st.integers(1, 10),
       seed=st.integers(0, 2**31))
def test_mask_invariants(t, p, span, seed):
    plan = sample_mask(t, p, span, np.random.default_rng(seed))
    assert 0 < len(plan.indices) <= 0.75 * t
    assert np.all(plan.starts <= t - span)
    covered = np.zeros(t, dtype=bool)
    for s in plan.starts:
        covered[s:s + span] = True
    assert np.array_equal(np.flatnonzero(covered), plan.indices)


def _expected_fraction(t, p, span):
    # P(frame i masked) = 1 - (1-p)^(number of admissible starts covering i)
    starts = np.arange(t - span + 1)
    cover = np.array([np.sum((starts <= i) & (starts > i - span)) for i in range(t)])
    return float(np.mean(1 - (1 - p) ** cover))


def test_mask_fraction_monte_carlo():
    rng = np.random.default_rng(0)
    fr = [sample_mask(100, 0.065, 10, rng).fraction for _ in range(100_000)]
    expected = _expected_fraction(100, 0.065, 10)
    assert abs(np.mean(fr) - expected) < 0.003
    assert 0.44 < np.mean(fr) < 0.47


# -- contrastive loss -----------------------------------------------------------


def test_aligned_context_with_orthogonal_distractors():
    k = 10
    targets = torch.eye(k + 1, 16, dtype=torch.float64)
    out = contrastive_loss(targets.clone(), targets, k, 0.1, rng=np.random.default_rng(0))
    expected = math.log(1 + k * math.exp(-10))
    assert abs(float(out.loss) - expected) < 1e-15
    assert out.accuracy == 1.0


def test_orthogonal_context_gives_log_k_plus_one():
    k = 10
    targets = torch.eye(k + 1, 16, dtype=torch.float64)
    context = torch.zeros(k + 1, 16, dtype=torch.float64)
    context[:, 15] = 1.0
    out = contrastive_loss(context, targets, k, 0.1, rng=np.random.default_rng(0))
    assert float(out.loss) == math.log(k + 1)
    assert out.accuracy == 0.0  # ties are not counted as correct


def _direct_loss(context, targets, distractors, kappa):
    total = 0.0
    for i in range(len(context)):
        c = context[i] / np.linalg.norm(context[i])
        cand = [i, *distractors[i]]
        sims = [float(c @ (targets[j] / np.linalg.norm(targets[j]))) / kappa for j in cand]
        total += -math.log(math.exp(sims[0]) / sum(math.exp(s) for s in sims))
    return total / len(context)


def test_random_cases_match_direct_enumeration():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n, d, k = int(rng.integers(5, 12)), int(rng.integers(2, 9)), 3
        c, t = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        dis = sample_distractors(n, k, rng)
        out = contrastive_loss(torch.as_tensor(c), torch.as_tensor(t), k, 0.1, distractors=dis)
        assert abs(float(out.loss) - _direct_loss(c, t, dis, 0.1)) <= 1e-12


def test_distractor_order_does_not_change_bits():
    rng = np.random.default_rng(1)
    c, t = torch.randn(9, 4, dtype=torch.float64), torch.randn(9, 4, dtype=torch.float64)
    dis = sample_distractors(9, 5, rng)
    shuffled = np.array([rng.permutation(row) for row in dis])
    a = contrastive_loss(c, t, 5, 0.1, distractors=dis).loss
    b = contrastive_loss(c, t, 5, 0.1, distractors=shuffled).loss
    assert float(a).hex() == float(b).hex()


def test_sample_distractors_rows():
    d = sample_distractors(12, 10, np.random.default_rng(0))
    for i, row in enumerate(d):
        assert i not in row and len(set(row)) == 10 and np.all(np.diff(row) > 0)


def test_too_few_masked_frames_reduces_k():
    rng = np.random.default_rng(0)
    cs = [torch.randn(3, 4, dtype=torch.float64), torch.randn(20, 4, dtype=torch.float64),
          torch.randn(1, 4, dtype=torch.float64)]
    ts = [torch.randn_like(c) for c in cs]
    out = contrastive_loss(cs, ts, 10, 0.1, rng=rng)
    assert out.reduced_k == [(0, 2), (2, 0)]
    assert [l.shape for l in out.logits] == [(3, 3), (20, 11)]


# -- training -------------------------------------------------------------------


def _mels(n=6, frames=120, bins=80, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(frames + 7 * i, bins)).astype(np.float32) for i in range(n)]


def _tcfg(**kw):
    return TrainConfig(**{"steps": 3, "batch_size": 2, "crop_frames": 100, "warmup_steps": 2,
                          "checkpoint_every": 0, **kw})


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3, warmup_steps=100)
    assert lr_at(0, cfg) == pytest.approx(1e-5)
    assert lr_at(49, cfg) == pytest.approx(5e-4)
    assert lr_at(99, cfg) == lr_at(5000, cfg) == 1e-3


def test_zero_steps_checkpoint_equals_initialization(tmp_path, tiny_cfgs):
    mels = _mels()
    train(mels, *tiny_cfgs, _tcfg(steps=0, seed=3), out_dir=tmp_path)
    model, trainer = load_checkpoint(tmp_path / "checkpoint.bin")
    init = build_model(*tiny_cfgs, seed=3, mels=mels)
    assert trainer.step == 0
    for (n, a), (_, b) in zip(model.state_dict().items(), init.state_dict().items()):
        assert torch.equal(a, b), n


def test_same_seed_gives_identical_checkpoint_bytes(tmp_path, tiny_cfgs):
    mels = _mels()
    for d in ("a", "b"):
        train(mels, *tiny_cfgs, _tcfg(seed=5), out_dir=tmp_path / d)
    a = (tmp_path / "a" / "checkpoint.bin").read_bytes()
    assert a == (tmp_path / "b" / "checkpoint.bin").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_text() == \
        (tmp_path / "b" / "metrics.csv").read_text()
    train(mels, *tiny_cfgs, _tcfg(seed=6), out_dir=tmp_path / "c")
    assert a != (tmp_path / "c" / "checkpoint.bin").read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path, tiny_cfgs):
    mels = _mels()
    full, _ = train(mels, *tiny_cfgs, _tcfg(steps=4, seed=2))
    train(mels, *tiny_cfgs, _tcfg(steps=2, seed=2), out_dir=tmp_path)
    model, trainer = load_checkpoint(tmp_path / "checkpoint.bin")
    while trainer.step < 4:
        trainer.train_step(mels)
    for (n, a), (_, b) in zip(model.state_dict().items(), full.state_dict().items()):
        torch.testing.assert_close(a, b, rtol=1e-6, atol=1e-7, msg=n)


def test_metrics_log(tmp_path, tiny_cfgs):
    train(_mels(), *tiny_cfgs, _tcfg(), out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss,contrastive_accuracy,lr"
    assert len(lines) == 4


def test_fingerprint_mismatch_rejected(tmp_path, tiny_cfgs):
    train(_mels(), *tiny_cfgs, _tcfg(steps=0), out_dir=tmp_path)
    with pytest.raises(ckpt.CheckpointError, match="fingerprint"):
        load_checkpoint(tmp_path / "checkpoint.bin", expected_fingerprint="0" * 16)


def test_training_step_reduces_loss_on_repeated_batch(tiny_cfgs):
    mels = _mels(n=1, frames=100)
    model = build_model(*tiny_cfgs, seed=0, mels=mels)
    trainer = Trainer(model, _tcfg(batch_size=4, warmup_steps=1, lr=3e-3))
    losses = [trainer.train_step(mels)["loss"] for _ in range(30)]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    sections = {"meta": {"b": [1, 2.5], "a": "x"},
                "f4": torch.arange(6, dtype=torch.float32).reshape(2, 3),
                "f8": np.linspace(0, 1, 5), "i8": torch.tensor([-3, 4]),
                "u1": torch.tensor([1, 255], dtype=torch.uint8)}
    data = ckpt.dumps(sections)
    back = ckpt.loads(data)
    assert list(back) == list(sections)
    assert back["meta"] == sections["meta"]
    assert torch.equal(back["f4"], sections["f4"]) and back["f8"].dtype == torch.float64
    assert ckpt.dumps(back) == data
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.loads(b"XXXX" + data[4:])
    with pytest.raises(ckpt.CheckpointError, match="truncated"):
        ckpt.loads(data[:-3])
