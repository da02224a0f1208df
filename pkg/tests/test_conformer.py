import numpy as np
import pytest
import torch
from scipy.special import expit, softmax

from capbench.conformer import (ConformerBlock, ConformerEncoder, ConformerError, EncoderConfig,
                                RelativePositionBias, conformer_backward, conformer_forward,
                                relative_bias)
from capbench.featenc import EncodedFeatures


def make(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = EncoderConfig(**{"num_layers": 2, "num_heads": 2, "model_dim": 8, **kw})
    return ConformerEncoder(cfg).double()


def randomize(module, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale + (p == 1) * 1.0)


def test_activation_stack_shapes():
    enc = make()
    feats = EncodedFeatures(torch.randn(10, 8, dtype=torch.float64))
    stack = conformer_forward(feats, enc, keep_attention=True)
    assert stack.num_layers == 2
    assert all(l.shape == (1, 10, 8) for l in stack.layers)
    assert len(stack.attention) == 2
    for a in stack.attention:
        assert a.shape == (1, 2, 10, 10)
        torch.testing.assert_close(a.sum(-1), torch.ones(1, 2, 10, dtype=torch.float64))


def test_zero_branch_scales_give_identity_stack():
    enc = make(seed=1)
    with torch.no_grad():
        for b in enc.blocks:
            b.branch_scale.zero_()
    x = torch.nn.functional.layer_norm(torch.randn(1, 10, 8, dtype=torch.float64), (8,))
    stack = enc(x)
    for out in stack.layers[1:]:
        # only the closing LayerNorm remains; re-normalizing a normalized input
        # differs from the identity by its epsilon term alone
        torch.testing.assert_close(out, x, atol=1e-4, rtol=0)


def _ln(x, w, b, eps=1e-5):
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + eps) * w + b


def _silu(x):
    return x * expit(x)


def _np(p):
    return p.detach().numpy()


def _block_oracle(blk: ConformerBlock, x: np.ndarray, heads: int, rel=None) -> np.ndarray:
    """Straight-line float64 reimplementation of one macaron block for a (T, D) input."""
    t, d = x.shape
    s = _np(blk.branch_scale)

    def ffn(f, h):
        h = _ln(h, _np(f.norm.weight), _np(f.norm.bias))
        h = _silu(h @ _np(f.up.weight).T + _np(f.up.bias))
        return h @ _np(f.down.weight).T + _np(f.down.bias)

    x = x + 0.5 * s[0] * ffn(blk.ffn1, x)

    at = blk.attn
    h = _ln(x, _np(at.norm.weight), _np(at.norm.bias))
    qkv = h @ _np(at.qkv.weight).T + _np(at.qkv.bias)
    dh = d // heads
    outs = []
    for k in range(heads):
        q = qkv[:, k * dh:(k + 1) * dh]
        kk = qkv[:, d + k * dh: d + (k + 1) * dh]
        v = qkv[:, 2 * d + k * dh: 2 * d + (k + 1) * dh]
        logits = q @ kk.T / np.sqrt(dh)
        if rel is not None:
            logits = logits + rel[k]
        outs.append(softmax(logits, axis=-1) @ v)
    a = np.concatenate(outs, axis=1) @ _np(at.out.weight).T + _np(at.out.bias)
    x = x + s[1] * a

    cv = blk.conv
    h = _ln(x, _np(cv.norm.weight), _np(cv.norm.bias))
    h = h @ _np(cv.pw1.weight).T + _np(cv.pw1.bias)
    h = h[:, :d] * expit(h[:, d:])
    kw = cv.depthwise.kernel_size[0]
    left = (kw - 1) // 2
    padded = np.concatenate([np.repeat(h[:1], left, 0), h, np.repeat(h[-1:], kw - 1 - left, 0)])
    w = _np(cv.depthwise.weight)[:, 0, :]  # (D, K)
    conv = np.stack([(padded[i:i + kw] * w.T).sum(0) for i in range(t)]) + _np(cv.depthwise.bias)
    h = _silu(_ln(conv, _np(cv.mid_norm.weight), _np(cv.mid_norm.bias)))
    x = x + s[2] * (h @ _np(cv.pw2.weight).T + _np(cv.pw2.bias))

    x = x + 0.5 * s[3] * ffn(blk.ffn2, x)
    return _ln(x, _np(blk.final_norm.weight), _np(blk.final_norm.bias))


@pytest.mark.parametrize("relative", [False, True])
def test_single_block_matches_oracle(relative):
    enc = make(seed=2, num_layers=1, relative_attention=relative, max_rel_offset=3)
    randomize(enc, seed=5)
    x = np.random.default_rng(0).normal(size=(11, 8))
    got = enc(torch.as_tensor(x[None])).layers[1][0].detach().numpy()
    blk = enc.blocks[0]
    rel = _np(relative_bias(11, blk.attn.rel)) if relative else None
    want = _block_oracle(blk, x, heads=2, rel=rel)
    assert np.max(np.abs(got - want)) <= 1e-10


def test_attention_spans_full_clip():
    enc = make(seed=3)
    randomize(enc, seed=3)
    x = torch.randn(1, 12, 8, dtype=torch.float64)
    y = x.clone()
    y[0, -1] += torch.randn(8, dtype=torch.float64)
    a, b = enc(x).layers[-1], enc(y).layers[-1]
    # the first frame sees the last one (no causal mask)
    assert torch.max(torch.abs(a[0, 0] - b[0, 0])) > 1e-6


def test_non_finite_names_layer():
    enc = make()
    with torch.no_grad():
        enc.blocks[1].ffn1.up.weight.fill_(float("nan"))
    with pytest.raises(ConformerError, match="layer 2"):
        enc(torch.randn(1, 6, 8, dtype=torch.float64))


def test_backward_matches_finite_differences():
    enc = make(seed=4)
    randomize(enc, seed=4)
    x = torch.randn(1, 6, 8, dtype=torch.float64)
    w = torch.randn(1, 6, 8, dtype=torch.float64)

    def loss():
        return (enc(x).layers[-1] * w).sum()

    grads = conformer_backward(loss(), enc)
    h = 1e-5
    for name, p in enc.named_parameters():
        flat = p.data.view(-1)
        num = np.zeros(p.numel())
        for i in range(p.numel()):
            old = float(flat[i])
            flat[i] = old + h
            with torch.no_grad():
                up = float(loss())
            flat[i] = old - h
            with torch.no_grad():
                down = float(loss())
            flat[i] = old
            num[i] = (up - down) / (2 * h)
        ana = grads[name].numpy().ravel()
        scale = max(np.abs(ana).max(), np.abs(num).max(), 1e-6)
        assert np.abs(ana - num).max() / scale <= 1e-4, name


def test_gradient_dependency_structure():
    enc = make(seed=5)
    x = torch.randn(1, 6, 8, dtype=torch.float64)
    g1 = conformer_backward(enc(x).layers[1].sum() ** 2, enc)
    assert all(torch.count_nonzero(v) == 0 for k, v in g1.items() if k.startswith("blocks.1."))
    g2 = conformer_backward((enc(x).layers[2] ** 3).sum(), enc)
    assert any(torch.count_nonzero(v) > 0 for k, v in g2.items() if k.startswith("blocks.1."))


def test_gradient_shapes_track_parameters():
    for d in (8, 16):
        enc = make(model_dim=d)
        grads = conformer_backward((enc(torch.randn(1, 5, d, dtype=torch.float64))
                                    .layers[-1] ** 2).sum(), enc)
        for name, p in enc.named_parameters():
            assert grads[name].shape == p.shape


def test_backward_needs_graph():
    enc = make()
    with pytest.raises(ConformerError):
        conformer_backward(torch.tensor(1.0), enc)


def test_zero_relative_bias_matches_plain_attention():
    plain = make(seed=6)
    rel = make(seed=6, relative_attention=True)
    rel.load_state_dict({**plain.state_dict(),
                         **{k: v for k, v in rel.state_dict().items() if "rel." in k}})
    x = torch.randn(1, 9, 8, dtype=torch.float64)
    a = plain(x, keep_attention=True)
    b = rel(x, keep_attention=True)
    for u, v in zip(a.attention, b.attention):
        torch.testing.assert_close(u, v, rtol=0, atol=0)


def test_relative_bias_translation_invariance():
    torch.manual_seed(0)
    mod = RelativePositionBias(3, max_offset=4)
    with torch.no_grad():
        mod.table.normal_()
    bias = relative_bias(20, mod).detach().numpy()
    assert bias.shape == (3, 20, 20)
    for i in range(17):
        for j in range(17):
            assert np.array_equal(bias[:, i + 3, j + 3], bias[:, i, j])
            off = np.clip(j - i, -4, 4)
            assert np.array_equal(bias[:, i, j], mod.table.detach().numpy()[:, off + 4])


def test_config_validation():
    with pytest.raises(ConformerError):
        EncoderConfig(model_dim=10, num_heads=4)
    with pytest.raises(ConformerError):
        conformer_forward(torch.zeros(5, 4, dtype=torch.float64), make())
