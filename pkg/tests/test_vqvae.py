import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionseq import autodiff as ad
from motionseq.errors import ValidationError
from motionseq.motion import synth_motion
from motionseq.vqvae import (
    Codebook,
    TokenSequence,
    VqVae,
    VqVaeConfig,
    detokenize,
    ema_update,
    kmeans,
    perplexity,
    quantize,
    random_restart,
    record_usage,
    tokenize,
    usage_fraction,
    vq_loss,
)


def brute_nearest(entries, z):
    out = []
    for row in z:
        best, best_d = 0, np.inf
        for k, e in enumerate(entries):
            d = float(np.sum((row - e) ** 2))
            if d < best_d:  # strict: the first (lowest) index wins ties
                best, best_d = k, d
        out.append(best)
    return np.array(out)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.integers(1, 8), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_quantize_is_exhaustive_nearest(k, d, t, seed):
    r = np.random.default_rng(seed)
    entries = r.standard_normal((k, d))
    z = r.standard_normal((t, d))
    vals, idx = quantize(entries, z)
    np.testing.assert_array_equal(idx, brute_nearest(entries, z))
    np.testing.assert_array_equal(vals, entries[idx])


def test_quantize_tie_goes_to_lowest_index():
    entries = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    _, idx = quantize(entries, np.array([[0.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(idx, [0, 0])


def test_quantize_dim_mismatch():
    with pytest.raises(ValidationError):
        quantize(np.zeros((4, 3)), np.zeros((2, 2)))


def _codebook(k, d, seed=0):
    return Codebook(k, d, np.random.default_rng(seed), dtype=np.float64)


def test_ema_matches_recurrence(rng):
    cb = _codebook(5, 3)
    n = cb.cluster_size.copy()
    s = cb.embed_sum.copy()
    decay, eps = 0.9, 1e-5
    for _ in range(4):
        z = rng.standard_normal((20, 3))
        idx = rng.integers(0, 5, 20)
        ema_update(cb, z, idx, decay, eps)
        for k in range(5):
            mask = idx == k
            n[k] = decay * n[k] + (1 - decay) * mask.sum()
            s[k] = decay * s[k] + (1 - decay) * z[mask].sum(axis=0)
        np.testing.assert_allclose(cb.entries, s / (n[:, None] + eps), rtol=0, atol=1e-10)


def test_restart_replaces_only_stale_entries(rng):
    cb = _codebook(4, 2)
    for _ in range(3):
        record_usage(cb, np.array([0, 1]))
    before = cb.entries.copy()
    z = rng.standard_normal((10, 2))
    assert random_restart(cb, z, threshold=2, rng=rng) == 2
    np.testing.assert_array_equal(cb.entries[:2], before[:2])
    for k in (2, 3):
        assert any(np.array_equal(cb.entries[k], row) for row in z)
    assert np.all(cb.usage_age == 0) or np.all(cb.usage_age[2:] == 0)


def test_kmeans_recovers_two_blobs(rng):
    a = rng.standard_normal((200, 2)) * 0.1 + [5.0, 5.0]
    b = rng.standard_normal((200, 2)) * 0.1 + [-5.0, 0.0]
    cents = kmeans(np.concatenate([a, b]), 2, rng, iters=10)
    cents = cents[np.argsort(cents[:, 0])]
    np.testing.assert_allclose(cents[0], b.mean(axis=0), atol=0.1)
    np.testing.assert_allclose(cents[1], a.mean(axis=0), atol=0.1)


def test_kmeans_more_centres_than_points(rng):
    assert kmeans(rng.standard_normal((3, 2)), 5, rng).shape == (5, 2)


def test_usage_statistics():
    assert usage_fraction(np.array([0, 0, 1]), 4) == 0.5
    assert perplexity(np.array([0, 1, 2, 3]), 4) == pytest.approx(4.0)
    assert perplexity(np.array([2, 2, 2]), 4) == pytest.approx(1.0)


def test_token_sequence_rules():
    TokenSequence([0, 3, 4], 4, has_eos=True)
    with pytest.raises(ValidationError):
        TokenSequence([0, 4, 1], 4)
    with pytest.raises(ValidationError):
        TokenSequence([0, 1], 4, has_eos=True)
    t = TokenSequence([1, 2], 4).with_eos()
    assert t.indices.tolist() == [1, 2, 4] and t.body.tolist() == [1, 2]


def test_config_validation_names_fields():
    with pytest.raises(ValidationError, match="codebook_size"):
        VqVae(VqVaeConfig(codebook_size=1))
    with pytest.raises(ValidationError, match="code_dim"):
        VqVae(VqVaeConfig(code_dim=30, n_heads=4))


SMALL = dict(motion_dim=6, codebook_size=8, code_dim=8, n_layers=1, n_heads=2)


def test_forward_shapes_and_losses(rng):
    m = VqVae(VqVaeConfig(**SMALL), seed=0)
    x = rng.standard_normal((2, 12, 6))
    out = m.forward(x)
    assert out.x_rec.shape == (2, 12, 6)
    assert out.z_e.shape == (2, 12, 8) and out.indices.shape == (2, 12)
    l = out.losses
    assert l["total"].item() == pytest.approx(l["reconstruction"].item() + l["commit"].item(), rel=1e-6)


def test_loss_includes_codebook_term_without_ema(rng):
    z_e = ad.Tensor(rng.standard_normal((4, 3)))
    z_q = ad.Tensor(rng.standard_normal((4, 3)))
    x = ad.Tensor(rng.standard_normal((4, 2)))
    on = vq_loss(x, x, z_e, z_q, 0.2, ema=True)
    off = vq_loss(x, x, z_e, z_q, 0.2, ema=False)
    assert off["total"].item() == pytest.approx(on["total"].item() + on["codebook"].item())
    assert on["commit"].item() == pytest.approx(0.2 * np.mean((z_e.data - z_q.data) ** 2))


def test_straight_through_reaches_encoder(rng):
    m = VqVae(VqVaeConfig(**SMALL), seed=1)
    out = m.forward(rng.standard_normal((1, 10, 6)))
    ad.backward(out.losses["total"])
    assert np.abs(m.in_proj.weight.grad).sum() > 0


def test_gradient_learned_codebook(rng):
    m = VqVae(VqVaeConfig(**SMALL, use_ema=False), seed=1, dtype=np.float64)
    assert "codebook.entries" in m.parameters()
    out = m.forward(rng.standard_normal((1, 10, 6)))
    ad.backward(out.losses["total"])
    assert np.abs(m.codebook.embed.grad).sum() > 0


def test_vqvae_gradients_finite_difference(rng):
    m = VqVae(VqVaeConfig(**SMALL, use_ema=False), seed=2, dtype=np.float64)
    x = rng.standard_normal((2, 7, 6))
    # The straight-through path is a surrogate gradient by design, so only the
    # decoder half has a true derivative to compare against.
    params = {k: p for k, p in m.parameters().items() if k.startswith(("dec_", "out_proj"))}
    errs = ad.directional_gradcheck(lambda: m.forward(x).losses["total"], params, rng)
    assert max(errs.values()) < 1e-4


def test_decoder_half_is_causal(rng):
    m = VqVae(VqVaeConfig(**SMALL), seed=3, dtype=np.float64)
    z = rng.standard_normal((1, 10, 8))
    a = m.decode(z).data
    z2 = z.copy()
    z2[0, 6:] += 3.0
    b = m.decode(z2).data
    assert np.abs(a[0, :6] - b[0, :6]).max() <= 1e-12


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_stride_lengths(stride, rng):
    m = VqVae(VqVaeConfig(**SMALL, stride=stride), seed=0)
    x = rng.standard_normal((13, 6))
    tok = tokenize(m, x)
    assert len(tok) == -(-13 // stride)
    assert m.forward(x).x_rec.shape == (1, 13, 6)
    assert detokenize(m, tok).n_frames == len(tok) * stride


def test_tokenize_detokenize(rng):
    m = VqVae(VqVaeConfig(**SMALL), seed=0)
    seq = synth_motion("sine-walk", 20, 6)
    tok = tokenize(m, seq, append_eos=True)
    assert tok.has_eos and len(tok) == 21
    assert detokenize(m, tok).n_frames == 20
    with pytest.raises(ValidationError):
        detokenize(m, [8])


def test_state_round_trip_is_bitwise(rng):
    a = VqVae(VqVaeConfig(**SMALL), seed=0)
    a.codebook.usage_age[:] = 3
    b = VqVae(VqVaeConfig(**SMALL), seed=9)
    b.load_state_tensors({k: np.copy(v) for k, v in a.state_tensors().items()})
    x = rng.standard_normal((1, 9, 6))
    with ad.no_grad():
        assert a.forward(x).x_rec.data.tobytes() == b.forward(x).x_rec.data.tobytes()
    assert np.array_equal(b.codebook.usage_age, a.codebook.usage_age)
