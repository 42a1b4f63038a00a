import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netprint import convlstm, diffcore as dc, synthgen
from netprint.codec import CodecConfig, encode_lines, null_sample
from netprint.convlstm import AutoencoderHyper, CellState, ConvLstmConfig

import oracles


def random_cell(rng, L=4, cin=3, hc=2, k=3, prefix="enc."):
    p = {}
    for g in "ifco":
        p[f"{prefix}W_x{g}"] = rng.normal(size=(k, cin, hc))
        p[f"{prefix}W_h{g}"] = rng.normal(size=(k, hc, hc))
        p[f"{prefix}b_{g}"] = rng.normal(size=hc)
    for g in "ifo":
        p[f"{prefix}W_c{g}"] = rng.normal(size=(L, hc))
    return p


def test_cell_step_matches_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        p = random_cell(rng)
        x, H, C = rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        got = convlstm.cell_step(x, CellState(H, C), p)
        ref_h, ref_c = oracles.cell_step(x.tolist(), H.tolist(), C.tolist(), {k: v.tolist() for k, v in p.items()})
        worst = max(worst, np.abs(got.H.value - ref_h).max(), np.abs(got.C.value - ref_c).max())
    assert worst <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20))
def test_gates_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    p = {k: v * scale for k, v in random_cell(rng).items()}
    x, H, C = rng.normal(size=(4, 3)) * scale, rng.uniform(-1, 1, (4, 2)), rng.normal(size=(4, 2))
    out = convlstm.cell_step(x, CellState(H, C), p)
    assert np.all(np.abs(out.H.value) < 1.0)
    assert np.all(np.isfinite(out.C.value))


@pytest.fixture(scope="module")
def small():
    codec = CodecConfig(max_len=12)
    theta = convlstm.init_autoencoder(codec, ConvLstmConfig(4, 3), seed=5)
    lines = synthgen.make_corpus(2, 20, 0.5, seed=1)[0].lines
    return codec, theta, encode_lines(lines, codec)


def test_parameter_layout(small):
    codec, theta, _ = small
    assert theta["enc.W_xi"].shape == (3, 97, 4)
    assert theta["enc.W_hf"].shape == (3, 4, 4)
    assert theta["enc.W_co"].shape == (12, 4)
    assert theta["dec.W_xi"].shape == (3, 4, 4)
    assert theta["dec.W_proj"].shape == (1, 4, 97)
    assert np.all(theta["enc.b_f"] == 1.0)


def test_encode_single_equals_first_of_window(small):
    _, theta, x = small
    assert np.array_equal(convlstm.encode_single(x[0], theta).value, convlstm.encode(x[:1], theta)[0].value)


def test_encode_is_prefix_causal(small):
    _, theta, x = small
    window = x[:6].copy()
    before = [h.value.copy() for h in convlstm.encode(window, theta)]
    window[4] = np.roll(window[4], 3, axis=-1)
    after = [h.value for h in convlstm.encode(window, theta)]
    for t in range(4):
        assert np.array_equal(before[t], after[t])
    assert not np.array_equal(before[4], after[4])


def test_encode_deterministic_and_finite(small):
    codec, theta, x = small
    a = [h.value for h in convlstm.encode(x[:5], theta)]
    b = [h.value for h in convlstm.encode(x[:5], theta)]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    n = convlstm.encode_single(null_sample(codec), theta).value
    assert n.shape == (12, 4) and np.all(np.isfinite(n))


def test_decode_shapes_and_zero_params(small):
    codec, theta, x = small
    recon = convlstm.decode(convlstm.encode(x[:5], theta), theta)
    assert len(recon) == 5 and recon[0].shape == (12, 97)
    zeroed = theta.copy()
    for name in zeroed.names():
        if name.startswith("dec."):
            zeroed.set(name, np.zeros_like(zeroed[name]))
    bias = np.random.default_rng(2).normal(size=97)
    zeroed.set("dec.b_proj", bias)
    for r in convlstm.decode(convlstm.encode(x[:3], zeroed), zeroed):
        assert np.array_equal(r.value, np.broadcast_to(bias, (12, 97)))
    with pytest.raises(dc.ShapeError):
        convlstm.decode([], theta)


def test_recon_loss_nonnegative(small):
    _, theta, x = small
    assert float(convlstm.recon_loss(x[:4], theta).value) >= 0.0


def test_recon_loss_gradients_three_steps():
    codec = CodecConfig(max_len=6)
    theta = convlstm.init_autoencoder(codec, ConvLstmConfig(2, 3), seed=11)
    rng = np.random.default_rng(3)
    for name in theta.names():
        if name.startswith(("enc.W_c", "dec.W_c")):
            theta.set(name, rng.normal(scale=0.5, size=theta[name].shape))
    x = encode_lines(["ab c", "Seq=1", "zz"], codec)
    rep = dc.grad_check(lambda p: convlstm.recon_loss(x, p), theta, samples=300, seed=1)
    assert rep.passed, rep


def test_training_is_deterministic(small):
    codec, _, x = small
    windows = np.stack([x[i : i + 3] for i in range(0, 15, 3)])
    runs = [
        convlstm.train_autoencoder(windows, codec, ConvLstmConfig(4, 3), AutoencoderHyper(2, 2), seed=4)
        for _ in range(2)
    ]
    assert runs[0].step_losses == runs[1].step_losses
    for (_, a), (_, b) in zip(runs[0].params.items(), runs[1].params.items()):
        assert a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(runs[0].step_losses))


def test_empty_corpus_rejected():
    codec = CodecConfig()
    with pytest.raises(ValueError):
        convlstm.train_autoencoder(np.zeros((0, 20, 96, 97)), codec, ConvLstmConfig(), AutoencoderHyper(), 0)


def test_two_hundred_steps_reduce_loss():
    """50 windows, batch 8: 29 epochs of 7 steps is the first epoch boundary past 200 steps."""
    codec = CodecConfig()
    traces = synthgen.make_corpus(5, 200, 0.6, seed=3)
    windows = np.stack([encode_lines(t.lines[i : i + 20], codec) for t in traces for i in range(0, 200, 20)])
    assert len(windows) == 50
    run = convlstm.train_autoencoder(windows, codec, ConvLstmConfig(), AutoencoderHyper(epochs=29, batch_size=8), seed=0)
    assert len(run.step_losses) == 203
    assert run.final_loss <= 0.8 * run.initial_loss
