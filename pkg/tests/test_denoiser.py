"""Denoiser stage: attention gates, scan mixer, residual blocks, the frozen
encoder wiring, the latent alignment loss, and short training runs."""

import numpy as np
import pytest

import langct.denoiser as D
import langct.langae as L
import langct.quantize as Q
import langct.tensor as T
from langct.io import load_checkpoint
from langct.phantom import TRAIN_WINDOW, hu_window, make_pair
from langct.tensor import Tape, Tensor

from helpers import assert_grads_match

TINY_WIDTHS = (8, 12, 16, 16)


@pytest.fixture(scope="module")
def frozen_ae():
    layout = Q.PyramidLayout.default(grid=4)
    cb = Q.Codebook.default(vocab_size=96, dim=8, seed=5)
    rng = np.random.default_rng(11)
    return L.LangAutoencoder(layout, cb, rng, TINY_WIDTHS).freeze()


@pytest.fixture(scope="module")
def frozen_ae64():
    layout = Q.PyramidLayout.default(grid=8)
    cb = Q.Codebook.default(vocab_size=96, dim=8, seed=6)
    rng = np.random.default_rng(12)
    return L.LangAutoencoder(layout, cb, rng, TINY_WIDTHS).freeze()


@pytest.fixture(scope="module")
def pairs64():
    return [make_pair(seed=800 + i, size=64, dose=0.25) for i in range(6)]


def spread_input(shape, seed=0, offsets=True):
    """Random features with distinct per-channel levels.

    Near-constant channels make LayerNorm curvature blow up under float32
    central differences; an honest spread keeps the finite-difference oracle
    inside its accuracy envelope.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 0.5, shape)
    if offsets:
        x += np.linspace(-1.0, 1.0, shape[1]).reshape(1, -1, 1, 1)
    return x.astype(np.float32)


# -- config -------------------------------------------------------------------------


def test_config_defaults_and_validation():
    cfg = D.EmaBlockConfig(16)
    assert (cfg.state_size, cfg.step, cfg.expand, cfg.reduction) == (8, 2, 2, 8)
    for bad in ({"channels": 0}, {"state_size": -1}, {"step": 0},
                {"expand": 0}, {"reduction": 0}):
        with pytest.raises(ValueError):
            D.EmaBlockConfig(**{"channels": 8, **bad})


# -- channel + spatial attention ------------------------------------------------------


def test_csa_shape_and_gate_range():
    rng = np.random.default_rng(0)
    csa = D.ChannelSpatialAttention(rng, channels=8, reduction=4)
    x = Tensor(spread_input((2, 8, 6, 6), seed=1))
    out = csa(x)
    assert out.shape == x.shape
    cg = csa.channel_gate(x).data
    sg = csa.spatial_gate(x).data
    assert np.all(cg > 0.0) and np.all(cg < 1.0)
    assert np.all(sg > 0.0) and np.all(sg < 1.0)


def test_csa_forced_open_gates_are_identity():
    rng = np.random.default_rng(2)
    csa = D.ChannelSpatialAttention(rng, channels=6, reduction=2)
    # +60 drives every sigmoid to exactly 1.0 in float32
    csa.fc2.bias.data[:] = 60.0
    csa.spatial.bias.data[:] = 60.0
    x = Tensor(spread_input((1, 6, 5, 5), seed=3))
    assert np.array_equal(csa(x).data, x.data)


def test_csa_forced_closed_gates_are_zero():
    rng = np.random.default_rng(4)
    csa = D.ChannelSpatialAttention(rng, channels=6, reduction=2)
    csa.fc2.bias.data[:] = -60.0
    csa.spatial.bias.data[:] = -60.0
    x = Tensor(spread_input((1, 6, 5, 5), seed=5))
    assert np.all(csa(x).data == 0.0)


def test_csa_rejects_non_4d():
    csa = D.ChannelSpatialAttention(np.random.default_rng(0), channels=4)
    with pytest.raises(ValueError):
        csa(Tensor(np.zeros((4, 5, 5), np.float32)))


# -- gated scan mixer ----------------------------------------------------------------


def essm_cfg(channels=4):
    return D.EmaBlockConfig(channels, state_size=2, step=2, expand=2, reduction=2)


def test_essm_shape():
    essm = D.Essm(np.random.default_rng(6), essm_cfg())
    x = Tensor(spread_input((2, 4, 8, 8), seed=7))
    assert essm(x).shape == (2, 4, 8, 8)


def test_essm_zero_input_zero_biases_gives_zero():
    essm = D.Essm(np.random.default_rng(8), essm_cfg())
    for name, t in essm.named_tensors():
        if "bias" in name:
            t.data[:] = 0.0
    out = essm(Tensor(np.zeros((1, 4, 8, 8), np.float32)))
    assert np.all(out.data == 0.0)


def test_essm_gradients_match_finite_differences():
    essm = D.Essm(np.random.default_rng(9), essm_cfg())
    x = Tensor(spread_input((1, 4, 8, 8), seed=10))
    w = Tensor(np.random.default_rng(11).normal(0, 1, (1, 4, 8, 8)).astype(np.float32))
    params = [x] + essm.parameters()

    def loss():
        return T.mean_(essm(x) * w)

    assert_grads_match(loss, params, tol=1e-3, eps=2.0**-9, max_elems=8)


# -- residual mixing block -------------------------------------------------------------


def test_ema_block_zero_branches_is_identity():
    block = D.EmaBlock(np.random.default_rng(12), essm_cfg(channels=6))
    block.essm.proj_out.weight.data[:] = 0.0
    block.essm.proj_out.bias.data[:] = 0.0
    block.csa.fc2.bias.data[:] = -60.0
    block.csa.spatial.bias.data[:] = -60.0
    block.ffn.weight.data[:] = 0.0
    block.ffn.bias.data[:] = 0.0
    x = Tensor(spread_input((2, 6, 8, 8), seed=13))
    assert np.array_equal(block(x).data, x.data)


def test_ema_block_shape_preserved():
    block = D.EmaBlock(np.random.default_rng(14), essm_cfg(channels=8))
    x = Tensor(spread_input((2, 8, 16, 16), seed=15))
    assert block(x).shape == (2, 8, 16, 16)


def test_ema_block_scan_branch_is_live():
    block = D.EmaBlock(np.random.default_rng(16), essm_cfg(channels=6))
    x = Tensor(spread_input((1, 6, 8, 8), seed=17))
    full = block(x).data.copy()
    keep_w = block.essm.proj_out.weight.data.copy()
    keep_b = block.essm.proj_out.bias.data.copy()
    block.essm.proj_out.weight.data[:] = 0.0
    block.essm.proj_out.bias.data[:] = 0.0
    ablated = block(x).data
    block.essm.proj_out.weight.data[:] = keep_w
    block.essm.proj_out.bias.data[:] = keep_b
    assert np.abs(full - ablated).max() > 1e-6


def test_ema_block_without_ema_keeps_ffn_path():
    block = D.EmaBlock(np.random.default_rng(18), essm_cfg(channels=4), use_ema=False)
    assert not hasattr(block, "essm")
    x = Tensor(spread_input((1, 4, 8, 8), seed=19))
    expected = (T.silu(block.ffn(x)) + x).data
    assert np.array_equal(block(x).data, expected)


def test_ema_block_gradients_match_finite_differences():
    block = D.EmaBlock(np.random.default_rng(20), essm_cfg(channels=4))
    x = Tensor(spread_input((1, 4, 8, 8), seed=21))
    w = Tensor(np.random.default_rng(22).normal(0, 1, (1, 4, 8, 8)).astype(np.float32))
    params = [x] + block.parameters()

    def loss():
        return T.mean_(block(x) * w)

    assert_grads_match(loss, params, tol=1e-3, eps=2.0**-9, max_elems=6)


# -- denoiser assembly ----------------------------------------------------------------


def build_denoiser(ae, seed=0, **kw):
    kw.setdefault("state_size", 2)
    kw.setdefault("expand", 1)
    kw.setdefault("reduction", 4)
    return D.SeedDenoiser(ae.encoder, np.random.default_rng(seed), **kw)


def test_denoiser_requires_frozen_encoder(frozen_ae):
    layout = Q.PyramidLayout.default(grid=4)
    cb = Q.Codebook.default(vocab_size=32, dim=8, seed=1)
    live = L.LangAutoencoder(layout, cb, np.random.default_rng(0), TINY_WIDTHS)
    with pytest.raises(ValueError, match="frozen"):
        D.SeedDenoiser(live.encoder, np.random.default_rng(1))


def test_denoiser_identity_at_init(frozen_ae):
    model = build_denoiser(frozen_ae)
    x = np.random.default_rng(23).uniform(0, 1, (2, 1, 32, 32)).astype(np.float32)
    out = model(Tensor(x))
    assert np.array_equal(out.data, x)


def test_head_gain_scales_the_correction(frozen_ae):
    x = np.random.default_rng(25).uniform(0.2, 0.8, (1, 1, 32, 32)).astype(np.float32)
    outs = {}
    for gain in (1.0, 0.5):
        model = build_denoiser(frozen_ae, head_gain=gain)
        assert np.array_equal(model(Tensor(x)).data, x)  # zero-init head regardless
        # give the head a small nonzero kernel; corrections stay far from the clamp
        model.head.weight.data[:] = 1e-3
        outs[gain] = model(Tensor(x)).data - x
    assert np.abs(outs[1.0]).max() > 0.0
    # float32 rounding of (x + correction) leaves ~1e-8 absolute wiggle
    np.testing.assert_allclose(outs[0.5], 0.5 * outs[1.0], rtol=1e-4, atol=1e-7)
    with pytest.raises(ValueError, match="head_gain"):
        build_denoiser(frozen_ae, head_gain=0.0)


def test_cosine_schedule_warmup():
    from langct.optim import CosineSchedule

    sched = CosineSchedule(1e-3, 1e-6, 100, warmup=10)
    assert sched.lr(0) == pytest.approx(1e-4)
    assert sched.lr(9) == pytest.approx(1e-3)
    assert sched.lr(10) == pytest.approx(1e-3)
    assert sched.lr(99) == pytest.approx(1e-6)
    assert all(sched.lr(i) <= sched.lr(i + 1) + 1e-12 for i in range(9))
    # default stays the pure cosine shape, endpoints pinned
    plain = CosineSchedule(1e-3, 1e-6, 100)
    assert plain.lr(0) == pytest.approx(1e-3)
    assert plain.lr(99) == pytest.approx(1e-6)
    with pytest.raises(ValueError, match="warmup"):
        CosineSchedule(1e-3, 1e-6, 10, warmup=10)


def test_denoiser_input_validation(frozen_ae):
    model = build_denoiser(frozen_ae)
    with pytest.raises(ValueError, match="side"):
        model(Tensor(np.zeros((1, 1, 40, 40), np.float32)))   # 40/8 = 5, odd
    with pytest.raises(ValueError):
        model(Tensor(np.zeros((1, 1, 32, 16), np.float32)))
    out = model(np.zeros((1, 32, 32), np.float32))              # 3-D promoted
    assert out.shape == (1, 1, 32, 32)


def test_denoiser_encoder_gets_no_gradient(frozen_ae):
    model = build_denoiser(frozen_ae)
    x = Tensor(np.random.default_rng(24).uniform(0, 1, (1, 1, 32, 32)).astype(np.float32))
    with Tape() as tape:
        out = model(x)
        loss = T.mean_(T.square(out - 0.5))
        tape.backward(loss)
    assert all(t.grad is None for _, t in frozen_ae.named_tensors())
    assert model.head.weight.grad is not None
    assert float(np.abs(model.head.weight.grad).max()) > 0.0


def test_denoiser_encoder_excluded_from_state(frozen_ae):
    model = build_denoiser(frozen_ae)
    assert all(not k.startswith("_encoder") for k in model.state_dict())


def test_denoiser_precomputed_features_match(frozen_ae):
    model = build_denoiser(frozen_ae)
    x = Tensor(np.random.default_rng(25).uniform(0, 1, (1, 1, 32, 32)).astype(np.float32))
    feats = model.features(x)
    assert len(feats) == 5
    assert np.array_equal(model(x, features=feats).data, model(x).data)


# -- latent alignment loss -------------------------------------------------------------


def rand_img(seed, n=1, side=32):
    return np.random.default_rng(seed).uniform(0, 1, (n, 1, side, side)).astype(np.float32)


def test_langda_zero_at_target(frozen_ae):
    y = Tensor(rand_img(26))
    loss = D.langda_loss(Tensor(y.data.copy()), y, frozen_ae)
    assert float(loss.item()) == 0.0


def test_langda_nonnegative_and_positive_off_target(frozen_ae):
    val = float(D.langda_loss(Tensor(rand_img(27)), Tensor(rand_img(28)), frozen_ae).item())
    assert val > 0.0


def test_langda_terms_selector(frozen_ae):
    y_hat, y = Tensor(rand_img(29)), Tensor(rand_img(30))
    both = float(D.langda_loss(y_hat, y, frozen_ae).item())
    cont = float(D.langda_loss(y_hat, y, frozen_ae, terms="continuous").item())
    disc = float(D.langda_loss(y_hat, y, frozen_ae, terms="discrete").item())
    assert both == pytest.approx(cont + disc, rel=1e-6)
    with pytest.raises(ValueError, match="terms"):
        D.langda_loss(y_hat, y, frozen_ae, terms="all")


def test_langda_rejects_trainable_autoencoder():
    layout = Q.PyramidLayout.default(grid=4)
    cb = Q.Codebook.default(vocab_size=32, dim=8, seed=2)
    live = L.LangAutoencoder(layout, cb, np.random.default_rng(3), TINY_WIDTHS)
    with pytest.raises(ValueError, match="frozen"):
        D.langda_loss(Tensor(rand_img(31)), Tensor(rand_img(32)), live)


def test_langda_gradient_reaches_prediction_only(frozen_ae):
    y_hat = Tensor(rand_img(33), requires_grad=True)
    y = Tensor(rand_img(34))
    with Tape() as tape:
        loss = D.langda_loss(y_hat, y, frozen_ae)
        tape.backward(loss)
    assert y_hat.grad is not None and np.abs(y_hat.grad).max() > 0.0
    assert y.grad is None
    assert all(t.grad is None for _, t in frozen_ae.named_tensors())


def test_langda_continuous_gradient_matches_finite_differences(frozen_ae):
    y_hat = Tensor(rand_img(35))
    y = Tensor(rand_img(36))
    ref = D.langda_reference(y, frozen_ae)

    def loss():
        return D.langda_loss(y_hat, y, frozen_ae, terms="continuous", reference=ref)

    assert_grads_match(loss, [y_hat], tol=1e-3, eps=2.0**-9, max_elems=24)


def test_langda_discrete_gradient_is_straight_through(frozen_ae):
    y_hat_data = rand_img(37)
    _, zq_ref = D.langda_reference(Tensor(rand_img(38)), frozen_ae)

    y_hat = Tensor(y_hat_data.copy(), requires_grad=True)
    with Tape() as tape:
        z_hat = frozen_ae.encode(y_hat)
        loss = T.mean_(T.square(frozen_ae.quantize(z_hat).z_q - Tensor(zq_ref)))
        tape.backward(loss)
    g_quantized = y_hat.grad.copy()

    # straight-through: same gradient as shifting z by the (constant) rounding
    offset = frozen_ae.quantize(frozen_ae.encode(Tensor(y_hat_data))).z_q.data - \
        frozen_ae.encode(Tensor(y_hat_data)).data
    y_hat2 = Tensor(y_hat_data.copy(), requires_grad=True)
    with Tape() as tape:
        z2 = frozen_ae.encode(y_hat2)
        loss2 = T.mean_(T.square(z2 + Tensor(offset) - Tensor(zq_ref)))
        tape.backward(loss2)
    np.testing.assert_allclose(g_quantized, y_hat2.grad, rtol=1e-4, atol=1e-9)


# -- training loop ---------------------------------------------------------------------


def tiny_train(pairs, ae, **kw):
    kw.setdefault("steps", 4)
    kw.setdefault("batch_size", 1)
    kw.setdefault("seed", 0)
    kw.setdefault("base_lr", 1e-4)
    kw.setdefault("state_size", 2)
    kw.setdefault("expand", 1)
    kw.setdefault("reduction", 4)
    kw.setdefault("eval_every", 2)
    kw.setdefault("eval_limit", 2)
    kw.setdefault("log_every", 1)
    return D.train_denoiser(pairs, ae, **kw)


def test_train_validation(frozen_ae64, pairs64):
    with pytest.raises(ValueError):
        tiny_train(pairs64, frozen_ae64, steps=0)
    with pytest.raises(ValueError, match="two pairs"):
        tiny_train(pairs64[:1], frozen_ae64)
    with pytest.raises(ValueError, match="ablation arm"):
        tiny_train(pairs64, frozen_ae64, ablate="dropout")


def test_train_history_and_identity_at_start(frozen_ae64, pairs64):
    model, hist = tiny_train(pairs64, frozen_ae64)
    assert [r["step"] for r in hist["eval"]] == [0, 2, 4]
    first = hist["eval"][0]
    # identity up to the float32 window/unwindow round trip of the eval hook
    assert first["psnr"] == pytest.approx(first["input_psnr"], rel=1e-6)
    assert first["ssim"] == pytest.approx(first["input_ssim"], rel=1e-6)
    assert all(np.isfinite(r["loss"]) for r in hist["train"])
    assert [r["step"] for r in hist["train"]] == [0, 1, 2, 3]


def test_train_deterministic_and_checkpoint_roundtrip(frozen_ae64, pairs64, tmp_path):
    path = tmp_path / "seed.ckpt"
    model1, h1 = tiny_train(pairs64, frozen_ae64, checkpoint_path=path)
    model2, h2 = tiny_train(pairs64, frozen_ae64)
    assert h1["eval"][-1]["psnr"] == h2["eval"][-1]["psnr"]
    assert h1["train"][-1]["loss"] == h2["train"][-1]["loss"]

    reloaded = build_denoiser(frozen_ae64, state_size=2, expand=1, reduction=4)
    reloaded.load_state_dict(load_checkpoint(path))
    x = Tensor(hu_window(pairs64[0].ldct, *TRAIN_WINDOW)[None, None])
    assert np.array_equal(reloaded(x).data, model1(x).data)


def test_train_encoder_bytes_unchanged(frozen_ae64, pairs64):
    before = {k: v.tobytes() for k, v in frozen_ae64.state_dict().items()}
    tiny_train(pairs64, frozen_ae64)
    after = {k: v.tobytes() for k, v in frozen_ae64.state_dict().items()}
    assert before == after


def test_train_rejects_ruined_holdout(frozen_ae64, pairs64):
    with pytest.raises(ValueError, match="holdout"):
        tiny_train(pairs64, frozen_ae64, holdout_fraction=0.99)


def test_ablation_no_langda_runs_pure_mse(frozen_ae64, pairs64):
    _, hist = tiny_train(pairs64, frozen_ae64, steps=2, ablate="no-langda")
    assert all(r["langda"] == 0.0 for r in hist["train"])


def test_ablation_no_ema_strips_blocks(frozen_ae64, pairs64):
    model, _ = tiny_train(pairs64, frozen_ae64, steps=2, ablate="no-ema")
    assert not model.block0.use_ema and not hasattr(model.block0, "essm")


def test_ablation_surrogate_encoder_swaps_features(frozen_ae64, pairs64):
    model, hist = tiny_train(pairs64, frozen_ae64, steps=2, ablate="resnet-encoder")
    assert model.encoder is not frozen_ae64.encoder
    assert all(np.isfinite(r["loss"]) for r in hist["train"])


@pytest.mark.parametrize("arm", ["langda-c", "langda-d"])
def test_ablation_single_term_arms_run(frozen_ae64, pairs64, arm):
    _, hist = tiny_train(pairs64, frozen_ae64, steps=2, ablate=arm)
    assert all(np.isfinite(r["loss"]) and r["langda"] >= 0.0 for r in hist["train"])
