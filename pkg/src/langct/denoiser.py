"""Denoiser built on the frozen language-pretrained encoder.

The model is a 4-level U-shaped decoder fed by the five frozen encoder
scales: the deepest map seeds the bottleneck and the remaining four are
added (not concatenated) into the decoder stream level by level. Each level
runs one mixing block that fuses a gated selective-scan branch and a
channel/spatial attention branch into the residual stream. The output head
starts as an exact zero map, so the untrained model is the identity and
training learns a pure correction term.

Training minimizes pixel MSE plus a latent-alignment loss that pulls the
prediction's continuous and quantized latents toward those of the clean
target, weighted by ``LANGDA_WEIGHT``. The alignment terms are per-element
means (the convention of standard MSE losses) so their scale is comparable
to the pixel term at any image size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from langct import tensor as T
from langct.io import PhantomPair, save_checkpoint
from langct.langae import Encoder, LangAutoencoder
from langct.metrics import psnr, ssim
from langct.nn import Conv2d, LayerNorm, Linear, Module
from langct.optim import AdamW, CosineSchedule
from langct.phantom import METRIC_WINDOW, TRAIN_WINDOW, hu_unwindow, hu_window
from langct.scan2d import DirectionalScan2d
from langct.tensor import Tape, Tensor

__all__ = [
    "LANGDA_WEIGHT",
    "ABLATION_ARMS",
    "EmaBlockConfig",
    "ChannelSpatialAttention",
    "Essm",
    "EmaBlock",
    "SeedDenoiser",
    "langda_reference",
    "langda_loss",
    "denoise_hook",
    "train_denoiser",
]

LANGDA_WEIGHT = 0.3
ABLATION_ARMS = ("no-ema", "resnet-encoder", "no-langda", "langda-c", "langda-d")


@dataclass(frozen=True)
class EmaBlockConfig:
    """Hyperparameters shared by the mixing blocks of one decoder."""

    channels: int
    state_size: int = 8
    step: int = 2
    expand: int = 2
    reduction: int = 8

    def __post_init__(self):
        if self.channels < 1 or self.state_size < 1:
            raise ValueError("channels and state size must be positive")
        if self.step < 1:
            raise ValueError("scan step must be at least 1")
        if self.expand < 1 or self.reduction < 1:
            raise ValueError("expansion and reduction ratios must be at least 1")


class ChannelSpatialAttention(Module):
    """Channel gate from pooled statistics, then a spatial gate, both sigmoid.

    The channel gate feeds global average- and max-pooled vectors through a
    shared bottleneck MLP; the spatial gate convolves the channel-pooled mean
    and max maps. Gates multiply the input, so pushing the gate biases far
    positive turns the whole layer into an exact identity.
    """

    def __init__(self, rng: np.random.Generator, channels: int,
                 reduction: int = 8, spatial_kernel: int = 7):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, channels)
        self.spatial = Conv2d(rng, 2, 1, spatial_kernel, padding=spatial_kernel // 2)

    def _mlp(self, v: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(v)))

    def channel_gate(self, x: Tensor) -> Tensor:
        pooled_avg = T.mean_(x, axis=(2, 3))
        pooled_max = T.max_(x, axis=(2, 3))
        gate = T.sigmoid(self._mlp(pooled_avg) + self._mlp(pooled_max))
        return T.reshape(gate, (x.shape[0], x.shape[1], 1, 1))

    def spatial_gate(self, x: Tensor) -> Tensor:
        avg_map = T.mean_(x, axis=1, keepdims=True)
        max_map = T.max_(x, axis=1, keepdims=True)
        return T.sigmoid(self.spatial(T.concat([avg_map, max_map], axis=1)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ValueError(f"expected (B, C, H, W), got {x.shape}")
        gated = x * self.channel_gate(x)
        return gated * self.spatial_gate(gated)


_BRANCH_INIT_SCALE = 0.05


class Essm(Module):
    """Gated scan mixer: a skip-sampled selective-scan branch modulated by a
    linear gate branch, projected back to the input channel count."""

    def __init__(self, rng: np.random.Generator, cfg: EmaBlockConfig):
        inner = cfg.channels * cfg.expand
        self.proj_in = Conv2d(rng, cfg.channels, inner, 1)
        self.dw = Conv2d(rng, inner, inner, 3, padding=1, depthwise=True)
        self.scan = DirectionalScan2d(rng, inner, cfg.state_size, step=cfg.step)
        self.norm = LayerNorm(inner, data_format="channels_first")
        self.gate = Conv2d(rng, cfg.channels, inner, 1)
        self.proj_out = Conv2d(rng, inner, cfg.channels, 1)
        # The gate branch multiplies unnormalized features, so a full-variance
        # output projection makes each residual block grow its stream severalfold
        # and a stack of them saturates the clamped head after one optimizer
        # step. Start the branch small (but nonzero) instead.
        self.proj_out.weight.data *= _BRANCH_INIT_SCALE

    def forward(self, x: Tensor) -> Tensor:
        mixed = self.norm(self.scan(T.silu(self.dw(self.proj_in(x)))))
        return self.proj_out(mixed * T.silu(self.gate(x)))


class EmaBlock(Module):
    """Residual mixing block: scan and attention branches fused into the
    stream, followed by a conv feed-forward stage.

    With ``use_ema`` off the fusion collapses to the bare stream and only the
    feed-forward stage remains (the plain-decoder ablation arm).
    """

    def __init__(self, rng: np.random.Generator, cfg: EmaBlockConfig,
                 use_ema: bool = True):
        if use_ema:
            self.essm = Essm(rng, cfg)
            self.csa = ChannelSpatialAttention(rng, cfg.channels, cfg.reduction)
        self.ffn = Conv2d(rng, cfg.channels, cfg.channels, 3, padding=1)
        self.ffn.weight.data *= _BRANCH_INIT_SCALE
        self.use_ema = use_ema

    def forward(self, x: Tensor) -> Tensor:
        fused = self.essm(x) + self.csa(x) + x if self.use_ema else x
        return T.silu(self.ffn(fused)) + fused


class SeedDenoiser(Module):
    """U-shaped denoiser over frozen encoder scales with a residual head.

    The encoder is held outside this module's own state (its weights belong
    to the autoencoder checkpoint) and its features are computed from a
    detached copy of the input, so no gradient ever reaches it. The head is
    zero-initialized: before training the model maps x to clamp(x, 0, 1).
    """

    def __init__(self, encoder: Encoder, rng: np.random.Generator, *,
                 state_size: int = 8, step: int = 2, expand: int = 2,
                 reduction: int = 8, use_ema: bool = True,
                 head_gain: float = 1.0):
        if head_gain <= 0.0:
            raise ValueError(f"head_gain must be positive, got {head_gain}")
        trainable = [name for name, t in encoder.named_tensors() if t.requires_grad]
        if trainable:
            raise ValueError(
                f"denoiser needs a frozen encoder; trainable tensors: {trainable[:3]}"
            )
        w0, w1, w2, w3 = encoder.widths

        def cfg(channels: int) -> EmaBlockConfig:
            return EmaBlockConfig(channels, state_size=state_size, step=step,
                                  expand=expand, reduction=reduction)

        self._encoder = encoder
        self.step = step
        self.bottleneck = Conv2d(rng, w3, w3, 3, padding=1)
        self.block3 = EmaBlock(rng, cfg(w3), use_ema)
        self.up3 = Conv2d(rng, w3, w2, 3, padding=1)
        self.block2 = EmaBlock(rng, cfg(w2), use_ema)
        self.up2 = Conv2d(rng, w2, w1, 3, padding=1)
        self.block1 = EmaBlock(rng, cfg(w1), use_ema)
        self.up1 = Conv2d(rng, w1, w0, 3, padding=1)
        self.block0 = EmaBlock(rng, cfg(w0), use_ema)
        self.head = Conv2d(rng, w0, 1, 3, padding=1, zero_init=True)
        # Fixed output gain, not a parameter. The optimizer moves weights at
        # learning-rate scale regardless of gradient magnitude, so with a
        # unit-gain head every step jiggles the prediction by window-scale
        # amounts while the residual worth learning is at noise scale. A
        # small constant gain compresses the output response; the trunk can
        # then train at an ordinary learning rate.
        self.head_gain = float(head_gain)
        # Deep encoder scales carry the largest magnitudes; at full variance
        # the mixing convs let them dominate every finer level and the head
        # sees a stream tens of units wide, so any head update moves the
        # output by whole window widths. Start the mixing small so the stream
        # stays at finest-feature scale and the output responds to optimizer
        # steps at noise scale, where the denoising signal actually lives.
        for conv in (self.bottleneck, self.up3, self.up2, self.up1):
            conv.weight.data *= 0.25

    @property
    def encoder(self) -> Encoder:
        return self._encoder

    def _check(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != x.shape[3]:
            raise ValueError(f"expected images of shape (B, 1, side, side), got {x.shape}")
        side = x.shape[2]
        if side % 8 or (side // 8) % self.step:
            raise ValueError(
                f"image side {side} must be divisible by 8 and leave the "
                f"bottleneck divisible by the scan step {self.step}"
            )
        return x

    def features(self, x: Tensor) -> List[Tensor]:
        """Frozen encoder scales of a detached copy: constants on any tape."""
        return self._encoder.features(Tensor(x.data))

    def forward(self, x, features: Optional[List[Tensor]] = None) -> Tensor:
        x = self._check(x)
        f0, f1, f2, f3, f4 = self.features(x) if features is None else features
        h = self.block3(self.bottleneck(f4) + f3)
        h = self.block2(self.up3(T.upsample2x(h)) + f2)
        h = self.block1(self.up2(T.upsample2x(h)) + f1)
        h = self.block0(self.up1(T.upsample2x(h)) + f0)
        return T.clamp(x + self.head(h) * self.head_gain, 0.0, 1.0, passthrough=True)


# -- latent alignment loss ---------------------------------------------------------


def _require_frozen(ae: LangAutoencoder) -> None:
    for name, t in ae.named_tensors():
        if t.requires_grad:
            raise ValueError(f"autoencoder must be frozen, found trainable '{name}'")


def langda_reference(y, ae: LangAutoencoder) -> Tuple[np.ndarray, np.ndarray]:
    """Latent targets (z_e, z_q values) of clean images.

    These depend only on the frozen autoencoder, so callers may compute them
    once per sample and reuse them across training steps.
    """
    z_e = ae.encode(y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float32)))
    z_q = ae.quantize(z_e).z_q
    return z_e.data.copy(), z_q.data.copy()


def langda_loss(y_hat: Tensor, y, ae: LangAutoencoder, *, terms: str = "both",
                reference: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """Mean squared latent error between prediction and clean target.

    The continuous part compares encoder outputs, the discrete part compares
    quantized latents; the quantizer's straight-through convention carries the
    discrete gradient. Reference latents are constants, so the gradient flows
    into ``y_hat`` only, never into the autoencoder or the target.
    """
    if terms not in ("both", "continuous", "discrete"):
        raise ValueError(f"unknown terms selector '{terms}'")
    _require_frozen(ae)
    z_hat = ae.encode(y_hat)
    if reference is None:
        reference = langda_reference(y, ae)
    z_ref, zq_ref = reference
    if tuple(z_ref.shape) != z_hat.shape:
        raise ValueError(f"reference latents {z_ref.shape} do not match {z_hat.shape}")

    parts = []
    if terms in ("both", "continuous"):
        parts.append(T.mean_(T.square(z_hat - Tensor(z_ref))))
    if terms in ("both", "discrete"):
        zq_hat = ae.quantize(z_hat).z_q
        parts.append(T.mean_(T.square(zq_hat - Tensor(zq_ref))))
    return parts[0] + parts[1] if len(parts) == 2 else parts[0]


def denoise_hook(model: SeedDenoiser, window: Tuple[float, float] = TRAIN_WINDOW):
    """Wrap a model as an HU-to-HU callable for the evaluation pipeline."""

    def hook(ldct_hu: np.ndarray) -> np.ndarray:
        x = hu_window(ldct_hu, *window)
        y = model(Tensor(x[None, None]))
        return hu_unwindow(y.data[0, 0], *window)

    return hook


# -- training loop ------------------------------------------------------------------


def _window_pairs(pairs: Sequence[PhantomPair]) -> Tuple[np.ndarray, np.ndarray]:
    xs = np.stack([hu_window(p.ldct, *TRAIN_WINDOW) for p in pairs])[:, None]
    ys = np.stack([hu_window(p.ndct, *TRAIN_WINDOW) for p in pairs])[:, None]
    return xs, ys


def _heldout_metrics(model: SeedDenoiser, pairs: Sequence[PhantomPair]) -> Dict[str, float]:
    """Mean PSNR/SSIM of the model and of the raw input on held-out pairs.

    Scores use the soft-tissue display window, matching the offline
    evaluation pipeline.
    """
    hook = denoise_hook(model)
    rows = {"psnr": [], "ssim": [], "input_psnr": [], "input_ssim": []}
    for k, pair in enumerate(pairs):
        pred = hook(pair.ldct)
        ref = hu_window(pair.ndct, *METRIC_WINDOW)
        out = hu_window(pred, *METRIC_WINDOW)
        noisy = hu_window(pair.ldct, *METRIC_WINDOW)
        rows["psnr"].append(psnr(out, ref))
        rows["ssim"].append(ssim(out, ref))
        rows["input_psnr"].append(psnr(noisy, ref))
        rows["input_ssim"].append(ssim(noisy, ref))
    return {k: float(np.mean(v)) for k, v in rows.items()}


def train_denoiser(
    pairs: Sequence[PhantomPair],
    ae: LangAutoencoder,
    *,
    steps: int,
    batch_size: int = 2,
    seed: int = 0,
    base_lr: float = 1e-4,
    floor_lr: float = 1e-6,
    warmup: int = 0,
    langda_weight: float = LANGDA_WEIGHT,
    ablate: Optional[str] = None,
    holdout_fraction: float = 0.2,
    eval_every: int = 100,
    eval_limit: int = 8,
    state_size: int = 8,
    step_size: int = 2,
    expand: int = 2,
    reduction: int = 8,
    head_gain: float = 1.0,
    checkpoint_path: Optional[str] = None,
    log_every: int = 25,
    cache_features: Optional[bool] = None,
) -> Tuple[SeedDenoiser, Dict[str, List[Dict[str, float]]]]:
    """Train the denoiser on low/normal-dose pairs against the frozen autoencoder.

    The objective is pixel MSE plus ``langda_weight`` times the latent
    alignment loss. A deterministic held-out split is scored every
    ``eval_every`` steps. ``ablate`` selects one arm of the comparison grid:
    'no-ema' swaps the mixing blocks for plain conv blocks, 'resnet-encoder'
    replaces the pretrained encoder with a fresh untrained one, 'no-langda'
    zeroes the alignment weight, 'langda-c'/'langda-d' keep only the
    continuous or discrete alignment term. Aborts on non-finite loss.
    """
    if steps < 1:
        raise ValueError("need at least one training step")
    if len(pairs) < 2:
        raise ValueError("need at least two pairs to hold out an eval split")
    if ablate is not None and ablate not in ABLATION_ARMS:
        raise ValueError(f"unknown ablation arm '{ablate}', pick from {ABLATION_ARMS}")
    _require_frozen(ae)

    terms = "both"
    if ablate == "no-langda":
        langda_weight = 0.0
    elif ablate == "langda-c":
        terms = "continuous"
    elif ablate == "langda-d":
        terms = "discrete"

    xs, ys = _window_pairs(pairs)
    n = len(pairs)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_hold = max(1, int(round(holdout_fraction * n)))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if train_idx.size == 0:
        raise ValueError("holdout fraction leaves no training pairs")
    eval_pairs = [pairs[i] for i in hold_idx[:eval_limit]]

    encoder = ae.encoder
    if ablate == "resnet-encoder":
        # Derived from the seed alone (not the shared stream) so the same
        # surrogate can be rebuilt later from (seed, config) when reloading
        # this arm's checkpoint, independent of the number of pairs.
        surrogate = Encoder(np.random.default_rng(seed + 104729),
                            ae.codebook.dim, encoder.widths)
        encoder = surrogate.freeze()
    model = SeedDenoiser(encoder, rng, state_size=state_size, step=step_size,
                         expand=expand, reduction=reduction,
                         use_ema=ablate != "no-ema", head_gain=head_gain)
    opt = AdamW(model.parameters(), lr=base_lr, betas=(0.9, 0.99), weight_decay=1e-9)
    sched = CosineSchedule(base_lr, floor_lr, steps, warmup=warmup)

    side = xs.shape[2]
    if cache_features is None:
        cache_features = side <= 64 and train_idx.size <= 128
    feat_cache: Dict[int, List[Tensor]] = {}
    ref_cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def features_for(sel: np.ndarray) -> Optional[List[Tensor]]:
        if not cache_features:
            return None
        for i in sel:
            if i not in feat_cache:
                feat_cache[i] = model.features(Tensor(xs[i : i + 1]))
        per_scale = zip(*(feat_cache[i] for i in sel))
        return [f[0] if len(sel) == 1 else T.concat(list(f), 0) for f in per_scale]

    def reference_for(sel: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        for i in sel:
            if i not in ref_cache:
                ref_cache[i] = langda_reference(ys[i : i + 1], ae)
        z = np.concatenate([ref_cache[i][0] for i in sel])
        zq = np.concatenate([ref_cache[i][1] for i in sel])
        return z, zq

    history: Dict[str, List[Dict[str, float]]] = {"train": [], "eval": []}
    for step in range(steps):
        if step % eval_every == 0:
            scores = _heldout_metrics(model, eval_pairs)
            scores["step"] = step
            history["eval"].append(scores)
        sel = train_idx[rng.integers(0, train_idx.size, size=batch_size)]
        x_b = Tensor(xs[sel])
        y_b = Tensor(ys[sel])
        lr = sched.apply(opt, step)
        with Tape() as tape:
            y_hat = model(x_b, features=features_for(sel))
            mse_t = T.mean_(T.square(y_hat - y_b))
            if langda_weight > 0.0:
                align_t = langda_loss(y_hat, y_b, ae, terms=terms,
                                      reference=reference_for(sel))
                loss_t = mse_t + langda_weight * align_t
                align = float(align_t.item())
            else:
                loss_t = mse_t
                align = 0.0
            loss = float(loss_t.item())
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite denoiser loss at step {step}")
            tape.backward(loss_t)
        opt.step()
        opt.zero_grad()

        if step % log_every == 0 or step == steps - 1:
            history["train"].append({
                "step": step,
                "lr": lr,
                "loss": loss,
                "mse": float(mse_t.item()),
                "langda": align,
            })

    scores = _heldout_metrics(model, eval_pairs)
    scores["step"] = steps
    history["eval"].append(scores)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.state_dict())
    return model, history
