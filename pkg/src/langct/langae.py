"""Language-guided autoencoder: convolutional encoder/decoder around the
frozen-codebook token pyramid.

The encoder downsamples a [0,1] image by 8x into a latent grid whose side
matches the pyramid layout; the decoder mirrors it back. Training couples the
usual reconstruction/commitment/perceptual objective with the pyramid's
semantic term, balanced step-by-step by a gradient-free ratio weight so the
two objectives stay on a common scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import langct.tensor as T
from langct.io import save_checkpoint
from langct.nn import Conv2d, LayerNorm, Linear, Module
from langct.optim import AdamW, CosineSchedule
from langct.quantize import (
    Codebook,
    PyramidLayout,
    RandomProjectionScorer,
    TokenPyramid,
    candidate_pools,
    commitment_loss,
    pyramid_quantize,
    semantic_loss,
)
from langct.tensor import Tape, Tensor

__all__ = [
    "SEMANTIC_WEIGHT",
    "COMMIT_WEIGHT",
    "ADVERSARIAL_WEIGHT",
    "PERCEPTUAL_WEIGHT",
    "DOWNSAMPLE",
    "ResidualBlock",
    "AttentionBlock",
    "Encoder",
    "Decoder",
    "PerceptualFeatures",
    "LangAutoencoder",
    "LossReport",
    "langae_total_loss",
    "train_langae",
]

# Loss weights: semantic, commitment, adversarial (stubbed), perceptual.
SEMANTIC_WEIGHT = 0.3
COMMIT_WEIGHT = 0.3
ADVERSARIAL_WEIGHT = 0.1
PERCEPTUAL_WEIGHT = 0.1

DOWNSAMPLE = 8
WIDTHS = (32, 48, 64, 64)


class ResidualBlock(Module):
    """norm-act-conv twice with an additive (possibly projected) skip."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int):
        self.norm1 = LayerNorm(cin, data_format="channels_first")
        self.conv1 = Conv2d(rng, cin, cout, 3, padding=1)
        self.norm2 = LayerNorm(cout, data_format="channels_first")
        self.conv2 = Conv2d(rng, cout, cout, 3, padding=1)
        self.skip = Conv2d(rng, cin, cout, 1) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        h = self.conv2(T.silu(self.norm2(h)))
        base = x if self.skip is None else self.skip(x)
        return base + h


class AttentionBlock(Module):
    """Single-head self-attention over spatial positions, residual form."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.norm = LayerNorm(channels, data_format="channels_first")
        self.to_q = Linear(rng, channels, channels)
        self.to_k = Linear(rng, channels, channels)
        self.to_v = Linear(rng, channels, channels)
        self.proj = Linear(rng, channels, channels)
        self.scale = 1.0 / math.sqrt(channels)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        seq = T.transpose(T.reshape(self.norm(x), (b, c, h * w)), (0, 2, 1))
        q, k, v = self.to_q(seq), self.to_k(seq), self.to_v(seq)
        att = T.softmax(T.matmul(q, T.transpose(k, (0, 2, 1))) * self.scale, axis=-1)
        out = self.proj(T.matmul(att, v))
        return x + T.reshape(T.transpose(out, (0, 2, 1)), (b, c, h, w))


class Encoder(Module):
    """Strided-conv pyramid: three 2x reductions, attention at the bottleneck.

    ``features`` exposes the five per-scale maps (full, 1/2, 1/4, 1/8, 1/8)
    that the denoiser taps; ``forward`` projects the last one to the latent
    channel count.
    """

    def __init__(self, rng: np.random.Generator, latent_dim: int,
                 widths: Tuple[int, int, int, int] = WIDTHS):
        w0, w1, w2, w3 = widths
        self.stem = Conv2d(rng, 1, w0, 3, padding=1)
        self.res1 = ResidualBlock(rng, w0, w0)
        self.down1 = Conv2d(rng, w0, w1, 3, stride=2, padding=1)
        self.res2 = ResidualBlock(rng, w1, w1)
        self.down2 = Conv2d(rng, w1, w2, 3, stride=2, padding=1)
        self.res3 = ResidualBlock(rng, w2, w2)
        self.down3 = Conv2d(rng, w2, w3, 3, stride=2, padding=1)
        self.mid1 = ResidualBlock(rng, w3, w3)
        self.attn1 = AttentionBlock(rng, w3)
        self.mid2 = ResidualBlock(rng, w3, w3)
        self.attn2 = AttentionBlock(rng, w3)
        self.mid3 = ResidualBlock(rng, w3, w3)
        self.out_norm = LayerNorm(w3, data_format="channels_first")
        self.out = Conv2d(rng, w3, latent_dim, 3, padding=1)
        self.widths = widths

    def features(self, x: Tensor) -> List[Tensor]:
        f0 = self.stem(x)
        f1 = self.down1(self.res1(f0))
        f2 = self.down2(self.res2(f1))
        f3 = self.down3(self.res3(f2))
        f4 = self.mid3(self.attn2(self.mid2(self.attn1(self.mid1(f3)))))
        return [f0, f1, f2, f3, f4]

    def forward(self, x: Tensor) -> Tensor:
        return self.out(T.silu(self.out_norm(self.features(x)[-1])))


class Decoder(Module):
    """Mirror of the encoder: attention bottleneck, three 2x upsamplings."""

    def __init__(self, rng: np.random.Generator, latent_dim: int,
                 widths: Tuple[int, int, int, int] = WIDTHS):
        w0, w1, w2, w3 = widths
        self.stem = Conv2d(rng, latent_dim, w3, 3, padding=1)
        self.mid1 = ResidualBlock(rng, w3, w3)
        self.attn1 = AttentionBlock(rng, w3)
        self.mid2 = ResidualBlock(rng, w3, w3)
        self.attn2 = AttentionBlock(rng, w3)
        self.mid3 = ResidualBlock(rng, w3, w3)
        self.up3 = Conv2d(rng, w3, w2, 3, padding=1)
        self.res3 = ResidualBlock(rng, w2, w2)
        self.up2 = Conv2d(rng, w2, w1, 3, padding=1)
        self.res2 = ResidualBlock(rng, w1, w1)
        self.up1 = Conv2d(rng, w1, w0, 3, padding=1)
        self.res1 = ResidualBlock(rng, w0, w0)
        self.head_norm = LayerNorm(w0, data_format="channels_first")
        self.head = Conv2d(rng, w0, 1, 3, padding=1)

    def forward(self, z: Tensor) -> Tensor:
        h = self.mid3(self.attn2(self.mid2(self.attn1(self.mid1(self.stem(z))))))
        h = self.res3(self.up3(T.upsample2x(h)))
        h = self.res2(self.up2(T.upsample2x(h)))
        h = self.res1(self.up1(T.upsample2x(h)))
        return T.clamp(self.head(T.silu(self.head_norm(h))), 0.0, 1.0)


class PerceptualFeatures(Module):
    """Frozen seeded conv pyramid standing in for a pretrained feature net.

    Three strided stages; the loss compares activations at all three depths.
    """

    def __init__(self, seed: int = 23):
        rng = np.random.default_rng(seed)
        self.c1 = Conv2d(rng, 1, 8, 3, stride=2, padding=1)
        self.c2 = Conv2d(rng, 8, 16, 3, stride=2, padding=1)
        self.c3 = Conv2d(rng, 16, 32, 3, stride=2, padding=1)
        self.freeze()

    def features(self, x: Tensor) -> List[Tensor]:
        f1 = self.c1(x)
        f2 = self.c2(T.silu(f1))
        f3 = self.c3(T.silu(f2))
        return [f1, f2, f3]

    def loss(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ValueError(f"perceptual loss needs matching shapes, got {a.shape} vs {b.shape}")
        fa, fb = self.features(a), self.features(b)
        terms = [T.mean_(T.square(x - y)) for x, y in zip(fa, fb)]
        return (terms[0] + terms[1] + terms[2]) * (1.0 / 3.0)


class LangAutoencoder(Module):
    """Encoder + pyramid quantizer + decoder over a frozen codebook."""

    def __init__(self, layout: PyramidLayout, codebook: Codebook,
                 rng: np.random.Generator,
                 widths: Tuple[int, int, int, int] = WIDTHS):
        self.encoder = Encoder(rng, codebook.dim, widths)
        self.decoder = Decoder(rng, codebook.dim, widths)
        self.perceptual = PerceptualFeatures()
        self._layout = layout
        self._codebook = codebook

    @property
    def layout(self) -> PyramidLayout:
        return self._layout

    @property
    def codebook(self) -> Codebook:
        return self._codebook

    @property
    def image_side(self) -> int:
        return self._layout.grid * DOWNSAMPLE

    def _check_image(self, x: Tensor) -> Tensor:
        side = self.image_side
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (side, side):
            raise ValueError(
                f"expected images of shape (B, 1, {side}, {side}), got {x.shape}"
            )
        return x

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(self._check_image(x))

    def encode_features(self, x: Tensor) -> List[Tensor]:
        return self.encoder.features(self._check_image(x))

    def decode(self, z_q: Tensor) -> Tensor:
        g = self._layout.grid
        if z_q.ndim != 4 or z_q.shape[1:] != (self._codebook.dim, g, g):
            raise ValueError(
                f"expected latents of shape (B, {self._codebook.dim}, {g}, {g}), got {z_q.shape}"
            )
        return self.decoder(z_q)

    def quantize(self, z_e: Tensor, pools=None) -> TokenPyramid:
        return pyramid_quantize(z_e, self._layout, self._codebook, pools=pools)

    def forward(self, x: Tensor, pools_per_image: Optional[Sequence] = None):
        """Returns (reconstruction, z_e, per-image pyramids).

        ``pools_per_image`` restricts each sample's token search to its own
        candidate pools; quantization runs per sample so pools can differ.
        """
        x = self._check_image(x)
        z_e = self.encoder(x)
        b = x.shape[0]
        if pools_per_image is not None and len(pools_per_image) != b:
            raise ValueError(f"need one pool set per image, got {len(pools_per_image)} for batch {b}")
        pyramids = []
        parts = []
        for i in range(b):
            pools = None if pools_per_image is None else pools_per_image[i]
            pyr = self.quantize(z_e[i : i + 1], pools=pools)
            pyramids.append(pyr)
            parts.append(pyr.z_q)
        z_q = parts[0] if b == 1 else T.concat(parts, axis=0)
        return self.decoder(z_q), z_e, pyramids


@dataclass(frozen=True)
class LossReport:
    """Per-step scalar summary; ``total_tensor`` is the differentiable value."""

    reconstruction: float
    commitment: float
    perceptual: float
    adversarial: float
    semantic: float
    omega: float
    total: float
    total_tensor: Tensor = field(repr=False, compare=False)


def langae_total_loss(
    y: Tensor,
    y_rec: Tensor,
    pyramids: Sequence[TokenPyramid],
    pools_per_image: Optional[Sequence],
    codebook: Codebook,
    perceptual: PerceptualFeatures,
    semantic_weight: float = SEMANTIC_WEIGHT,
    commit_weight: float = COMMIT_WEIGHT,
    adversarial_weight: float = ADVERSARIAL_WEIGHT,
    perceptual_weight: float = PERCEPTUAL_WEIGHT,
) -> LossReport:
    """Compose the full autoencoder objective.

    The base term is squared reconstruction error plus weighted commitment,
    adversarial (disabled, contributes exactly zero) and perceptual parts,
    averaged per sample. The semantic term is folded in through a ratio
    weight computed from detached scalars, so it rescales the objective
    without opening a gradient path of its own.
    """
    if y.shape != y_rec.shape:
        raise ValueError(f"image/reconstruction shapes differ: {y.shape} vs {y_rec.shape}")
    b = y.shape[0]
    if len(pyramids) != b:
        raise ValueError(f"need one pyramid per image, got {len(pyramids)} for batch {b}")
    inv_b = 1.0 / b

    rec_t = T.sum_(T.square(y_rec - y)) * inv_b

    com_t = None
    sem_t = None
    full_vocab = np.arange(len(codebook))
    for i, pyr in enumerate(pyramids):
        pools = (
            [full_vocab] * pyr.layout.depth
            if pools_per_image is None
            else pools_per_image[i]
        )
        c = commitment_loss(pyr.z_layers, pyr.layer_embeddings)
        s = semantic_loss(pyr.z_layers, pools, codebook)
        com_t = c if com_t is None else com_t + c
        sem_t = s if sem_t is None else sem_t + s
    com_t = com_t * inv_b
    sem_t = sem_t * inv_b
    per_t = perceptual.loss(y_rec, y)

    base_t = rec_t + commit_weight * com_t + perceptual_weight * per_t  # adversarial part stubbed at 0

    rec, com, per, sem = (float(t.item()) for t in (rec_t, com_t, per_t, sem_t))
    base = rec + commit_weight * com + adversarial_weight * 0.0 + perceptual_weight * per
    omega = base / sem if base > 0.0 and sem >= 1e-8 else 0.0
    total_t = base_t + (semantic_weight * omega) * sem_t
    total = base + semantic_weight * omega * sem
    return LossReport(
        reconstruction=rec,
        commitment=com,
        perceptual=per,
        adversarial=0.0,
        semantic=sem,
        omega=omega,
        total=total,
        total_tensor=total_t,
    )


def train_langae(
    images: np.ndarray,
    *,
    steps: int,
    batch_size: int = 2,
    seed: int = 0,
    base_lr: float = 1e-4,
    floor_lr: float = 1e-6,
    codebook: Optional[Codebook] = None,
    layout: Optional[PyramidLayout] = None,
    widths: Tuple[int, int, int, int] = WIDTHS,
    checkpoint_path: Optional[str] = None,
    log_every: int = 25,
    semantic_weight: float = SEMANTIC_WEIGHT,
    commit_weight: float = COMMIT_WEIGHT,
    adversarial_weight: float = ADVERSARIAL_WEIGHT,
    perceptual_weight: float = PERCEPTUAL_WEIGHT,
) -> Tuple[LangAutoencoder, List[Dict[str, float]]]:
    """Pretrain the autoencoder on clean images in [0, 1]; freeze on completion.

    Returns the frozen model and a history of logged scalar rows. Aborts with
    the failing step index if the loss ever goes non-finite.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ValueError(f"training images must be (N, side, side), got {images.shape}")
    if steps < 1:
        raise ValueError("need at least one training step")
    side = images.shape[1]
    if side % DOWNSAMPLE:
        raise ValueError(f"image side {side} not divisible by {DOWNSAMPLE}")
    cb = codebook if codebook is not None else Codebook.default()
    if layout is None:
        layout = PyramidLayout.default(grid=side // DOWNSAMPLE)
    if layout.grid * DOWNSAMPLE != side:
        raise ValueError(
            f"layout grid {layout.grid} implies {layout.grid * DOWNSAMPLE} px images, got {side}"
        )

    rng = np.random.default_rng(seed)
    model = LangAutoencoder(layout, cb, rng, widths)
    scorer = RandomProjectionScorer(cb)
    opt = AdamW(model.parameters(), lr=base_lr, betas=(0.9, 0.99), weight_decay=1e-9)
    sched = CosineSchedule(base_lr, floor_lr, steps)

    history: List[Dict[str, float]] = []
    for step in range(steps):
        idx = rng.integers(0, images.shape[0], size=batch_size)
        batch = Tensor(images[idx][:, None])
        pools = [candidate_pools(images[i], layout, scorer) for i in idx]
        lr = sched.apply(opt, step)
        with Tape() as tape:
            recon, _, pyramids = model(batch, pools)
            report = langae_total_loss(
                batch, recon, pyramids, pools, cb, model.perceptual,
                semantic_weight=semantic_weight, commit_weight=commit_weight,
                adversarial_weight=adversarial_weight,
                perceptual_weight=perceptual_weight,
            )
            if not math.isfinite(report.total):
                raise FloatingPointError(f"non-finite autoencoder loss at step {step}")
            tape.backward(report.total_tensor)
        opt.step()
        opt.zero_grad()
        if step % log_every == 0 or step == steps - 1:
            history.append(
                {
                    "step": step,
                    "lr": lr,
                    "total": report.total,
                    "reconstruction": report.reconstruction,
                    "commitment": report.commitment,
                    "perceptual": report.perceptual,
                    "semantic": report.semantic,
                    "omega": report.omega,
                }
            )

    model.freeze()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.state_dict())
    return model, history
