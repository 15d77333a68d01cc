"""Frozen-codebook vector quantization with a 3-layer dilated token pyramid.

A latent grid is quantized coarse-to-fine: each layer owns a dilation-sampled
subset of positions, assigns every owned position its nearest codebook token
(optionally restricted to a per-layer candidate pool), and passes the
quantization residual down so later layers see what earlier ones missed. The
aggregate z_q is the position-wise mean of all embeddings assigned there, and
reaches the decoder through a straight-through estimator.

The codebook itself never trains: embeddings are drawn once from a seeded
Gaussian, row-normalized, and frozen.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

import langct.tensor as T
from langct.tensor import Tensor, custom_op

__all__ = [
    "Codebook",
    "PyramidLayout",
    "TokenPyramid",
    "RandomProjectionScorer",
    "load_word_list",
    "nearest_token",
    "nearest_tokens",
    "pool_from_scores",
    "build_candidate_pool",
    "candidate_pools",
    "pyramid_quantize",
    "semantic_loss",
    "commitment_loss",
]

POOL_FALLBACK_K = 16


def load_word_list() -> list[str]:
    """The bundled token vocabulary (anatomy/imaging terms plus composites)."""
    text = resources.files("langct.data").joinpath("words.txt").read_text("utf-8")
    return [w for w in text.split("\n") if w]


@dataclass(frozen=True)
class Codebook:
    """Immutable token vocabulary with a frozen embedding table."""

    vocab: tuple[str, ...]
    embeddings: np.ndarray  # (V, D) float32, rows L2-normalized at default init

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[0] != len(self.vocab):
            raise ValueError(
                f"embeddings {emb.shape} do not match vocab of {len(self.vocab)}"
            )
        if len(self.vocab) < 1:
            raise ValueError("codebook must hold at least one token")
        if not np.all(np.isfinite(emb)):
            raise ValueError("codebook embeddings must be finite")
        emb.setflags(write=False)
        object.__setattr__(self, "vocab", tuple(self.vocab))
        object.__setattr__(self, "embeddings", emb)

    @classmethod
    def default(cls, vocab_size: int = 4096, dim: int = 32, seed: int = 7,
                words: list[str] | None = None) -> "Codebook":
        words = words if words is not None else load_word_list()
        if len(words) < vocab_size:
            raise ValueError(f"word list has {len(words)} entries, need {vocab_size}")
        rng = np.random.default_rng(seed)
        emb = rng.normal(0.0, 1.0, (vocab_size, dim))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        return cls(vocab=tuple(words[:vocab_size]), embeddings=emb.astype(np.float32))

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def digest(self) -> str:
        """Byte-level fingerprint, used to prove the table never moves."""
        h = hashlib.sha256()
        h.update(self.embeddings.tobytes())
        h.update("\x00".join(self.vocab).encode("utf-8"))
        return h.hexdigest()


@dataclass(frozen=True)
class PyramidLayout:
    """Per-layer position sets and pool thresholds on a square latent grid.

    Positions are dilation-sampled: a layer with n points per side places
    them at stride*k + stride//2 (stride = grid//n), so coarse layers sit at
    cell centers and the last layer covers every position.
    """

    grid: int
    sides: tuple[int, ...]
    thresholds: tuple[float, ...]
    positions: tuple[np.ndarray, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.sides) != len(self.thresholds):
            raise ValueError("one threshold per layer required")
        if any(not (-1.0 <= t <= 1.0) for t in self.thresholds):
            raise ValueError(f"thresholds must lie in [-1, 1], got {self.thresholds}")
        pos = []
        for n in self.sides:
            if n < 1 or n > self.grid:
                raise ValueError(f"layer side {n} invalid for grid {self.grid}")
            stride = self.grid // n
            line = stride // 2 + stride * np.arange(n)
            flat = (line[:, None] * self.grid + line[None, :]).ravel()
            flat.setflags(write=False)
            pos.append(flat)
        object.__setattr__(self, "positions", tuple(pos))

    @classmethod
    def default(cls, grid: int = 32,
                thresholds: tuple[float, ...] = (0.95, 0.9, 0.8)) -> "PyramidLayout":
        """3 layers; on the 32-grid: 2x2 centers, every 4th cell, full grid."""
        sides = (2, max(2, grid // 4), grid)
        return cls(grid=grid, sides=sides, thresholds=thresholds)

    @property
    def depth(self) -> int:
        return len(self.sides)

    def tokens_per_layer(self) -> tuple[int, ...]:
        return tuple(n * n for n in self.sides)


@dataclass
class TokenPyramid:
    """Result of quantizing one latent batch.

    tokens[l] holds codebook ids at layer l's positions; z_layers[l] the
    residual-accumulated latents the assignment saw (gradients flow into
    these); layer_embeddings[l] the chosen embeddings (constants); z_q the
    straight-through aggregate with position-wise-mean values.
    """

    tokens: list[np.ndarray]
    z_layers: list[Tensor]
    layer_embeddings: list[Tensor]
    z_q: Tensor
    layout: PyramidLayout


# -- nearest-token search --------------------------------------------------------


def nearest_tokens(z: np.ndarray, cb: Codebook,
                   restrict: np.ndarray | None = None) -> np.ndarray:
    """Nearest codebook ids for a (M, D) batch; ties break to the lowest id.

    ``restrict`` limits the search to a sorted id subset (the candidate pool).
    """
    z = np.asarray(z, dtype=np.float64)
    emb = cb.embeddings.astype(np.float64)
    if restrict is not None:
        restrict = np.asarray(restrict, dtype=np.int64)
        if restrict.size == 0:
            raise ValueError("empty restriction set")
        restrict = np.unique(restrict)  # sorted: keeps lowest-id tie-break
        emb = emb[restrict]
    # ||z - e||^2 = ||e||^2 - 2 z.e + const(z)
    scores = z @ emb.T
    d2 = (emb * emb).sum(axis=1)[None, :] - 2.0 * scores
    idx = np.argmin(d2, axis=1)
    return restrict[idx] if restrict is not None else idx


def nearest_token(z: np.ndarray, cb: Codebook,
                  restrict: np.ndarray | None = None) -> int:
    """Single-vector form of :func:`nearest_tokens`."""
    return int(nearest_tokens(np.asarray(z)[None, :], cb, restrict)[0])


# -- candidate pools ----------------------------------------------------------------


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resample of a 2-D array."""
    h, w = img.shape
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


class RandomProjectionScorer:
    """Frozen stand-in for a vision-language relevance model.

    Projects a downsampled image through a fixed seeded matrix into the
    embedding space and scores each token by cosine similarity, so scores
    are deterministic, finite, and inside [-1, 1].
    """

    def __init__(self, cb: Codebook, seed: int = 11, patch: int = 16):
        self.patch = int(patch)
        rng = np.random.default_rng(seed)
        self._proj = rng.normal(0.0, 1.0, (self.patch * self.patch, cb.dim))
        norms = np.linalg.norm(cb.embeddings.astype(np.float64), axis=1)
        self._emb_unit = cb.embeddings.astype(np.float64) / norms[:, None]
        self._pool_cache: dict[str, list[np.ndarray]] = {}

    def score(self, image: np.ndarray) -> np.ndarray:
        """(V,) relevance scores for one 2-D image."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 2:
            raise ValueError(f"scorer expects a 2-D image, got {img.shape}")
        small = _resize_bilinear(img, self.patch, self.patch).ravel()
        feat = small @ self._proj
        norm = np.linalg.norm(feat)
        if norm == 0.0:
            return np.zeros(self._emb_unit.shape[0])
        return self._emb_unit @ (feat / norm)

    def pools(self, image: np.ndarray, layout: PyramidLayout) -> list[np.ndarray]:
        """Per-layer candidate pools, cached by image content hash."""
        img = np.asarray(image, dtype=np.float32)
        key = hashlib.sha1(img.tobytes()).hexdigest() + f":{img.shape}:{layout.thresholds}"
        hit = self._pool_cache.get(key)
        if hit is not None:
            return hit
        scores = self.score(img)
        out = [pool_from_scores(scores, rho) for rho in layout.thresholds]
        self._pool_cache[key] = out
        return out


def pool_from_scores(scores: np.ndarray, threshold: float,
                     fallback_k: int = POOL_FALLBACK_K) -> np.ndarray:
    """Token ids scoring >= threshold; top-``fallback_k`` ids when none do.

    Returned sorted ascending (nearest-token tie-breaks stay id-ordered).
    """
    if not -1.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [-1, 1], got {threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.nonzero(scores >= threshold)[0]
    if ids.size == 0:
        k = min(fallback_k, scores.shape[0])
        # highest scores; ties inside the cut resolve to lower ids
        order = np.lexsort((np.arange(scores.shape[0]), -scores))
        ids = np.sort(order[:k])
    return ids.astype(np.int64)


def build_candidate_pool(image: np.ndarray, threshold: float,
                         scorer: RandomProjectionScorer,
                         fallback_k: int = POOL_FALLBACK_K) -> np.ndarray:
    """One layer's candidate pool for an image (uncached single-layer form)."""
    return pool_from_scores(scorer.score(image), threshold, fallback_k)


def candidate_pools(image: np.ndarray, layout: PyramidLayout,
                    scorer: RandomProjectionScorer) -> list[np.ndarray]:
    """Pools for every layer of ``layout`` (cached inside the scorer)."""
    return scorer.pools(image, layout)


# -- pyramid quantization ---------------------------------------------------------


def pyramid_quantize(z_e: Tensor, layout: PyramidLayout, cb: Codebook,
                     pools: list[np.ndarray] | None = None) -> TokenPyramid:
    """Quantize latents (B, C, G, G) or (C, G, G) through the token pyramid.

    Layer l sees z_l = z + sum_{i<l, pos in P(i)} (z - e(t_i)) at its own
    positions, assigns nearest tokens (within the layer's pool when given),
    and the final z_q averages every embedding assigned per position. z_q
    carries straight-through gradients: identity Jacobian onto z_e.
    """
    squeeze = z_e.ndim == 3
    if squeeze:
        z_e = z_e.reshape(1, *z_e.shape)
    if z_e.ndim != 4 or z_e.shape[2] != layout.grid or z_e.shape[3] != layout.grid:
        raise ValueError(
            f"latents {z_e.shape} do not match a {layout.grid}x{layout.grid} layout"
        )
    if pools is not None and len(pools) != layout.depth:
        raise ValueError(f"need {layout.depth} pools, got {len(pools)}")
    batch, dim, grid = z_e.shape[0], z_e.shape[1], layout.grid
    n_pos = grid * grid
    emb = cb.embeddings.astype(np.float64)

    # (B, L, C) view for position-indexed math
    z_flat = T.transpose(T.reshape(z_e, (batch, dim, n_pos)), (0, 2, 1))
    z_vals = z_flat.data.astype(np.float64)

    prior_sum = np.zeros((batch, n_pos, dim))  # sum of e(t_i) at quantized positions
    prior_cnt = np.zeros((batch, n_pos, 1))
    agg_sum = np.zeros((batch, n_pos, dim))  # for the final mean
    agg_cnt = np.zeros((batch, n_pos, 1))

    tokens: list[np.ndarray] = []
    z_layers: list[Tensor] = []
    layer_embeddings: list[Tensor] = []
    for l, pos in enumerate(layout.positions):
        # residual accumulation, on values for assignment and on the tape for losses
        mult = 1.0 + prior_cnt[:, pos]  # (B, P, 1)
        zl_vals = mult * z_vals[:, pos] - prior_sum[:, pos]
        z_sel = T.take(z_flat, pos, axis=1)
        z_l = z_sel * Tensor(mult.astype(np.float32)) - Tensor(prior_sum[:, pos])
        restrict = pools[l] if pools is not None else None
        ids = nearest_tokens(zl_vals.reshape(-1, dim), cb, restrict)
        ids = ids.reshape(batch, len(pos))
        chosen = emb[ids]  # (B, P, D)
        prior_sum[:, pos] += chosen
        prior_cnt[:, pos] += 1.0
        agg_sum[:, pos] += chosen
        agg_cnt[:, pos] += 1.0
        tokens.append(ids)
        z_layers.append(z_l)
        layer_embeddings.append(Tensor(chosen))

    if (agg_cnt == 0).any():
        raise ValueError("layout leaves positions unquantized; last layer must cover the grid")
    zq_vals = (agg_sum / agg_cnt).astype(np.float32)
    zq_grid = np.ascontiguousarray(zq_vals.transpose(0, 2, 1).reshape(batch, dim, grid, grid))
    # straight-through: values of z_q, Jacobian of identity onto z_e
    z_q = custom_op("straight_through", (z_e,), zq_grid, lambda g: (g,))

    if squeeze:
        tokens = [t[0] for t in tokens]
        z_layers = [z[0] for z in z_layers]
        layer_embeddings = [e[0] for e in layer_embeddings]
        z_q = z_q[0]
    return TokenPyramid(tokens=tokens, z_layers=z_layers,
                        layer_embeddings=layer_embeddings, z_q=z_q, layout=layout)


# -- losses ----------------------------------------------------------------------


def semantic_loss(z_layers: list[Tensor], pools: list[np.ndarray], cb: Codebook) -> Tensor:
    """Cross-entropy pulling each layer latent toward its candidate tokens.

    Logits are negative squared distances to every codebook row; the loss is
    the mean over layers, positions, and pool members of -log softmax at the
    member. Uniform layer weighting.
    """
    if len(z_layers) != len(pools):
        raise ValueError(f"{len(z_layers)} layers vs {len(pools)} pools")
    emb_t = Tensor(cb.embeddings.T)  # (D, V) constant
    enorm2 = Tensor((cb.embeddings.astype(np.float64) ** 2).sum(axis=1).astype(np.float32))
    total = None
    for z_l, pool in zip(z_layers, pools):
        pool = np.asarray(pool, dtype=np.int64)
        if pool.size == 0:
            raise ValueError("empty candidate pool")
        flat = T.reshape(z_l, (-1, z_l.shape[-1])) if z_l.ndim != 2 else z_l
        d2 = T.sum_(T.square(flat), axis=-1, keepdims=True) \
            - 2.0 * T.matmul(flat, emb_t) + enorm2
        logits = T.neg(d2)
        lse = T.logsumexp(logits, axis=-1)
        pool_logits = T.take(logits, pool, axis=-1)
        layer_loss = T.mean_(lse) - T.mean_(pool_logits)
        total = layer_loss if total is None else total + layer_loss
    return total / float(len(z_layers))


def commitment_loss(z_layers: list[Tensor], z_q_layers: list[Tensor]) -> Tensor:
    """Sum over layers of squared distance to the (stop-gradient) assignments."""
    if len(z_layers) != len(z_q_layers):
        raise ValueError(f"{len(z_layers)} layers vs {len(z_q_layers)} targets")
    total = None
    for z_l, q_l in zip(z_layers, z_q_layers):
        if z_l.shape != q_l.shape:
            raise ValueError(f"shape mismatch: {z_l.shape} vs {q_l.shape}")
        term = T.sum_(T.square(z_l - T.detach(q_l)))
        total = term if total is None else total + term
    return total
