"""Binary interchange formats and PNG export.

Four little-endian container formats, each introduced by a four-byte magic:

* ``LMTN`` -- a single tensor (rank, extents, float32 payload); implemented
  in :mod:`langct.tensor` and re-used here for checkpoint entries.
* ``LMCB`` -- a codebook: vocabulary strings plus the embedding matrix.
* ``LMCK`` -- a model checkpoint: a version tag and a named-tensor table.
* ``LMPD`` -- one training pair: clean/noisy image payloads with the dose
  fraction and the seed that generated them.

PNG export renders a HU image through the abdominal display window so the
phantoms can be eyeballed outside the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Dict, Mapping

import numpy as np

from .quantize import Codebook
from .tensor import _read_tensor_payload, _write_tensor_payload

__all__ = [
    "save_codebook",
    "load_codebook",
    "save_checkpoint",
    "load_checkpoint",
    "PhantomPair",
    "save_pair",
    "load_pair",
    "write_png",
]

CHECKPOINT_VERSION = 1

_MAGIC_CODEBOOK = b"LMCB"
_MAGIC_CHECKPOINT = b"LMCK"
_MAGIC_PAIR = b"LMPD"


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated stream")
    return buf


def _write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    if n > 1 << 20:
        raise ValueError("implausible string length")
    return _read_exact(fh, n).decode("utf-8")


# -- codebook ----------------------------------------------------------------------


def save_codebook(path: str, cb: Codebook) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC_CODEBOOK)
        fh.write(struct.pack("<II", len(cb), cb.dim))
        for word in cb.vocab:
            _write_str(fh, word)
        fh.write(np.ascontiguousarray(cb.embeddings, dtype="<f4").tobytes())


def load_codebook(path: str) -> Codebook:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC_CODEBOOK:
            raise ValueError("bad codebook magic")
        size, dim = struct.unpack("<II", _read_exact(fh, 8))
        vocab = tuple(_read_str(fh) for _ in range(size))
        payload = _read_exact(fh, size * dim * 4)
        emb = np.frombuffer(payload, dtype="<f4").reshape(size, dim)
        if fh.read(1):
            raise ValueError("trailing bytes in codebook file")
    return Codebook(vocab=vocab, embeddings=emb.copy())


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path: str, state: Mapping[str, np.ndarray]) -> None:
    """Write a named-tensor table; `state` is typically `model.state_dict()`."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC_CHECKPOINT)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(state)))
        for name in sorted(state):
            _write_str(fh, name)
            _write_tensor_payload(fh, np.asarray(state[name]))


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC_CHECKPOINT:
            raise ValueError("bad checkpoint magic")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        state: Dict[str, np.ndarray] = {}
        for _ in range(count):
            name = _read_str(fh)
            state[name] = _read_tensor_payload(fh)
        if fh.read(1):
            raise ValueError("trailing bytes in checkpoint file")
    return state


# -- phantom pairs -----------------------------------------------------------------


@dataclass(frozen=True)
class PhantomPair:
    """One clean/low-dose image pair with its provenance.

    ``anatomy`` describes the generating ellipses when the pair was built
    in-process; it is not part of the on-disk format.
    """

    ndct: np.ndarray
    ldct: np.ndarray
    dose: float
    seed: int
    anatomy: tuple = ()

    def __post_init__(self) -> None:
        if self.ndct.shape != self.ldct.shape or self.ndct.ndim != 2:
            raise ValueError("pair images must be 2-D with matching extents")


def save_pair(path: str, pair: PhantomPair) -> None:
    h, w = pair.ndct.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC_PAIR)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(pair.ndct, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(pair.ldct, dtype="<f4").tobytes())
        fh.write(struct.pack("<d", pair.dose))
        fh.write(struct.pack("<Q", pair.seed))


def load_pair(path: str) -> PhantomPair:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC_PAIR:
            raise ValueError("bad pair magic")
        h, w = struct.unpack("<II", _read_exact(fh, 8))
        if h * w > 1 << 26:
            raise ValueError("implausible pair extents")
        ndct = np.frombuffer(_read_exact(fh, h * w * 4), dtype="<f4").reshape(h, w)
        ldct = np.frombuffer(_read_exact(fh, h * w * 4), dtype="<f4").reshape(h, w)
        (dose,) = struct.unpack("<d", _read_exact(fh, 8))
        (seed,) = struct.unpack("<Q", _read_exact(fh, 8))
        if fh.read(1):
            raise ValueError("trailing bytes in pair file")
    return PhantomPair(ndct=ndct.copy(), ldct=ldct.copy(), dose=dose, seed=seed)


# -- PNG export --------------------------------------------------------------------


def write_png(path: str, hu_image: np.ndarray, lo: float = -160.0, hi: float = 240.0) -> None:
    """Render a HU image to an 8-bit grayscale PNG through a display window."""
    from PIL import Image

    if hu_image.ndim != 2:
        raise ValueError("PNG export expects a 2-D HU image")
    scaled = (np.clip(hu_image, lo, hi) - lo) / (hi - lo)
    Image.fromarray((scaled * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)
