"""Shared test oracles: finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from langct.tensor import Tape, Tensor


def fd_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 2.0**-7,
    max_elems: int = 64,
    seed: int = 0,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Central-difference gradients of a scalar-valued closure.

    Returns one (indices, analytic, fd) triple per parameter. Elements are
    subsampled deterministically when a parameter has more than
    ``max_elems`` entries. ``fn`` must be deterministic and close over
    ``params``.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    rng = np.random.default_rng(seed)
    out = []
    for p in params:
        assert p.grad is not None, "parameter did not receive a gradient"
        flat_grad = p.grad.reshape(-1)
        n = p.data.size
        if n > max_elems:
            idx = np.sort(rng.choice(n, size=max_elems, replace=False))
        else:
            idx = np.arange(n)
        flat = p.data.reshape(-1)
        fd = np.empty(len(idx), dtype=np.float64)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn().data.reshape(-1)[0])
            flat[i] = orig - eps
            lo = float(fn().data.reshape(-1)[0])
            flat[i] = orig
            fd[k] = (hi - lo) / (2.0 * eps)
        out.append((idx, flat_grad[idx], fd))
    return out


def max_rel_err(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 2.0**-7,
    max_elems: int = 64,
    seed: int = 0,
) -> float:
    """max |analytic - fd| / max(1, |fd|) over all checked elements."""
    worst = 0.0
    for _, ana, fd in fd_gradients(fn, params, eps=eps, max_elems=max_elems, seed=seed):
        denom = np.maximum(1.0, np.abs(fd))
        worst = max(worst, float(np.max(np.abs(ana - fd) / denom)))
    return worst


def assert_grads_match(fn, params, tol: float = 1e-3, **kw) -> None:
    err = max_rel_err(fn, params, **kw)
    assert err < tol, f"finite-difference mismatch: max rel err {err:.3e} >= {tol}"
