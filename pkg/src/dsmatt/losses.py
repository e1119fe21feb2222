from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import Tensor


def smoothed_targets(gold: np.ndarray, vocab: int, eps: float, valid: np.ndarray | None = None) -> np.ndarray:
    """Target distribution: 1 - eps on gold, eps / (V - 1) on every other id.

    Rows where ``valid`` is False are all zeros so they drop out of the loss.
    """
    if vocab < 2:
        raise ValueError("label smoothing needs at least two classes")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {eps}")
    gold = np.asarray(gold)
    if gold.min() < 0 or gold.max() >= vocab:
        raise ValueError(f"gold id out of range for vocab {vocab}")
    q = np.full(gold.shape + (vocab,), eps / (vocab - 1))
    np.put_along_axis(q, gold[..., None], 1.0 - eps, axis=-1)
    if valid is not None:
        q *= np.asarray(valid, dtype=np.float64)[..., None]
    return q


def label_smoothed_loss(logits: Tensor, gold: np.ndarray, eps: float = 0.1,
                        valid: np.ndarray | None = None, scale: float = 1.0) -> Tensor:
    """Mean per-token cross-entropy against the smoothed targets.

    Positions with ``valid`` False (padding) are excluded from both the sum
    and the token count.
    """
    gold = np.asarray(gold)
    if valid is None:
        valid = np.ones(gold.shape, dtype=bool)
    ntok = max(int(np.asarray(valid).sum()), 1)
    q = smoothed_targets(gold, logits.shape[-1], eps, valid)
    lp = nc.log_softmax(logits, axis=-1)
    return nc.scale(nc.sum(nc.mul(lp, Tensor(q))), -scale / ntok)
