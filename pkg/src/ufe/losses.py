"""Supervised BCE / Dice, weak-to-strong consistency loss, and their combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from pydantic import ConfigDict

from . import autodiff as ad
from .autodiff import Tensor

EPS_CLAMP = 1e-7
EPS_DICE = 1e-7


@dataclass(frozen=True)
class LossConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")

    sup_kind: str = "bce"
    lam: float = 0.5
    pseudo_threshold: float = 0.5
    confidence_floor: float = 0.0
    unsup_target: str = "hard"

    def __post_init__(self):
        if self.sup_kind not in ("bce", "dice", "bce+dice"):
            raise ValueError(f"sup_kind must be bce, dice or bce+dice, got {self.sup_kind!r}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0 < self.pseudo_threshold < 1:
            raise ValueError(f"pseudo_threshold must be in (0,1), got {self.pseudo_threshold}")
        if not 0 <= self.confidence_floor < 1:
            raise ValueError(f"confidence_floor must be in [0,1), got {self.confidence_floor}")
        if self.unsup_target not in ("hard", "soft"):
            raise ValueError(f"unsup_target must be hard or soft, got {self.unsup_target!r}")


def _target(y, like: Tensor) -> Tensor:
    arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=like.data.dtype)
    if arr.shape != like.shape:
        raise ad.ShapeError(f"prediction {like.shape} and target {arr.shape} shapes differ")
    return Tensor(arr)


def _pixel_bce(p: Tensor, y: Tensor) -> Tensor:
    pc = ad.clip(p, EPS_CLAMP, 1 - EPS_CLAMP)
    return -(y * ad.log(pc) + (1.0 - y) * ad.log(1.0 - pc))


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy over all pixels (and batch items)."""
    return ad.mean(_pixel_bce(p, _target(y, p)))


def dice_loss(p: Tensor, y) -> Tensor:
    """1 - 2 sum(p y) / (sum p + sum y + eps); batched inputs average per item."""
    yt = _target(y, p)
    axes = tuple(range(-min(yt.ndim, 2), 0))
    inter = ad.tsum(p * yt, axes)
    denom = ad.tsum(p, axes) + ad.tsum(yt, axes) + EPS_DICE
    return ad.mean(1.0 - 2.0 * inter / denom)


def supervised_loss(p: Tensor, y, cfg: LossConfig) -> Tensor:
    if cfg.sup_kind == "bce":
        return bce_loss(p, y)
    if cfg.sup_kind == "dice":
        return dice_loss(p, y)
    return bce_loss(p, y) + dice_loss(p, y)


def make_pseudo_label(p_w, threshold: float = 0.5, confidence_floor: float = 0.0):
    """Hard labels ``p >= threshold`` and a validity mask ``max(p, 1-p) >= floor``."""
    p = np.asarray(p_w.data if isinstance(p_w, Tensor) else p_w)
    pseudo = (p >= threshold).astype(np.float32)
    valid = (np.maximum(p, 1 - p) >= confidence_floor).astype(np.float32)
    return pseudo, valid


def unsup_loss(p_w_batch, p_s_batch: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """(1/B_u) sum over items of the valid-pixel BCE between teacher pseudo-labels and p_s.

    ``p_w_batch`` must carry no gradient path (teacher evaluated under no_grad).
    Items whose pixels are all invalid contribute zero.
    """
    if isinstance(p_w_batch, Tensor):
        if p_w_batch.requires_grad:
            raise ValueError("teacher predictions must be detached (stop-gradient)")
        p_w_batch = p_w_batch.data
    p_w = np.asarray(p_w_batch)
    if p_w.shape[0] == 0:
        return Tensor(np.zeros((), dtype=p_s_batch.data.dtype))
    if p_w.shape != p_s_batch.shape:
        raise ad.ShapeError(f"teacher {p_w.shape} and student {p_s_batch.shape} batches differ")
    pseudo, valid = make_pseudo_label(p_w, cfg.pseudo_threshold, cfg.confidence_floor)
    target = pseudo if cfg.unsup_target == "hard" else p_w
    b = p_w.shape[0]
    counts = valid.reshape(b, -1).sum(1, dtype=np.float64)
    scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0) / b
    weights = (valid * scale[:, None, None]).astype(p_s_batch.data.dtype)
    return ad.tsum(_pixel_bce(p_s_batch, Tensor(target.astype(p_s_batch.data.dtype))) * Tensor(weights))


def total_loss(l_sup, l_unsup, lam: float):
    return l_sup + lam * l_unsup
