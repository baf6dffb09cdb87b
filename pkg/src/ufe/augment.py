"""Weak (crop/resize/flip) and strong (jitter/grayscale/cutmix) perturbations.

Geometry is applied identically to image, flow and mask; photometric ops touch
the image only.  Every transform is captured in an :class:`AugmentRecord` so
it can be replayed on a mask later.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from pydantic import ConfigDict

from .autodiff import bilinear_matrix


@dataclass(frozen=True)
class AugmentConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")

    crop_scale: tuple[float, float] = (0.7, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_prob: float = 0.2
    cutmix_prob: float = 0.5
    cutmix_area: tuple[float, float] = (0.1, 0.4)


@dataclass(frozen=True)
class AugmentRecord:
    src_size: tuple[int, int]
    crop: tuple[int, int, int, int]        # x, y, w, h in source pixels
    out_size: tuple[int, int]
    hflip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    grayscale: bool = False
    cutmix_box: Optional[tuple[int, int, int, int]] = None  # x, y, w, h in output pixels
    partner: Optional[int] = None

    @classmethod
    def identity(cls, size: tuple[int, int]) -> "AugmentRecord":
        h, w = size
        return cls(src_size=(h, w), crop=(0, 0, w, h), out_size=(h, w))

    @property
    def is_photometric_identity(self) -> bool:
        return (self.brightness == 1.0 and self.contrast == 1.0 and self.saturation == 1.0
                and not self.grayscale)


# ---------------------------------------------------------------- geometry
def _resize_crop(arr: np.ndarray, rec: AugmentRecord) -> np.ndarray:
    x, y, w, h = rec.crop
    sub = arr[..., y:y + h, x:x + w].astype(np.float32)
    oh, ow = rec.out_size
    if (h, w) == (oh, ow):
        return sub.copy()
    uh = bilinear_matrix(h, oh)
    uw = bilinear_matrix(w, ow)
    return uh @ sub @ uw.T


def _nearest_crop(mask: np.ndarray, rec: AugmentRecord) -> np.ndarray:
    x, y, w, h = rec.crop
    oh, ow = rec.out_size
    iy = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(int), h - 1) + y
    ix = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(int), w - 1) + x
    return mask[..., iy[:, None], ix[None, :]]


def _paste(dst: np.ndarray, src: np.ndarray, box) -> np.ndarray:
    out = dst.copy()
    if box is not None:
        x, y, w, h = box
        out[..., y:y + h, x:x + w] = src[..., y:y + h, x:x + w]
    return out


def geometric_image(rec: AugmentRecord, image: np.ndarray) -> np.ndarray:
    out = _resize_crop(image, rec)
    return out[..., ::-1].copy() if rec.hflip else out


def geometric_flow(rec: AugmentRecord, flow: np.ndarray) -> np.ndarray:
    x, y, w, h = rec.crop
    oh, ow = rec.out_size
    out = _resize_crop(flow, rec)
    # displacements are in pixels, so they stretch with the resize
    out[0] *= ow / w
    out[1] *= oh / h
    if rec.hflip:
        out = out[..., ::-1].copy()
        out[0] = -out[0]
    return out


def replay(rec: AugmentRecord, mask: np.ndarray, partner_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply the geometric part of ``rec`` (crop, resize, flip, cutmix patch) to a mask."""
    mask = np.asarray(mask)
    if mask.shape[-2:] != tuple(rec.src_size):
        raise ValueError(f"mask {mask.shape} does not match record source size {rec.src_size}")
    out = _nearest_crop(mask, rec)
    if rec.hflip:
        out = out[..., ::-1]
    out = out.copy()
    if rec.cutmix_box is not None:
        if partner_mask is None:
            raise ValueError("record carries a cutmix box; partner_mask is required")
        if partner_mask.shape != out.shape:
            raise ValueError(f"partner mask {partner_mask.shape} does not match {out.shape}")
        out = _paste(out, partner_mask, rec.cutmix_box)
    return out


# ------------------------------------------------------------- photometric
def _luma(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def photometric(rec: AugmentRecord, image: np.ndarray) -> np.ndarray:
    img = image.astype(np.float32) * rec.brightness
    img = (img - _luma(img).mean()) * rec.contrast + _luma(img).mean()
    gray = _luma(img)[None]
    img = gray + (img - gray) * rec.saturation
    if rec.grayscale:
        img = np.repeat(_luma(img)[None], 3, axis=0)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -------------------------------------------------------------- samplers
def _sample_crop(rng, h: int, w: int, cfg: AugmentConfig) -> tuple[int, int, int, int]:
    area = rng.uniform(*cfg.crop_scale) * h * w
    ratio = np.exp(rng.uniform(np.log(cfg.crop_ratio[0]), np.log(cfg.crop_ratio[1])))
    cw = int(np.clip(round(np.sqrt(area * ratio)), 1, w))
    ch = int(np.clip(round(np.sqrt(area / ratio)), 1, h))
    x = int(rng.integers(0, w - cw + 1))
    y = int(rng.integers(0, h - ch + 1))
    return x, y, cw, ch


def sample_weak(rng: np.random.Generator, size: tuple[int, int], cfg: AugmentConfig = AugmentConfig()) -> AugmentRecord:
    h, w = size
    crop = _sample_crop(rng, h, w, cfg)
    hflip = bool(rng.random() < cfg.hflip_prob)
    return AugmentRecord(src_size=(h, w), crop=crop, out_size=(h, w), hflip=hflip)


def sample_cutmix_box(rng, size: tuple[int, int], cfg: AugmentConfig) -> tuple[int, int, int, int]:
    h, w = size
    area = rng.uniform(*cfg.cutmix_area) * h * w
    ratio = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    bw = int(np.clip(round(np.sqrt(area * ratio)), 1, w))
    bh = int(np.clip(round(np.sqrt(area / ratio)), 1, h))
    return int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1)), bw, bh


def weak_augment(image: np.ndarray, flow: np.ndarray, mask: Optional[np.ndarray],
                 rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                 record: Optional[AugmentRecord] = None):
    """Random resized crop + horizontal flip on (image, flow, mask).

    Returns ``((image, flow, mask), record)``; ``mask`` stays None if not given.
    """
    size = image.shape[-2:]
    if flow.shape[-2:] != size or (mask is not None and mask.shape[-2:] != size):
        raise ValueError(f"spatial sizes differ: image {image.shape}, flow {flow.shape}, "
                         f"mask {None if mask is None else mask.shape}")
    rec = record if record is not None else sample_weak(rng, size, cfg)
    view_mask = replay(rec, mask) if mask is not None else None
    return (geometric_image(rec, image), geometric_flow(rec, flow), view_mask), rec


def strong_augment(view_a: tuple, pseudo_a: np.ndarray, view_b: tuple, pseudo_b: np.ndarray,
                   rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                   partner: Optional[int] = None, box="sample"):
    """Photometric jitter on view_a's image, then (maybe) cutmix a box of view_b in.

    Views are ``(image, flow)`` pairs already in weak geometry.  ``pseudo_*`` may be
    hard labels or probabilities; they are patched pixelwise with the same box.
    ``box`` overrides the random cutmix decision (None disables it).
    Returns ``((image, flow), mixed_pseudo, record)``.
    """
    img_a, flow_a = view_a
    img_b, flow_b = view_b
    if img_a.shape != img_b.shape or flow_a.shape != flow_b.shape or pseudo_a.shape != pseudo_b.shape:
        raise ValueError("strong_augment: view sizes differ")
    size = img_a.shape[-2:]
    def jitter(m: float) -> float:
        return float(rng.uniform(max(0.0, 1 - m), 1 + m))

    rec = replace(AugmentRecord.identity(size),
                  brightness=jitter(cfg.brightness), contrast=jitter(cfg.contrast),
                  saturation=jitter(cfg.saturation), grayscale=bool(rng.random() < cfg.grayscale_prob))
    if isinstance(box, str):
        use = rng.random() < cfg.cutmix_prob
        box = sample_cutmix_box(rng, size, cfg) if use else None
    if box is not None:
        bx, by, bw, bh = box
        if bw <= 0 or bh <= 0:
            box = None
        else:
            rec = replace(rec, cutmix_box=(int(bx), int(by), int(bw), int(bh)), partner=partner)
    image = photometric(rec, img_a)
    if rec.cutmix_box is not None:
        image = np.clip(_paste(image, img_b, rec.cutmix_box), 0.0, 1.0)
    flow = _paste(flow_a, flow_b, rec.cutmix_box)
    mixed = _paste(pseudo_a, pseudo_b, rec.cutmix_box)
    return (image.astype(np.float32), flow.astype(np.float32)), mixed, rec
