"""Weak/strong stochastic augmentation with exact geometric replay.

Geometric ops (flip, resize, crop/pad) are described by a GeomRecord so the
same transform can later be replayed on a label or confidence map and match
the pipeline output bit for bit. Photometric ops (color jitter, blur) touch
the image only. ClassMix pastes half of one sample's classes onto another.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import cv2
import numpy as np

from .data import DEFAULT_IGNORE_INDEX


@dataclass
class AugmentationPolicy:
    """Activation probabilities and max intensities for one pipeline."""
    flip_p: float
    resize_p: float
    jitter_p: float
    blur_p: float
    classmix_p: float
    brightness: float
    contrast: float
    saturation: float
    hue: float
    resize_range: tuple[float, float] = (0.75, 1.75)

    def __post_init__(self):
        for name in ("flip_p", "resize_p", "jitter_p", "blur_p", "classmix_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.resize_range
        if not lo < hi:
            raise ValueError(f"resize_range lower bound must be < upper, got {self.resize_range}")


WEAK = AugmentationPolicy(flip_p=0.50, resize_p=0.50, jitter_p=0.20, blur_p=0.00,
                          classmix_p=0.20, brightness=0.15, contrast=0.15,
                          saturation=0.075, hue=0.05)
STRONG = AugmentationPolicy(flip_p=0.50, resize_p=0.80, jitter_p=0.80, blur_p=0.20,
                            classmix_p=0.80, brightness=0.30, contrast=0.30,
                            saturation=0.15, hue=0.10)


@dataclass
class GeomRecord:
    """Everything needed to replay the geometric part of a transform.

    crop_offset is signed per axis: >= 0 means the resized array was cropped
    starting at that index, < 0 means it was pasted at -offset into a
    fill-padded canvas of the original size.
    """
    flipped: bool = False
    scale: float = 1.0
    crop_offset: tuple[int, int] = (0, 0)
    mix_mask: Optional[np.ndarray] = None


@dataclass
class Transform:
    """A concrete sampled transform: geometry plus photometric parameters."""
    flipped: bool = False
    scale: float = 1.0
    crop_offset: tuple[int, int] = (0, 0)
    brightness: float = 0.0   # factor delta around 1
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0          # fraction of the hue circle
    blur_sigma: Optional[float] = None

    def geom(self) -> GeomRecord:
        return GeomRecord(self.flipped, self.scale, self.crop_offset)


def _scaled_dim(dim: int, scale: float) -> int:
    # round-half-up; Python round() would bank on even halves
    return max(1, int(dim * scale + 0.5))


def sample_transform(policy: AugmentationPolicy, shape: tuple[int, int],
                     rng: np.random.Generator) -> Transform:
    """Draw one concrete transform. Draw order is fixed for determinism.

    Args:
        policy: activation probabilities and intensity bounds
        shape: (H, W) of the image the transform will be applied to; needed
            to place the post-resize crop
        rng: numpy Generator; callers own seeding
    """
    t = Transform()
    t.flipped = rng.uniform() < policy.flip_p
    if rng.uniform() < policy.resize_p:
        t.scale = float(rng.uniform(*policy.resize_range))
    if rng.uniform() < policy.jitter_p:
        t.brightness = float(rng.uniform(-policy.brightness, policy.brightness))
        t.contrast = float(rng.uniform(-policy.contrast, policy.contrast))
        t.saturation = float(rng.uniform(-policy.saturation, policy.saturation))
        t.hue = float(rng.uniform(-policy.hue, policy.hue))
    if rng.uniform() < policy.blur_p:
        t.blur_sigma = float(rng.uniform(0.1, 2.0))
    offs = []
    for dim in shape:
        diff = _scaled_dim(dim, t.scale) - dim
        if diff >= 0:
            offs.append(int(rng.integers(0, diff + 1)))
        else:
            offs.append(-int(rng.integers(0, -diff + 1)))
    t.crop_offset = (offs[0], offs[1])
    return t


def _crop_or_pad(arr: np.ndarray, offset, out_hw, fill):
    h_out, w_out = out_hw
    out = np.full((h_out, w_out) + arr.shape[2:], fill, dtype=arr.dtype)
    oy, ox = offset
    sy, dy = (oy, 0) if oy >= 0 else (0, -oy)
    sx, dx = (ox, 0) if ox >= 0 else (0, -ox)
    h = min(arr.shape[0] - sy, h_out - dy)
    w = min(arr.shape[1] - sx, w_out - dx)
    if h > 0 and w > 0:
        out[dy:dy + h, dx:dx + w] = arr[sy:sy + h, sx:sx + w]
    return out


def replay_geometry(label_map: np.ndarray, record: GeomRecord,
                    fill=DEFAULT_IGNORE_INDEX) -> np.ndarray:
    """Apply the recorded geometry to an index/confidence map, bit-exactly.

    Nearest-neighbor resize picks source index floor(i * in_dim / out_dim);
    integer arithmetic, so replay cannot drift from the original application.
    """
    out = np.asarray(label_map)
    if record.flipped:
        out = out[:, ::-1]
    h, w = out.shape[:2]
    h_r, w_r = _scaled_dim(h, record.scale), _scaled_dim(w, record.scale)
    if (h_r, w_r) != (h, w):
        rows = (np.arange(h_r) * h) // h_r
        cols = (np.arange(w_r) * w) // w_r
        out = out[rows][:, cols]
    return _crop_or_pad(out, record.crop_offset, (h, w), fill)


def _adjust_colors(img: np.ndarray, t: Transform) -> np.ndarray:
    if t.brightness:
        img = img * (1.0 + t.brightness)
    if t.contrast:
        mean = float((0.299 * img[..., 0] + 0.587 * img[..., 1]
                      + 0.114 * img[..., 2]).mean())
        img = (img - mean) * (1.0 + t.contrast) + mean
    if t.saturation:
        gray = (0.299 * img[..., 0] + 0.587 * img[..., 1]
                + 0.114 * img[..., 2])[..., None]
        img = gray + (img - gray) * (1.0 + t.saturation)
    if t.hue:
        hsv = cv2.cvtColor(np.clip(img, 0.0, 1.0).astype(np.float32),
                           cv2.COLOR_RGB2HSV)
        hsv[..., 0] = (hsv[..., 0] + t.hue * 360.0) % 360.0
        img = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def apply(transform: Transform, image: np.ndarray,
          label_map: Optional[np.ndarray] = None,
          ignore_index: int = DEFAULT_IGNORE_INDEX):
    """Apply a transform to an image and, optionally, its label map.

    The label path is literally replay_geometry, which is what guarantees
    that replaying the returned record reproduces it exactly.

    Returns:
        (image', label_map' or None, GeomRecord)
    """
    if label_map is not None and label_map.shape[:2] != image.shape[:2]:
        raise ValueError(f"label shape {label_map.shape} does not match "
                         f"image shape {image.shape[:2]}")
    record = transform.geom()
    img = np.asarray(image, dtype=np.float32)
    if record.flipped:
        img = img[:, ::-1]
    h, w = img.shape[:2]
    h_r, w_r = _scaled_dim(h, record.scale), _scaled_dim(w, record.scale)
    if (h_r, w_r) != (h, w):
        img = cv2.resize(img, (w_r, h_r), interpolation=cv2.INTER_LINEAR)
    img = _crop_or_pad(np.ascontiguousarray(img), record.crop_offset,
                       (h, w), np.float32(0.0))
    img = _adjust_colors(img, transform)
    if transform.blur_sigma is not None:
        k = int(np.ceil(4.0 * transform.blur_sigma))
        k += 1 - k % 2
        img = cv2.GaussianBlur(img, (k, k), transform.blur_sigma)
    out_label = None
    if label_map is not None:
        out_label = replay_geometry(label_map, record, fill=ignore_index)
    return img, out_label, record


def classmix(src_img, src_lab, dst_img, dst_lab, rng: np.random.Generator,
             ignore_index: int = DEFAULT_IGNORE_INDEX):
    """Paste half of src's classes (rounded up) onto dst.

    Classes are drawn uniformly without replacement from the non-ignore
    classes present in src_lab; the mask is the union of their pixels. If
    src carries no usable class, dst is returned untouched with an empty
    mask.

    Returns:
        (mixed_img, mixed_lab, mix_mask)
    """
    if src_img.shape != dst_img.shape or src_lab.shape != dst_lab.shape:
        raise ValueError("classmix requires same-shaped sources and destinations")
    classes = np.unique(src_lab)
    classes = classes[classes != ignore_index]
    if classes.size == 0:
        return dst_img.copy(), dst_lab.copy(), np.zeros(src_lab.shape, dtype=bool)
    k = int(np.ceil(classes.size / 2))
    chosen = rng.choice(classes, size=k, replace=False)
    mask = np.isin(src_lab, chosen)
    mixed_img = np.where(mask[..., None], src_img, dst_img)
    mixed_lab = np.where(mask, src_lab, dst_lab)
    return mixed_img, mixed_lab, mask
