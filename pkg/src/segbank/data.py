"""Dataset ingestion, labeled/unlabeled splits and class-frequency bookkeeping.

Dataset layout on disk:
    <root>/images/<id>.<ext>
    <root>/labels/<id>.png          (single channel, class indices)
    manifest: UTF-8 text, one ``image_path<TAB>label_path`` per line,
    label path omitted for unlabeled samples. Paths are relative to root.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from PIL import Image, ImageDraw

DEFAULT_IGNORE_INDEX = 255


class DatasetError(Exception):
    """Raised when a dataset cannot be loaded or violates its invariants."""


@dataclass
class SegSample:
    sample_id: str
    image_path: Path
    label_path: Optional[Path]  # None for unlabeled samples


class SegDataset:
    """A validated list of (image, optional label) pairs.

    Label maps must only contain values in [0, class_count) or ignore_index,
    and must match their image spatially. Loaded arrays are cached in memory;
    fine at the scales this package targets.
    """

    def __init__(self, samples: Sequence[SegSample], class_count: int,
                 ignore_index: int = DEFAULT_IGNORE_INDEX, cache: bool = True):
        if class_count < 1:
            raise DatasetError(f"class_count must be positive, got {class_count}")
        self.samples = list(samples)
        self.class_count = class_count
        self.ignore_index = ignore_index
        self._cache_enabled = cache
        self._image_cache: dict[int, np.ndarray] = {}
        self._label_cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def load_image(self, index: int) -> np.ndarray:
        """Return HxWx3 float32 image in [0, 1]."""
        if index in self._image_cache:
            return self._image_cache[index]
        path = self.samples[index].image_path
        try:
            img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        except FileNotFoundError:
            raise DatasetError(f"missing image file: {path}") from None
        if self._cache_enabled:
            self._image_cache[index] = img
        return img

    def load_label(self, index: int) -> Optional[np.ndarray]:
        """Return HxW int64 label map, or None for an unlabeled sample."""
        sample = self.samples[index]
        if sample.label_path is None:
            return None
        if index in self._label_cache:
            return self._label_cache[index]
        try:
            lab = np.asarray(Image.open(sample.label_path), dtype=np.int64)
        except FileNotFoundError:
            raise DatasetError(f"missing label file: {sample.label_path}") from None
        if self._cache_enabled:
            self._label_cache[index] = lab
        return lab

    def validate(self) -> None:
        for i, sample in enumerate(self.samples):
            img = self.load_image(i)
            lab = self.load_label(i)
            if lab is None:
                continue
            if lab.shape != img.shape[:2]:
                raise DatasetError(
                    f"sample {sample.sample_id}: label shape {lab.shape} does not "
                    f"match image shape {img.shape[:2]}")
            values = np.unique(lab)
            bad = values[(values != self.ignore_index)
                         & ((values < 0) | (values >= self.class_count))]
            if bad.size:
                raise DatasetError(
                    f"sample {sample.sample_id}: label value {int(bad[0])} outside "
                    f"[0, {self.class_count}) and != ignore_index {self.ignore_index}")


def load_dataset(root, manifest, class_count: int,
                 ignore_index: int = DEFAULT_IGNORE_INDEX,
                 validate: bool = True, cache: bool = True) -> SegDataset:
    """Load and validate a dataset from a manifest file.

    Args:
        root: directory the manifest paths are relative to
        manifest: path to the manifest text file
        class_count: number of semantic classes C
    """
    root = Path(root)
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DatasetError(f"missing manifest file: {manifest}")
    samples = []
    for line_no, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) not in (1, 2):
            raise DatasetError(f"{manifest}:{line_no}: expected 1 or 2 tab-separated "
                               f"paths, got {len(parts)}")
        image_path = root / parts[0]
        label_path = root / parts[1] if len(parts) == 2 and parts[1] else None
        if not image_path.is_file():
            raise DatasetError(f"missing image file: {image_path}")
        if label_path is not None and not label_path.is_file():
            raise DatasetError(f"missing label file: {label_path}")
        samples.append(SegSample(Path(parts[0]).stem, image_path, label_path))
    dataset = SegDataset(samples, class_count, ignore_index, cache=cache)
    if validate:
        dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# Labeled/unlabeled splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    ratio: Fraction
    seed: int

    def __post_init__(self):
        overlap = set(self.labeled_ids) & set(self.unlabeled_ids)
        if overlap:
            raise ValueError(f"split ids overlap: {sorted(overlap)[:3]}")


def make_split(dataset: SegDataset, ratio, seed: int) -> SplitSpec:
    """Partition the dataset ids into labeled and unlabeled subsets.

    The labeled count is max(1, round(ratio * N)). Deterministic for a
    fixed seed.
    """
    ratio = Fraction(ratio)
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    ids = dataset.ids()
    n_labeled = max(1, round(float(ratio) * len(ids)))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    labeled = [ids[i] for i in perm[:n_labeled]]
    unlabeled = [ids[i] for i in perm[n_labeled:]]
    return SplitSpec(labeled, unlabeled, ratio, seed)


def save_split(split: SplitSpec, path) -> None:
    """Write a split file: header line `ratio=<r> seed=<s>`, one id per line."""
    lines = [f"ratio={split.ratio} seed={split.seed}"]
    lines += [f"{i}\tlabeled" for i in split.labeled_ids]
    lines += [f"{i}\tunlabeled" for i in split.unlabeled_ids]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split(path) -> SplitSpec:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("ratio="):
        raise ValueError(f"{path}: missing `ratio=<r> seed=<s>` header")
    header = dict(kv.split("=", 1) for kv in lines[0].split())
    labeled, unlabeled = [], []
    for raw in lines[1:]:
        if not raw.strip():
            continue
        sample_id, group = raw.split("\t")
        if group == "labeled":
            labeled.append(sample_id)
        elif group == "unlabeled":
            unlabeled.append(sample_id)
        else:
            raise ValueError(f"{path}: unknown split group {group!r}")
    return SplitSpec(labeled, unlabeled, Fraction(header["ratio"]), int(header["seed"]))


# ---------------------------------------------------------------------------
# Class frequencies and balancing weights
# ---------------------------------------------------------------------------

@dataclass
class ClassFrequencyTable:
    """Cumulative per-class pixel counts; counts never decrease."""
    counts: np.ndarray
    source: str = "labeled_only"  # or "labeled_plus_pseudo"

    @classmethod
    def empty(cls, class_count: int, source: str = "labeled_only") -> "ClassFrequencyTable":
        return cls(np.zeros(class_count, dtype=np.int64), source)


def update_frequencies(table: ClassFrequencyTable, label_map: np.ndarray,
                       ignore_index: int = DEFAULT_IGNORE_INDEX) -> ClassFrequencyTable:
    """Add the pixel counts of ``label_map`` to the table (ignore pixels skipped)."""
    c = table.counts.shape[0]
    values = np.asarray(label_map).ravel()
    values = values[values != ignore_index]
    table.counts += np.bincount(values, minlength=c)[:c]
    return table


def class_weights(table: ClassFrequencyTable, balanced: bool = True) -> np.ndarray:
    """Per-class weights sqrt(f_median / f_c) from normalized frequencies.

    Classes with zero count get weight 1 (their frequency ratio is undefined
    and a neutral weight avoids division by zero). The median is taken over
    the classes actually observed. With ``balanced=False`` returns all ones.
    """
    c = table.counts.shape[0]
    if not balanced:
        return np.ones(c, dtype=np.float64)
    total = table.counts.sum()
    if total == 0:
        raise ValueError("class_weights: all class counts are zero")
    freqs = table.counts / total
    nonzero = freqs[freqs > 0]
    f_median = np.median(nonzero)
    weights = np.ones(c, dtype=np.float64)
    mask = freqs > 0
    weights[mask] = np.sqrt(f_median / freqs[mask])
    return weights


def downsample_labels(label_map: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor label subsampling anchored at the top-left of each block.

    Interpolating class indices would invent classes, so this is a pure
    strided pick. Non-divisible sizes yield ceil(dim / factor) outputs.
    """
    if factor < 1:
        raise ValueError(f"downsample factor must be positive, got {factor}")
    return np.asarray(label_map)[::factor, ::factor]


# ---------------------------------------------------------------------------
# Synthetic shapes dataset (desk-scale training and tests)
# ---------------------------------------------------------------------------

def _instance_color(rng: np.random.Generator, class_id: int,
                    class_count: int) -> np.ndarray:
    # each class owns a wide hue band with clear gaps between bands: a small
    # labeled sample leaves uncovered stretches inside a band, while the
    # dense unlabeled pool spans each band continuously
    import colorsys
    spacing = 0.88 / max(1, class_count - 1)
    width = max(0.06, spacing - 0.12)
    start = (0.02 + spacing * (class_id - 1)) % 1.0
    hue = (start + float(rng.uniform(0.0, width))) % 1.0
    sat = float(rng.uniform(0.6, 0.95))
    val = float(rng.uniform(0.55, 0.95))
    return np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float32)


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    # near-neutral field with one of several texture styles; muted so the
    # background never competes with the shape palette
    base = np.array([0.45, 0.45, 0.45], dtype=np.float32) \
        + rng.uniform(-0.07, 0.07, 3).astype(np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    style = rng.integers(0, 3)
    if style == 0:
        # oriented sinusoidal grating
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(2.0, 9.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        tex = rng.uniform(0.04, 0.12) * np.sin(
            2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    elif style == 1:
        # smooth blotches from blurred noise
        noise = rng.normal(0.0, 1.0, (size, size)).astype(np.float32)
        k = 2 * int(rng.uniform(2, 6)) + 1
        blur = cv2.GaussianBlur(noise, (k, k), 0)
        blur /= max(1e-6, float(np.abs(blur).max()))
        tex = rng.uniform(0.05, 0.14) * blur
    else:
        # plain gradient
        tex = rng.uniform(-0.12, 0.12) * yy + rng.uniform(-0.12, 0.12) * xx
    img = base[None, None, :] + tex[:, :, None].astype(np.float32)
    img += rng.normal(0.0, 0.03, (size, size, 3)).astype(np.float32)
    return img.astype(np.float32)


def _photometric_drift(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Global hue / brightness / contrast / saturation state of one image.

    The drift spans roughly the strong-jitter ranges of the training
    pipeline, so consistency across augmented views can bridge it while a
    small labeled sample cannot cover it.
    """
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV)
    hsv[:, :, 0] = (hsv[:, :, 0] + rng.uniform(-0.02, 0.02) * 360.0) % 360.0
    hsv[:, :, 1] = np.clip(hsv[:, :, 1] * rng.uniform(0.9, 1.1), 0.0, 1.0)
    img = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    lum = img.mean()
    img = lum + (img - lum) * rng.uniform(0.8, 1.2)   # contrast
    img = img * rng.uniform(0.8, 1.2)                 # brightness
    return np.clip(img, 0.0, 1.0)


def render_shapes(rng: np.random.Generator, size: int = 64,
                  class_count: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Render one image of colored geometric shapes with its exact class mask.

    Class 0 is a textured near-neutral background; classes 1..C-1 draw
    rotated ellipses and rectangles (kind alternates with the class id),
    each class in its own wide hue band separated from its neighbors by a
    clear gap. Finding shapes is easy, but labeling them means knowing the
    whole band: a dozen labeled instances leave stretches of each band
    uncovered, while the unlabeled pool spans the bands densely. Strong
    color jitter can chain labels along a band but cannot cross the gaps,
    which is the regime this trainer targets. A mild photometric drift on
    top varies the appearance between images.

    Returns (image uint8 HxWx3, mask uint8 HxW).
    """
    if class_count < 2:
        raise ValueError("need at least a background class and one shape class")
    img = _textured_background(rng, size)
    mask = np.zeros((size, size), dtype=np.uint8)

    margin = max(6, size // 6)
    r_lo, r_hi = 0.17 * size, 0.33 * size
    for class_id in range(1, class_count):
        if rng.uniform() > 0.45:
            continue
        for _ in range(rng.integers(1, 2)):
            layer = Image.new("L", (size, size), 0)
            draw = ImageDraw.Draw(layer)
            cx, cy = rng.uniform(margin, size - margin, 2)
            r = rng.uniform(r_lo, r_hi)
            theta = rng.uniform(0.0, np.pi)
            kind = (class_id - 1) % 2
            if kind == 0:
                # rotated ellipse as a dense polygon
                aspect = rng.uniform(0.55, 1.0)
                t = np.linspace(0.0, 2 * np.pi, 40, endpoint=False)
                ex, ey = r * np.cos(t), aspect * r * np.sin(t)
                pts = [(cx + x * np.cos(theta) - y * np.sin(theta),
                        cy + x * np.sin(theta) + y * np.cos(theta))
                       for x, y in zip(ex, ey)]
                draw.polygon(pts, fill=1)
            else:
                # rotated rectangle
                w, h = r, rng.uniform(0.45, 1.0) * r
                corners = [(-w, -h), (w, -h), (w, h), (-w, h)]
                pts = [(cx + x * np.cos(theta) - y * np.sin(theta),
                        cy + x * np.sin(theta) + y * np.cos(theta))
                       for x, y in corners]
                draw.polygon(pts, fill=1)
            shape = np.asarray(layer, dtype=bool)
            color = _instance_color(rng, class_id, class_count)
            img[shape] = color[None, :] \
                + rng.normal(0.0, 0.035, (int(shape.sum()), 3)).astype(np.float32)
            mask[shape] = class_id

    img = _photometric_drift(img, rng)
    return (img * 255.0 + 0.5).astype(np.uint8), mask


def make_toy_dataset(out_dir, class_count: int, n: int, seed: int,
                     size: int = 64) -> Path:
    """Write a synthetic shapes dataset (images/, labels/, manifest.txt)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        img, mask = render_shapes(rng, size=size, class_count=class_count)
        name = f"{i:05d}"
        Image.fromarray(img).save(out_dir / "images" / f"{name}.png")
        Image.fromarray(mask).save(out_dir / "labels" / f"{name}.png")
        lines.append(f"images/{name}.png\tlabels/{name}.png")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_dir / "manifest.txt"
