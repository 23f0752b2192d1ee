"""Context-aware compositional data augmentation.

Clean backgrounds come from hand-free frames or from labeled frames with the
hand/object/arm regions inpainted away. Each labeled foreground retrieves its
most similar clean backgrounds and is pasted onto samples from that top-K
set, keeping pixel coordinates.
"""

from __future__ import annotations

import importlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import cv2
import numpy as np
from scipy import ndimage

from . import dataio
from .dataio import Manifest, Sample
from .maskcore import LabelMap, dilate

log = logging.getLogger(__name__)

CLASSIFIED_CLEAN = "classified-clean"
INPAINTED_CLEAN = "inpainted-clean"
REMOVAL_MARGIN = 3
DEFAULT_TOPK = 10
HAND_FOCUSED_N = 16000
OBJECT_FOCUSED_N = 8000
AUG_DIR = "aug"


class CCDAError(RuntimeError):
    pass


class Inpainter(Protocol):
    def __call__(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray: ...


class Embedder(Protocol):
    def __call__(self, image: np.ndarray) -> np.ndarray: ...


# -----------------------------------------------------------------------------
# Reference handles
# -----------------------------------------------------------------------------

class DiffusionInpainter:
    """Fill a masked region by iterated 4-neighbour averaging.

    Masked pixels start at the mean of the known pixels bordering the mask
    (the image-border mean when nothing is known), then each sweep replaces
    them with the mean of their in-frame neighbours until the largest change
    drops below ``tol`` or ``sweeps`` is reached. ``sweeps=0`` is a plain
    mean fill.
    """

    def __init__(self, sweeps: int = 100, tol: float = 1e-3):
        self.sweeps = sweeps
        self.tol = tol

    def __call__(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        mask = np.asarray(mask, bool)
        img = np.asarray(image)
        if not mask.any():
            return img.copy()
        out = img.astype(np.float64)
        ring = ndimage.binary_dilation(mask) & ~mask
        if ring.any():
            seed = out[ring].mean(axis=0)
        else:
            border = np.concatenate([out[0], out[-1], out[1:-1, 0], out[1:-1, -1]])
            seed = border.mean(axis=0)
        out[mask] = seed

        h, w = mask.shape
        count = np.zeros((h, w))
        count[1:] += 1
        count[:-1] += 1
        count[:, 1:] += 1
        count[:, :-1] += 1
        count = count[..., None] if out.ndim == 3 else count
        for _ in range(self.sweeps):
            total = np.zeros_like(out)
            total[1:] += out[:-1]
            total[:-1] += out[1:]
            total[:, 1:] += out[:, :-1]
            total[:, :-1] += out[:, 1:]
            new = total / count
            delta = np.abs(new[mask] - out[mask]).max()
            out[mask] = new[mask]
            if delta < self.tol:
                break
        return np.clip(np.rint(out), 0, 255).astype(img.dtype)


def mean_fill(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return DiffusionInpainter(sweeps=0)(image, mask)


class HistogramEmbedder:
    """8x8x8 joint color histogram + per-cell gradient-orientation histograms.

    Orientation histograms use 8 magnitude-weighted bins on a 4x4 grid. Each
    part is L2-normalized, then the concatenation is.
    """

    def __init__(self, color_bins: int = 8, orientation_bins: int = 8, grid: int = 4):
        self.color_bins = color_bins
        self.orientation_bins = orientation_bins
        self.grid = grid

    @property
    def dim(self) -> int:
        return self.color_bins ** 3 + self.grid * self.grid * self.orientation_bins

    def __call__(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
        q = (img.astype(np.int64) * self.color_bins) // 256
        idx = (q[..., 0] * self.color_bins + q[..., 1]) * self.color_bins + q[..., 2]
        color = np.bincount(idx.ravel(), minlength=self.color_bins ** 3).astype(np.float64)

        gray = img.astype(np.float64).mean(axis=2)
        gy, gx = np.gradient(gray)
        mag = np.hypot(gx, gy)
        ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
        obin = np.minimum((ang / (2 * np.pi) * self.orientation_bins).astype(np.int64),
                          self.orientation_bins - 1)
        h, w = gray.shape
        cy = np.minimum(np.arange(h) * self.grid // h, self.grid - 1)
        cx = np.minimum(np.arange(w) * self.grid // w, self.grid - 1)
        cell = cy[:, None] * self.grid + cx[None, :]
        orient = np.bincount((cell * self.orientation_bins + obin).ravel(), weights=mag.ravel(),
                             minlength=self.grid * self.grid * self.orientation_bins)
        feat = np.concatenate([_l2(color), _l2(orient)])
        return _l2(feat)


def _l2(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


class ColorFractionFilter:
    """Report "contains hands" when enough pixels lie near one of ``colors``."""

    def __init__(self, colors: Sequence[Sequence[float]], tolerance: float = 60.0,
                 min_fraction: float = 0.02):
        self.colors = np.asarray(colors, np.float64)
        self.tolerance = tolerance
        self.min_fraction = min_fraction

    def __call__(self, image: np.ndarray) -> bool:
        px = np.asarray(image, np.float64).reshape(-1, 1, 3)
        near = (np.linalg.norm(px - self.colors[None], axis=2) <= self.tolerance).any(axis=1)
        return bool(near.mean() >= self.min_fraction)


def no_hands(image: np.ndarray) -> bool:
    return False


HANDLES: dict[str, dict[str, Callable]] = {
    "inpainter": {"diffusion": DiffusionInpainter, "mean-fill": lambda: mean_fill},
    "embedder": {"histogram": HistogramEmbedder},
    "hand_filter": {"none": lambda: no_hands, "color-fraction": ColorFractionFilter},
}


def resolve_handle(kind: str, name: str, **kwargs):
    """Look up a handle by registry name or by ``package.module:attribute``."""
    if kind not in HANDLES:
        raise ValueError(f"unknown handle kind {kind!r}")
    if name in HANDLES[kind]:
        return HANDLES[kind][name](**kwargs)
    if ":" in name:
        module, attr = name.split(":", 1)
        obj = getattr(importlib.import_module(module), attr)
        return obj(**kwargs) if isinstance(obj, type) else obj
    raise ValueError(f"unknown {kind} {name!r}; known: {', '.join(sorted(HANDLES[kind]))}")


# -----------------------------------------------------------------------------
# Background pool
# -----------------------------------------------------------------------------

@dataclass
class BackgroundPool:
    images: list[np.ndarray] = field(default_factory=list)
    source_ids: list[str] = field(default_factory=list)
    features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.source_ids) == len(self.provenance) == n):
            raise ValueError("pool items, source ids and provenance differ in length")
        feats = np.asarray(self.features, np.float64)
        if n == 0:
            feats = feats.reshape(0, feats.shape[-1] if feats.ndim == 2 else 0)
        elif feats.ndim != 2 or feats.shape[0] != n:
            raise ValueError(f"expected {n} feature rows, got shape {feats.shape}")
        self.features = feats

    def __len__(self) -> int:
        return len(self.images)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def add(self, image: np.ndarray, source_id: str, feature: np.ndarray, provenance: str) -> int:
        feature = np.asarray(feature, np.float64).ravel()
        if len(self) and feature.size != self.dim:
            raise ValueError(f"feature dimension {feature.size} != pool dimension {self.dim}")
        self.images.append(np.asarray(image))
        self.source_ids.append(source_id)
        self.provenance.append(provenance)
        self.features = np.vstack([self.features.reshape(-1, feature.size), feature[None]])
        return len(self) - 1

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise ValueError("saving a pool needs images of one size")
        with open(path, "wb") as fh:
            np.savez(fh, images=np.stack(self.images) if self.images else np.zeros((0, 1, 1, 3), np.uint8),
                     features=self.features, source_ids=np.array(self.source_ids, dtype=str),
                     provenance=np.array(self.provenance, dtype=str))
        return path

    @classmethod
    def load(cls, path) -> "BackgroundPool":
        with np.load(path) as data:
            return cls(list(data["images"]), [str(s) for s in data["source_ids"]], data["features"],
                       [str(p) for p in data["provenance"]])


def removal_mask(labels: LabelMap, margin: int = REMOVAL_MARGIN) -> np.ndarray:
    """Hands, objects and arms, grown by ``margin`` pixels."""
    return dilate(labels.foreground(include_arm=True), margin)


def _inpaint(inpainter, image: np.ndarray, mask: np.ndarray, item: str) -> np.ndarray:
    out = np.asarray(inpainter(image, mask))
    if out.shape != np.shape(image):
        raise CCDAError(f"inpainter returned shape {out.shape} for {item}, expected {np.shape(image)}")
    return out


def make_query_background(image: np.ndarray, labels: LabelMap, inpainter: Inpainter,
                          margin: int = REMOVAL_MARGIN) -> np.ndarray:
    """The frame with hands, objects and arms inpainted away."""
    if labels.shape != np.shape(image)[:2]:
        raise ValueError(f"label size {labels.shape} != image size {np.shape(image)[:2]}")
    mask = removal_mask(labels, margin)
    if not mask.any():
        return np.array(image, copy=True)
    return _inpaint(inpainter, image, mask, "query background")


def build_background_pool(frames: Iterable, hand_filter: Callable[[np.ndarray], bool],
                          inpainter: Inpainter, labeled: Sequence[Sample] | Manifest | None,
                          embedder: Embedder) -> BackgroundPool:
    """Pool of clean backgrounds with their embedder features.

    ``frames`` yields images or ``(source_id, image)`` pairs; those the hand
    filter reports as hand-free become classified-clean items. Every labeled
    sample contributes an inpainted-clean item.
    """
    pool = BackgroundPool()
    for i, frame in enumerate(frames):
        source_id, image = frame if isinstance(frame, tuple) else (f"frame_{i:06d}", frame)
        if hand_filter(image):
            continue
        pool.add(image, source_id, embedder(image), CLASSIFIED_CLEAN)
    if isinstance(labeled, Manifest):
        labeled = dataio.load_samples(labeled)
    for s in labeled or ():
        mask = removal_mask(s.labels)
        clean = _inpaint(inpainter, s.image, mask, s.name) if mask.any() else s.image.copy()
        pool.add(clean, s.name, embedder(clean), INPAINTED_CLEAN)
    return pool


def cosine_similarities(pool: BackgroundPool, query: np.ndarray) -> np.ndarray:
    q = np.asarray(query, np.float64).ravel()
    if q.size != pool.dim:
        raise ValueError(f"query dimension {q.size} != pool dimension {pool.dim}")
    norms = np.linalg.norm(pool.features, axis=1) * np.linalg.norm(q)
    dots = pool.features @ q
    return np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)


def retrieve_topk(pool: BackgroundPool, query: np.ndarray, k: int = DEFAULT_TOPK) -> list[int]:
    """Pool ids by decreasing cosine similarity; ties keep insertion order."""
    if not len(pool):
        raise ValueError("background pool is empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    sims = cosine_similarities(pool, query)
    order = np.argsort(-sims, kind="stable")
    return [int(i) for i in order[: min(k, len(pool))]]


# -----------------------------------------------------------------------------
# Compositing
# -----------------------------------------------------------------------------

@dataclass
class CompositeRecord:
    image: np.ndarray
    labels: LabelMap
    foreground_source: str
    background_source: str
    rank: int
    seed: int | None = None


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape[:2]
    out[max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = \
        a[max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)]
    return out


def composite(image: np.ndarray, labels: LabelMap, background: np.ndarray, *,
              placement: str = "same", seed: int = 0, feather: bool = False, max_jitter: int = 8,
              foreground_source: str = "", background_source: str = "", rank: int = 0) -> CompositeRecord:
    """Paste the hands, objects and arms of a labeled frame onto ``background``.

    The background is resized to the frame. ``placement="same"`` keeps pixel
    coordinates; ``"jitter"`` shifts the foreground by a seeded offset that
    keeps it inside the frame. ``feather`` blends the one-pixel rim of the
    pasted region half-and-half with the background.
    """
    mask = labels.foreground(include_arm=True)
    if not mask.any():
        raise ValueError("foreground has no labeled pixels")
    h, w = labels.shape
    bg = np.asarray(background)
    if bg.shape[:2] != (h, w):
        bg = cv2.resize(bg, (w, h), interpolation=cv2.INTER_LINEAR)
    img = np.asarray(image)
    classes, arm = labels.classes, labels.arm

    if placement == "jitter":
        rows, cols = np.nonzero(mask)
        rng = np.random.default_rng(seed)
        dy = int(rng.integers(max(-rows.min(), -max_jitter), min(h - 1 - rows.max(), max_jitter) + 1))
        dx = int(rng.integers(max(-cols.min(), -max_jitter), min(w - 1 - cols.max(), max_jitter) + 1))
        img, mask, classes = _shift(img, dy, dx), _shift(mask, dy, dx), _shift(classes, dy, dx)
        arm = _shift(arm, dy, dx) if arm is not None else None
    elif placement != "same":
        raise ValueError(f"unknown placement {placement!r}")

    out = bg.copy()
    out[mask] = img[mask]
    if feather:
        rim = mask & ~ndimage.binary_erosion(mask, border_value=1)
        blend = (img[rim].astype(np.float64) + bg[rim].astype(np.float64)) / 2
        out[rim] = np.rint(blend).astype(out.dtype)
    new_labels = LabelMap(np.where(mask, classes, 0), arm=arm)
    return CompositeRecord(out, new_labels, foreground_source, background_source, rank, seed)


# -----------------------------------------------------------------------------
# Augmented set
# -----------------------------------------------------------------------------

@dataclass
class AugmentResult:
    records: list[CompositeRecord]
    manifest: Manifest | None = None
    failures: list[tuple[int, str]] = field(default_factory=list)
    usage: dict[str, int] = field(default_factory=dict)


def generate_augmented_set(data: Manifest | Sequence[Sample], pool: BackgroundPool, embedder: Embedder,
                           inpainter: Inpainter, k: int = DEFAULT_TOPK, n_total: int = OBJECT_FOCUSED_N,
                           seed: int = 0, out_root=None, placement: str = "same",
                           feather: bool = False, keep_records: bool = True) -> AugmentResult:
    """Produce ``n_total`` composites by cycling through the training foregrounds.

    Composite ``i`` uses foreground ``i mod n`` and a background drawn
    uniformly (seeded) from that foreground's top-``k`` retrieved pool items.
    With ``out_root`` the composites are written in the dataset layout under
    ``out_root/aug`` together with a manifest whose extension columns hold
    foreground id, background id, rank and seed. Write failures are collected
    per item.
    """
    if isinstance(data, Manifest):
        samples = dataio.load_samples(data, "train")
    else:
        samples = list(data)
    if n_total < 0:
        raise ValueError("n_total must be >= 0")
    if n_total == 0:
        return AugmentResult([], None)
    samples = [s for s in samples if s.labels.foreground().any()]
    if not samples:
        raise ValueError("no training foregrounds to composite")
    if not len(pool):
        raise ValueError("background pool is empty")

    rng = np.random.default_rng(seed)
    topk_cache: dict[int, list[int]] = {}
    aug_root = Path(out_root) / AUG_DIR if out_root is not None else None
    records, entries, failures = [], [], []
    usage: dict[str, int] = {}
    for i in range(n_total):
        fg_idx = i % len(samples)
        fg = samples[fg_idx]
        if fg_idx not in topk_cache:
            query = make_query_background(fg.image, fg.labels, inpainter)
            topk_cache[fg_idx] = retrieve_topk(pool, embedder(query), k)
        candidates = topk_cache[fg_idx]
        pick = int(rng.integers(len(candidates)))
        bg_id = candidates[pick]
        item_seed = int(rng.integers(2**31))
        rec = composite(fg.image, fg.labels, pool.images[bg_id], placement=placement, seed=item_seed,
                        feather=feather, foreground_source=fg.name,
                        background_source=pool.source_ids[bg_id], rank=pick + 1)
        usage[fg.name] = usage.get(fg.name, 0) + 1
        if aug_root is not None:
            try:
                entries.append(dataio.write_sample(
                    aug_root, f"aug_{i:06d}", rec.image, rec.labels, split="train",
                    extra=(fg.name, f"{bg_id}:{rec.background_source}", str(rec.rank), str(item_seed)),
                ))
            except OSError as e:
                failures.append((i, str(e)))
                log.warning("composite %d failed: %s", i, e)
        if keep_records:
            records.append(rec)
    manifest = None
    if aug_root is not None:
        manifest = Manifest(aug_root, entries)
        manifest.write()
    return AugmentResult(records, manifest, failures, usage)


def as_samples(records: Iterable[CompositeRecord], prefix: str = "aug") -> list[Sample]:
    return [Sample(f"{prefix}_{i:06d}", r.image, r.labels) for i, r in enumerate(records)]
