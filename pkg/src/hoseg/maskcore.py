"""Mask algebra: morphology, contact-boundary pseudo labels and segmentation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "BACKGROUND",
    "LEFT_HAND",
    "RIGHT_HAND",
    "LEFT_OBJECT",
    "RIGHT_OBJECT",
    "TWO_HAND_OBJECT",
    "CLASS_NAMES",
    "HAND_CLASSES",
    "OBJECT_CLASSES",
    "SEGMENT_CLASSES",
    "BOUNDARY",
    "LabelMap",
    "Pairing",
    "Counts",
    "ClassMetrics",
    "MetricsReport",
    "as_mask",
    "dilate",
    "disk",
    "intersect",
    "generate_contact_boundary",
    "soft_contact_boundary",
    "confusion_counts",
    "label_counts",
    "class_metrics",
    "aggregate_metrics",
]

BACKGROUND = 0
LEFT_HAND = 1
RIGHT_HAND = 2
LEFT_OBJECT = 3
RIGHT_OBJECT = 4
TWO_HAND_OBJECT = 5

CLASS_NAMES = {
    BACKGROUND: "background",
    LEFT_HAND: "left_hand",
    RIGHT_HAND: "right_hand",
    LEFT_OBJECT: "left_object",
    RIGHT_OBJECT: "right_object",
    TWO_HAND_OBJECT: "two_hand_object",
}
HAND_CLASSES = (LEFT_HAND, RIGHT_HAND)
OBJECT_CLASSES = (LEFT_OBJECT, RIGHT_OBJECT, TWO_HAND_OBJECT)
SEGMENT_CLASSES = HAND_CLASSES + OBJECT_CLASSES
INDIRECT_CLASSES = (BACKGROUND,) + OBJECT_CLASSES

# metric key for the contact band, reported next to the integer class ids
BOUNDARY = "boundary"


def as_mask(mask, name: str = "mask") -> np.ndarray:
    """Return ``mask`` as a 2-D boolean array, validating its shape."""
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class ids plus the optional arm and indirect-object layers."""

    classes: np.ndarray
    arm: np.ndarray | None = None
    indirect: np.ndarray | None = None

    def __post_init__(self):
        classes = np.asarray(self.classes)
        if classes.ndim != 2 or 0 in classes.shape:
            raise ValueError(f"label map must be a non-empty 2-D array, got shape {classes.shape}")
        if classes.dtype.kind not in "iub":
            raise ValueError(f"label map must hold integer class ids, got dtype {classes.dtype}")
        bad = np.setdiff1d(np.unique(classes), list(CLASS_NAMES))
        if bad.size:
            raise ValueError(f"illegal class id {int(bad[0])}")
        object.__setattr__(self, "classes", classes.astype(np.uint8, copy=False))

        if self.arm is not None:
            arm = np.asarray(self.arm)
            if arm.shape != classes.shape:
                raise ValueError(f"arm layer shape {arm.shape} != label shape {classes.shape}")
            object.__setattr__(self, "arm", arm.astype(bool, copy=False))

        if self.indirect is not None:
            indirect = np.asarray(self.indirect)
            if indirect.shape != classes.shape:
                raise ValueError(
                    f"indirect layer shape {indirect.shape} != label shape {classes.shape}"
                )
            bad = np.setdiff1d(np.unique(indirect), INDIRECT_CLASSES)
            if bad.size:
                raise ValueError(f"illegal indirect class id {int(bad[0])}")
            if np.any((indirect > 0) & (classes > 0)):
                raise ValueError("indirect layer overlaps hand/object classes")
            object.__setattr__(self, "indirect", indirect.astype(np.uint8, copy=False))

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    def mask(self, *class_ids: int) -> np.ndarray:
        return np.isin(self.classes, class_ids)

    def hands(self) -> np.ndarray:
        return self.mask(*HAND_CLASSES)

    def objects(self) -> np.ndarray:
        return self.mask(*OBJECT_CLASSES)

    def foreground(self, include_arm: bool = True) -> np.ndarray:
        """Union of classes 1-5, plus the arm layer when present."""
        fg = self.classes > 0
        if include_arm and self.arm is not None:
            fg = fg | self.arm
        return fg

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return (
            np.array_equal(self.classes, other.classes)
            and _layer_equal(self.arm, other.arm)
            and _layer_equal(self.indirect, other.indirect)
        )

    @classmethod
    def empty(cls, height: int, width: int) -> "LabelMap":
        return cls(np.zeros((height, width), dtype=np.uint8))


def _layer_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


# -----------------------------------------------------------------------------
# Morphology
# -----------------------------------------------------------------------------

def disk(radius: float) -> np.ndarray:
    """Euclidean disk structuring element: offsets with dy² + dx² <= radius²."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= radius * radius


def dilate(mask, radius: float) -> np.ndarray:
    """Dilate a binary mask by a Euclidean disk of ``radius`` pixels."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    m = as_mask(mask)
    if radius < 1 or not m.any():
        return m.copy()
    return ndimage.binary_dilation(m, structure=disk(radius))


def intersect(a, b) -> np.ndarray:
    a = as_mask(a, "a")
    b = as_mask(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a & b


# -----------------------------------------------------------------------------
# Contact boundary
# -----------------------------------------------------------------------------

class Pairing(str, Enum):
    """Which hand/object masks are intersected when building the contact band."""

    # left hand <-> {left object, two-hand object}; right hand <-> {right object, two-hand object}
    PER_HAND = "per-hand"
    # union of both hands against union of all objects
    GLOBAL = "global"


PAIRS = {
    LEFT_HAND: (LEFT_OBJECT, TWO_HAND_OBJECT),
    RIGHT_HAND: (RIGHT_OBJECT, TWO_HAND_OBJECT),
}


def _band(hand_masks: Mapping[int, np.ndarray], object_masks: Mapping[int, np.ndarray],
          radius: float, pairing: Pairing) -> np.ndarray:
    shape = next(iter(hand_masks.values())).shape
    out = np.zeros(shape, dtype=bool)
    pairing = Pairing(pairing)
    if pairing is Pairing.GLOBAL:
        hands = np.logical_or.reduce(list(hand_masks.values()))
        objs = np.logical_or.reduce(list(object_masks.values()))
        if hands.any() and objs.any():
            out |= dilate(hands, radius) & dilate(objs, radius)
        return out

    masks = {**hand_masks, **object_masks}
    dilated: dict[int, np.ndarray] = {}

    def grown(key):
        if key not in dilated:
            dilated[key] = dilate(masks[key], radius)
        return dilated[key]

    for hand, partners in PAIRS.items():
        if not masks[hand].any():
            continue
        for obj in partners:
            if masks[obj].any():
                out |= grown(hand) & grown(obj)
    return out


def generate_contact_boundary(labels: LabelMap, radius: float = 5,
                              pairing: Pairing | str = Pairing.PER_HAND) -> np.ndarray:
    """Binary contact band: overlap of the dilated hand and interacting-object masks.

    Each permitted hand/object pair contributes ``dilate(hand) & dilate(object)``
    and the result is the union over pairs. Labels without a hand or without an
    object give an empty band.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    hands = {c: labels.classes == c for c in HAND_CLASSES}
    objects = {c: labels.classes == c for c in OBJECT_CLASSES}
    return _band(hands, objects, radius, pairing)


def soft_contact_boundary(hand_probs: np.ndarray, object_probs: np.ndarray, radius: float = 5,
                          pairing: Pairing | str = Pairing.PER_HAND,
                          threshold: float = 0.5) -> np.ndarray:
    """Contact band from soft masks.

    ``hand_probs`` is (2, H, W) for left/right hands, ``object_probs`` is
    (3, H, W) for left/right/two-hand objects. Each channel is binarized at
    ``threshold`` before the band is built.
    """
    hand_probs = np.asarray(hand_probs)
    object_probs = np.asarray(object_probs)
    if hand_probs.shape[0] != 2 or object_probs.shape[0] != 3:
        raise ValueError("expected 2 hand channels and 3 object channels")
    if hand_probs.shape[1:] != object_probs.shape[1:]:
        raise ValueError("hand and object channels differ in spatial size")
    hands = {c: as_mask(hand_probs[i] >= threshold) for i, c in enumerate(HAND_CLASSES)}
    objects = {c: as_mask(object_probs[i] >= threshold) for i, c in enumerate(OBJECT_CLASSES)}
    return _band(hands, objects, radius, pairing)


# -----------------------------------------------------------------------------
# Metrics
# -----------------------------------------------------------------------------

class Counts(NamedTuple):
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):  # type: ignore[override]
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class ClassMetrics:
    iou: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "ClassMetrics":
        # empty denominators count as perfect: nothing predicted, nothing missed
        iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / (tp + fn) if tp + fn else 1.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(iou, precision, recall, f1, int(tp), int(fp), int(fn))

    @property
    def counts(self) -> Counts:
        return Counts(self.tp, self.fp, self.fn)

    @property
    def present(self) -> bool:
        """Whether the class occurs in the ground truth."""
        return self.tp + self.fn > 0


def _classes_array(x) -> np.ndarray:
    return x.classes if isinstance(x, LabelMap) else np.asarray(x)


def confusion_counts(pred, truth) -> Counts:
    """tp/fp/fn for two binary masks of equal shape."""
    p = as_mask(pred, "pred")
    t = as_mask(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    return Counts(tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(t)) - tp)


def label_counts(pred, truth, classes: Iterable[int] = SEGMENT_CLASSES) -> dict[int, Counts]:
    """Per-class one-vs-rest counts for a pair of label maps."""
    p = _classes_array(pred)
    t = _classes_array(truth)
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {t.shape}")
    out = {}
    for c in classes:
        if c not in CLASS_NAMES:
            raise ValueError(f"unknown class id {c}")
        out[c] = confusion_counts(p == c, t == c)
    return out


def class_metrics(pred, truth, class_id: int) -> ClassMetrics:
    return ClassMetrics.from_counts(*label_counts(pred, truth, (class_id,))[class_id])


@dataclass
class MetricsReport:
    """Per-class metrics from dataset-summed counts and their unweighted means.

    ``included`` lists the classes that enter the means: requested classes that
    occur in the ground truth somewhere in the split.
    """

    per_class: dict
    included: tuple
    miou: float
    mprec: float
    mrec: float
    mf1: float
    metadata: dict = field(default_factory=dict)

    def mean(self, attr: str, classes: Sequence | None = None) -> float:
        keys = [k for k in (classes if classes is not None else self.included)
                if k in self.per_class and (classes is None or self.per_class[k].present)]
        if not keys:
            return float("nan")
        return float(np.mean([getattr(self.per_class[k], attr) for k in keys]))

    def to_dict(self) -> dict:
        return {
            "per_class": {
                _key_name(k): {
                    "iou": m.iou, "precision": m.precision, "recall": m.recall, "f1": m.f1,
                    "tp": m.tp, "fp": m.fp, "fn": m.fn,
                }
                for k, m in self.per_class.items()
            },
            "included": [_key_name(k) for k in self.included],
            "means": {"mIoU": self.miou, "mPrec": self.mprec, "mRec": self.mrec, "mF1": self.mf1},
            "metadata": dict(self.metadata),
        }


def _key_name(key) -> str:
    return CLASS_NAMES.get(key, str(key)) if isinstance(key, (int, np.integer)) else str(key)


def aggregate_metrics(per_image: Sequence[Mapping], classes: Sequence) -> MetricsReport:
    """Sum per-image tp/fp/fn per class, then derive metrics and their means.

    Classes with no ground-truth pixel in any image are reported but left out
    of the means; if no requested class is present at all, the means cover
    every requested class (all at their empty-case values).
    """
    if not per_image:
        raise ValueError("aggregate_metrics needs at least one image")
    totals = {c: Counts() for c in classes}
    for counts in per_image:
        for c in classes:
            if c in counts:
                totals[c] = totals[c] + Counts(*counts[c])
    per_class = {c: ClassMetrics.from_counts(*totals[c]) for c in classes}
    included = tuple(c for c in classes if per_class[c].present) or tuple(classes)

    def avg(attr):
        return float(np.mean([getattr(per_class[c], attr) for c in included])) if included else float("nan")

    return MetricsReport(per_class, included, avg("iou"), avg("precision"), avg("recall"), avg("f1"))
