"""Independent brute-force references used by the tests.

Nothing here calls into the package's morphology or metric code.
"""

from __future__ import annotations

import itertools

import numpy as np

# hand id -> object ids it may form a contact band with
PAIRS = {1: (3, 5), 2: (4, 5)}


def _near(shape, pts: np.ndarray, radius: float) -> np.ndarray:
    """Pixels within ``radius`` of any point in ``pts`` (explicit all-pairs distances)."""
    h, w = shape
    if len(pts) == 0:
        return np.zeros(shape, bool)
    grid = np.stack(np.mgrid[0:h, 0:w], -1).reshape(-1, 1, 2)
    d2 = ((grid - pts[None]) ** 2).sum(-1)
    return (d2 <= radius * radius).any(1).reshape(h, w)


def boundary_oracle(classes: np.ndarray, radius: float, pairing: str = "per-hand") -> np.ndarray:
    """A pixel is in the band when a permitted hand pixel and object pixel
    both lie within ``radius`` of it."""
    if pairing == "per-hand":
        pairs = [((h_,), objs) for h_, objs in PAIRS.items()]
    else:
        pairs = [((1, 2), (3, 4, 5))]
    out = np.zeros(classes.shape, bool)
    for hands, objs in pairs:
        hp = np.argwhere(np.isin(classes, hands))
        op = np.argwhere(np.isin(classes, objs))
        if len(hp) and len(op):
            out |= _near(classes.shape, hp, radius) & _near(classes.shape, op, radius)
    return out


def dilate_oracle(mask: np.ndarray, radius: float) -> np.ndarray:
    return _near(mask.shape, np.argwhere(mask), radius)


def loop_boundary_oracle(classes: np.ndarray, radius: float) -> np.ndarray:
    """Literal per-pixel double loop (slow; used on small fixtures only)."""
    h, w = classes.shape
    out = np.zeros((h, w), bool)
    pts = {c: list(zip(*np.nonzero(classes == c))) for c in range(1, 6)}
    for y, x in itertools.product(range(h), range(w)):
        for hand, objs in PAIRS.items():
            if any((y - a) ** 2 + (x - b) ** 2 <= radius * radius for a, b in pts[hand]) and any(
                    (y - a) ** 2 + (x - b) ** 2 <= radius * radius for c in objs for a, b in pts[c]):
                out[y, x] = True
    return out


def counts_oracle(pred: np.ndarray, truth: np.ndarray, cls) -> tuple[int, int, int]:
    tp = fp = fn = 0
    for p, t in zip(np.ravel(pred).tolist(), np.ravel(truth).tolist()):
        if p == cls and t == cls:
            tp += 1
        elif p == cls:
            fp += 1
        elif t == cls:
            fn += 1
    return tp, fp, fn


def metrics_from(tp: int, fp: int, fn: int) -> dict:
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    prec = tp / (tp + fp) if tp + fp else 1.0
    rec = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return {"iou": iou, "precision": prec, "recall": rec, "f1": f1}


def random_label_map(rng: np.random.Generator, max_side: int = 32) -> np.ndarray:
    """Blobby random class map: a few filled rectangles/disks on background."""
    h, w = rng.integers(1, max_side + 1, 2)
    c = np.zeros((h, w), np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(0, 6)):
        cls = rng.integers(1, 6)
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        if rng.random() < 0.5:
            ry, rx = rng.integers(0, max(h // 3, 1) + 1), rng.integers(0, max(w // 3, 1) + 1)
            c[(abs(yy - cy) <= ry) & (abs(xx - cx) <= rx)] = cls
        else:
            r = rng.uniform(0, max(h, w) / 4)
            c[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    return c
