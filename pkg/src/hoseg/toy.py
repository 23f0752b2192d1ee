"""Synthetic "shapes" scenes for exercising the pipeline end to end.

Hands are noisy polygons in two distinct colors (red-ish left, blue-ish
right) reached by an arm from the bottom edge. Interacting objects share one
palette whatever hand holds them, so ownership can only come from contact;
look-alike distractor objects lie away from the hands and stay background.
Backgrounds come from two texture families so that a train/test domain gap
can be built: ``"smooth"`` gradients and ``"textured"`` stripes/checkers.
"""

from __future__ import annotations

import cv2
import numpy as np

from .dataio import Sample
from .maskcore import (LEFT_HAND, LEFT_OBJECT, RIGHT_HAND, RIGHT_OBJECT, TWO_HAND_OBJECT,
                       LabelMap, generate_contact_boundary)

SIZE = 32
HAND_COLORS = {LEFT_HAND: (200, 60, 50), RIGHT_HAND: (50, 80, 200)}
ARM_COLOR = (150, 110, 90)
OBJECT_COLORS = [(230, 200, 40), (60, 190, 70), (245, 245, 245)]
DOMAINS = ("smooth", "textured")
# object radius as a fraction of the frame side
OBJECT_SCALE = (0.08, 0.14)


def _background(rng: np.random.Generator, size: int, domain: str) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    if domain == "smooth":
        c0 = rng.uniform(60, 190, 3)
        c1 = rng.uniform(60, 190, 3)
        angle = rng.uniform(0, 2 * np.pi)
        t = (np.cos(angle) * xx + np.sin(angle) * yy + 1) / 2
        img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    elif domain == "textured":
        c0 = rng.uniform(20, 235, 3)
        c1 = rng.uniform(20, 235, 3)
        period = rng.uniform(3, 8)
        if rng.random() < 0.5:
            angle = rng.uniform(0, np.pi)
            phase = np.sin(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) * size / period)
        else:
            phase = np.sin(2 * np.pi * xx * size / period) * np.sin(2 * np.pi * yy * size / period)
        t = (phase > 0).astype(np.float32)
        img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    else:
        raise ValueError(f"unknown domain {domain!r}")
    img = img + rng.normal(0, 6, img.shape)
    return np.clip(img, 0, 255)


def _polygon(rng: np.random.Generator, center, radius: float, n: int = 7) -> np.ndarray:
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = radius * rng.uniform(0.7, 1.15, n)
    pts = np.stack([center[0] + radii * np.cos(angles), center[1] + radii * np.sin(angles)], 1)
    return np.round(pts).astype(np.int32)


def _fill(shape, pts: np.ndarray) -> np.ndarray:
    m = np.zeros(shape, np.uint8)
    cv2.fillPoly(m, [pts.reshape(-1, 1, 2)], 1)
    return m.astype(bool)


def _paint(img: np.ndarray, mask: np.ndarray, color, rng: np.random.Generator, noise: float = 12):
    img[mask] = np.asarray(color, np.float32) + rng.normal(0, noise, (int(mask.sum()), 3))


def _distance_to(mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        return np.full(mask.shape, np.inf, np.float32)
    return cv2.distanceTransform((~mask).astype(np.uint8), cv2.DIST_L2, 5)


def make_scene(rng: np.random.Generator, size: int = SIZE, domain: str = "smooth",
               n_distractors: tuple[int, int] = (0, 2), radius: float = 1,
               object_scale: tuple[float, float] = OBJECT_SCALE):
    """One (image, labels, boundary) triple."""
    shape = (size, size)
    img = _background(rng, size, domain)
    classes = np.zeros(shape, np.uint8)
    arm = np.zeros(shape, bool)

    present = [h for h in (LEFT_HAND, RIGHT_HAND) if rng.random() < 0.85]
    hands = {}
    for h in present:
        cx = rng.uniform(0.18, 0.38) * size if h == LEFT_HAND else rng.uniform(0.62, 0.82) * size
        cy = rng.uniform(0.45, 0.7) * size
        hands[h] = (cx, cy, rng.uniform(0.13, 0.18) * size)

    # interacting objects: either one two-hand object or one per hand
    objects = []
    if len(hands) == 2 and rng.random() < 0.3:
        (lx, ly, lr), (rx, ry, rr) = hands[LEFT_HAND], hands[RIGHT_HAND]
        cx, cy = (lx + rx) / 2, min(ly, ry) - rng.uniform(0.05, 0.15) * size
        half = (rx - lx) / 2
        objects.append((TWO_HAND_OBJECT, (cx, cy), max(half - 0.5 * (lr + rr) / 2 + 3, 4)))
    else:
        for h, (hx, hy, hr) in hands.items():
            if rng.random() < 0.7:
                # held objects sit up and outward of the holding hand
                angle = rng.uniform(-np.pi * 0.95, -np.pi * 0.45)
                if h == RIGHT_HAND:
                    angle = -np.pi - angle
                r_obj = rng.uniform(*object_scale) * size
                d = hr * 0.8 + r_obj * 0.6
                objects.append((LEFT_OBJECT if h == LEFT_HAND else RIGHT_OBJECT,
                                (hx + d * np.cos(angle), hy + d * np.sin(angle)), r_obj))

    object_masks = []
    for cls, center, r in objects:
        m = _fill(shape, _polygon(rng, center, r))
        object_masks.append((cls, m))

    hand_masks = {}
    for h, (hx, hy, hr) in hands.items():
        hand_masks[h] = _fill(shape, _polygon(rng, (hx, hy), hr, n=9))
        width = hr * 0.9
        arm_pts = np.array([[hx - width / 2, hy], [hx + width / 2, hy],
                            [hx + width * 0.7 + (hx - size / 2) * 0.2, size + 2],
                            [hx - width * 0.7 + (hx - size / 2) * 0.2, size + 2]])
        arm |= _fill(shape, np.round(arm_pts).astype(np.int32))

    # distractors: same palette, kept well away from every hand
    near = _distance_to(np.logical_or.reduce([arm] + list(hand_masks.values())))
    n_dis = rng.integers(n_distractors[0], n_distractors[1] + 1)
    distractors = []
    for _ in range(int(n_dis)):
        for _attempt in range(20):
            r = rng.uniform(*object_scale) * size
            c = rng.uniform(r, size - r, 2)
            m = _fill(shape, _polygon(rng, c, r))
            if m.any() and near[m].min() > 2 * radius + 4:
                distractors.append(m)
                break

    for m in distractors:
        _paint(img, m, OBJECT_COLORS[rng.integers(len(OBJECT_COLORS))], rng)
    for cls, m in object_masks:
        _paint(img, m, OBJECT_COLORS[rng.integers(len(OBJECT_COLORS))], rng)
        classes[m] = cls
    _paint(img, arm, ARM_COLOR, rng)
    arm_only = arm.copy()
    for h, m in hand_masks.items():
        _paint(img, m, HAND_COLORS[h], rng, noise=18)
        classes[m] = h
        arm_only &= ~m
    classes[arm_only] = 0

    labels = LabelMap(classes, arm=arm_only)
    boundary = generate_contact_boundary(labels, radius)
    return np.clip(img, 0, 255).astype(np.uint8), labels, boundary


def make_background(rng: np.random.Generator, size: int = SIZE, domain: str = "smooth",
                    n_distractors: tuple[int, int] = (0, 2),
                    object_scale: tuple[float, float] = OBJECT_SCALE) -> np.ndarray:
    """A hand-free frame: background texture plus distractor objects."""
    img = _background(rng, size, domain)
    shape = (size, size)
    for _ in range(int(rng.integers(n_distractors[0], n_distractors[1] + 1))):
        r = rng.uniform(*object_scale) * size
        m = _fill(shape, _polygon(rng, rng.uniform(r, size - r, 2), r))
        _paint(img, m, OBJECT_COLORS[rng.integers(len(OBJECT_COLORS))], rng)
    return np.clip(img, 0, 255).astype(np.uint8)


def make_samples(n: int, seed: int, *, domain: str | tuple[str, ...] = "smooth", size: int = SIZE,
                 radius: float = 1, prefix: str = "toy",
                 object_scale: tuple[float, float] = OBJECT_SCALE) -> list[Sample]:
    """``n`` scenes; a tuple of domains is sampled uniformly per scene."""
    rng = np.random.default_rng(seed)
    domains = (domain,) if isinstance(domain, str) else tuple(domain)
    out = []
    for i in range(n):
        d = domains[rng.integers(len(domains))]
        image, labels, boundary = make_scene(rng, size, d, radius=radius, object_scale=object_scale)
        out.append(Sample(f"{prefix}_{i:05d}", image, labels, boundary))
    return out


def make_backgrounds(n: int, seed: int, *, domain: str | tuple[str, ...] = DOMAINS,
                     size: int = SIZE) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    domains = (domain,) if isinstance(domain, str) else tuple(domain)
    return [make_background(rng, size, domains[rng.integers(len(domains))]) for _ in range(n)]
