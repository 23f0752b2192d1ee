"""Reading and writing images, label maps and contact-boundary maps as PNG files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .maskcore import LabelMap

# red left hand, blue right hand, pink left-hand object, cyan right-hand object,
# green two-hand object
PALETTE = [
    (0, 0, 0),
    (255, 0, 0),
    (0, 0, 255),
    (255, 0, 255),
    (0, 255, 255),
    (0, 255, 0),
]
ARM_SUFFIX = "_arm"
INDIRECT_SUFFIX = "_indirect"


def _flat_palette() -> list[int]:
    flat = [v for rgb in PALETTE for v in rgb]
    return flat + [0] * (768 - len(flat))


def read_image(path) -> np.ndarray:
    """Load an RGB image as an (H, W, 3) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def image_size(path) -> tuple[int, int]:
    """(height, width) of an image file without decoding pixels."""
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def read_class_ids(path) -> np.ndarray:
    """Raw per-pixel ids from an indexed (or grayscale) PNG, unvalidated."""
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise ValueError(f"{path}: expected an indexed or grayscale label image, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def write_class_ids(path, ids: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    im = Image.fromarray(np.ascontiguousarray(ids, dtype=np.uint8), mode="P")
    im.putpalette(_flat_palette())
    im.save(path, format="PNG")


def sibling_paths(label_path) -> tuple[Path, Path]:
    """Default arm / indirect layer paths next to a label file."""
    p = Path(label_path)
    return (p.with_name(p.stem + ARM_SUFFIX + p.suffix),
            p.with_name(p.stem + INDIRECT_SUFFIX + p.suffix))


def read_label_map(path, arm_path=None, indirect_path=None) -> LabelMap:
    arm = read_class_ids(arm_path) > 0 if arm_path is not None else None
    indirect = read_class_ids(indirect_path) if indirect_path is not None else None
    return LabelMap(read_class_ids(path), arm=arm, indirect=indirect)


def write_label_map(path, labels: LabelMap, arm_path=None, indirect_path=None) -> list[Path]:
    """Write the class map and any present layers; returns the paths written.

    Layers go to ``arm_path`` / ``indirect_path`` when given, otherwise to the
    ``_arm`` / ``_indirect`` siblings of ``path``.
    """
    default_arm, default_indirect = sibling_paths(path)
    written = [Path(path)]
    write_class_ids(path, labels.classes)
    if labels.arm is not None:
        target = Path(arm_path or default_arm)
        write_class_ids(target, labels.arm.astype(np.uint8))
        written.append(target)
    if labels.indirect is not None:
        target = Path(indirect_path or default_indirect)
        write_class_ids(target, labels.indirect)
        written.append(target)
    return written


def read_boundary(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_boundary(path, boundary: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(boundary, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")
