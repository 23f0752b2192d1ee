"""Dataset layout, manifest files, validation, frame sampling and splitting.

On-disk layout under a dataset root, with shared basenames::

    image/<name>.png           RGB frame
    label/<name>.png           indexed class map (ids 0-5)
    label_arm/<name>.png       arm layer (optional)
    label_indirect/<name>.png  indirect-object layer (optional)
    cb/<name>.png              contact boundary, 0/255
    manifest.tsv               one tab-separated record per entry
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .maskcore import LabelMap, CLASS_NAMES, INDIRECT_CLASSES
from . import storage

IMAGE_DIR = "image"
LABEL_DIR = "label"
ARM_DIR = "label_arm"
INDIRECT_DIR = "label_indirect"
CB_DIR = "cb"
MANIFEST_NAME = "manifest.tsv"

SOURCES = ("ego4d", "epic-kitchens", "thu-read", "own", "youtube-test", "synthetic")
SPLITS = ("train", "val", "test")
EMPTY = "-"


@dataclass(frozen=True)
class Entry:
    image: str
    label: str
    arm: str | None = None
    indirect: str | None = None
    source: str = "synthetic"
    split: str | None = None
    # extension columns, e.g. foreground id / background id / rank / seed for composites
    extra: tuple[str, ...] = ()

    @property
    def name(self) -> str:
        return Path(self.image).stem

    def to_line(self) -> str:
        cols = [self.image, self.label, self.arm or EMPTY, self.indirect or EMPTY,
                self.source, self.split or EMPTY, *self.extra]
        return "\t".join(cols)

    @classmethod
    def from_line(cls, line: str) -> "Entry":
        cols = line.rstrip("\n").split("\t")
        if len(cols) < 6:
            raise ValueError(f"manifest record needs at least 6 tab-separated fields, got {len(cols)}")
        image, label, arm, indirect, source, split, *extra = cols
        if source not in SOURCES:
            raise ValueError(f"unknown source tag {source!r}")
        if split != EMPTY and split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return cls(image, label, None if arm == EMPTY else arm,
                   None if indirect == EMPTY else indirect, source,
                   None if split == EMPTY else split, tuple(extra))


@dataclass
class Manifest:
    root: Path
    entries: list[Entry] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def path(self, rel: str | None) -> Path | None:
        return None if rel is None else self.root / rel

    def load_image(self, entry: Entry) -> np.ndarray:
        return storage.read_image(self.root / entry.image)

    def load_labels(self, entry: Entry) -> LabelMap:
        return storage.read_label_map(self.root / entry.label, self.path(entry.arm),
                                      self.path(entry.indirect))

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(e.to_line() + "\n" for e in self.entries), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path, root=None) -> "Manifest":
        path = Path(path)
        entries = [Entry.from_line(line) for line in path.read_text(encoding="utf-8").splitlines()
                   if line.strip() and not line.startswith("#")]
        return cls(Path(root) if root is not None else path.parent, entries)

    @classmethod
    def scan(cls, root, source: str = "synthetic") -> "Manifest":
        """Build a manifest from the directory layout (no split assigned)."""
        root = Path(root)
        entries = []
        for img in sorted((root / IMAGE_DIR).glob("*.png")):
            name = img.name
            arm = root / ARM_DIR / name
            indirect = root / INDIRECT_DIR / name
            entries.append(Entry(
                f"{IMAGE_DIR}/{name}", f"{LABEL_DIR}/{name}",
                f"{ARM_DIR}/{name}" if arm.exists() else None,
                f"{INDIRECT_DIR}/{name}" if indirect.exists() else None,
                source,
            ))
        return cls(root, entries)


def open_manifest(root) -> Manifest:
    """Read ``root/manifest.tsv`` if present, otherwise scan the layout."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    if (root / MANIFEST_NAME).exists():
        return Manifest.read(root / MANIFEST_NAME, root)
    return Manifest.scan(root)


def write_sample(root, name: str, image: np.ndarray, labels: LabelMap, *,
                 boundary: np.ndarray | None = None, source: str = "synthetic",
                 split: str | None = None, extra: tuple[str, ...] = ()) -> Entry:
    """Write one sample in the dataset layout and return its manifest entry."""
    root = Path(root)
    fname = f"{name}.png"
    storage.write_image(root / IMAGE_DIR / fname, image)
    arm = f"{ARM_DIR}/{fname}" if labels.arm is not None else None
    indirect = f"{INDIRECT_DIR}/{fname}" if labels.indirect is not None else None
    storage.write_label_map(root / LABEL_DIR / fname, labels,
                            arm_path=root / arm if arm else None,
                            indirect_path=root / indirect if indirect else None)
    if boundary is not None:
        storage.write_boundary(root / CB_DIR / fname, boundary)
    return Entry(f"{IMAGE_DIR}/{fname}", f"{LABEL_DIR}/{fname}", arm, indirect, source, split, extra)


# -----------------------------------------------------------------------------
# Validation
# -----------------------------------------------------------------------------

@dataclass
class EntryResult:
    index: int
    image: str
    reasons: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.reasons


@dataclass
class ValidationReport:
    results: list[EntryResult]

    @property
    def failures(self) -> list[EntryResult]:
        return [r for r in self.results if not r.ok]

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "entries": len(self.results),
            "failures": [{"index": r.index, "image": r.image, "reasons": r.reasons}
                         for r in self.failures],
        }


def _check_ids(ids: np.ndarray, allowed, what: str) -> list[str]:
    bad = np.setdiff1d(np.unique(ids), list(allowed))
    return [f"illegal class id {int(b)} in {what}" for b in bad]


def _validate_entry(manifest: Manifest, entry: Entry) -> list[str]:
    reasons = []
    paths = {"image": entry.image, "label": entry.label, "arm": entry.arm, "indirect": entry.indirect}
    for kind, rel in paths.items():
        if rel is not None and not (manifest.root / rel).is_file():
            reasons.append(f"missing file: {kind} {rel}")
    if reasons:
        return reasons
    if entry.split is not None and entry.split not in SPLITS:
        reasons.append(f"unknown split {entry.split!r}")

    try:
        shape = storage.image_size(manifest.root / entry.image)
        ids = storage.read_class_ids(manifest.root / entry.label)
    except (OSError, ValueError) as e:
        return [f"unreadable file: {e}"]
    if ids.shape != shape:
        reasons.append(f"dimension mismatch: label {ids.shape[1]}x{ids.shape[0]} "
                       f"vs image {shape[1]}x{shape[0]}")
    reasons += _check_ids(ids, CLASS_NAMES, "label")

    for kind, rel in (("arm", entry.arm), ("indirect", entry.indirect)):
        if rel is None:
            continue
        try:
            layer = storage.read_class_ids(manifest.root / rel)
        except (OSError, ValueError) as e:
            reasons.append(f"unreadable file: {e}")
            continue
        if layer.shape != ids.shape:
            reasons.append(f"dimension mismatch: {kind} layer {layer.shape} vs label {ids.shape}")
            continue
        if kind == "arm":
            reasons += _check_ids(layer, (0, 1), "arm layer")
        else:
            reasons += _check_ids(layer, INDIRECT_CLASSES, "indirect layer")
            if np.any((layer > 0) & (ids > 0)):
                reasons.append("indirect layer overlaps hand/object classes")
    return reasons


def validate_dataset(manifest: Manifest) -> ValidationReport:
    """Check every entry for missing files, dimension mismatches and illegal ids.

    Read-only. Raises ``FileNotFoundError`` if the root itself is missing.
    """
    if not manifest.root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {manifest.root}")
    return ValidationReport([
        EntryResult(i, e.image, _validate_entry(manifest, e)) for i, e in enumerate(manifest.entries)
    ])


# -----------------------------------------------------------------------------
# Frame sampling
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameSampleSpec:
    fps: float
    interval_seconds: float = 3.0
    interaction_filter: Callable[[object], bool] | None = None

    def __post_init__(self):
        if not self.interval_seconds > 0:
            raise ValueError("interval_seconds must be > 0")
        if not self.fps > 0:
            raise ValueError("fps must be > 0")


class MaskAreaFilter:
    """Keep frames whose hand-object mask covers at least ``min_fraction`` of pixels.

    ``segment`` maps a frame to a mask; without it the frame is taken to be
    the mask already.
    """

    def __init__(self, min_fraction: float = 0.01, segment: Callable | None = None):
        self.min_fraction = min_fraction
        self.segment = segment

    def __call__(self, frame) -> bool:
        mask = self.segment(frame) if self.segment is not None else frame
        mask = np.asarray(mask.classes if isinstance(mask, LabelMap) else mask)
        return bool(np.count_nonzero(mask) >= self.min_fraction * mask.size)


def sample_frames(video: Sequence, spec: FrameSampleSpec) -> list[int]:
    """Indices floor(k * interval * fps) for k = 0, 1, ... inside the video.

    Indices that collide after flooring are emitted once; frames rejected by
    ``spec.interaction_filter`` are dropped.
    """
    n = len(video)
    if n == 0:
        raise ValueError("video has no frames")
    step = Fraction(spec.interval_seconds) * Fraction(spec.fps)
    indices: list[int] = []
    k = 0
    while True:
        idx = math.floor(k * step)
        if idx >= n:
            break
        if not indices or idx > indices[-1]:
            indices.append(idx)
        k += 1
    if spec.interaction_filter is not None:
        indices = [i for i in indices if spec.interaction_filter(video[i])]
    return indices


# -----------------------------------------------------------------------------
# Splitting
# -----------------------------------------------------------------------------

def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to earlier splits."""
    if any(r <= 0 for r in ratios):
        raise ValueError(f"split ratios must be positive, got {tuple(ratios)}")
    total = sum(Fraction(r) for r in ratios)
    quotas = [Fraction(r) / total * n for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(manifest: Manifest, ratios: Sequence[float] = (8, 1, 1), seed: int = 0,
                  names: Sequence[str] = SPLITS) -> Manifest:
    """Deterministically shuffle entries and assign them to splits."""
    if len(ratios) != len(names):
        raise ValueError("one ratio per split required")
    n = len(manifest.entries)
    if n < len(names):
        raise ValueError(f"cannot split {n} entries into {len(names)} splits")
    sizes = split_sizes(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    assignment = [None] * n
    start = 0
    for name, size in zip(names, sizes):
        for i in order[start : start + size]:
            assignment[i] = name
        start += size
    entries = [replace(e, split=s) for e, s in zip(manifest.entries, assignment)]
    return Manifest(manifest.root, entries)


def subset(manifest: Manifest, split: str | Iterable[str]) -> Manifest:
    wanted = {split} if isinstance(split, str) else set(split)
    return Manifest(manifest.root, [e for e in manifest.entries if e.split in wanted])


@dataclass
class Sample:
    """An in-memory labeled frame."""

    name: str
    image: np.ndarray
    labels: LabelMap
    boundary: np.ndarray | None = None


def load_samples(manifest: Manifest, split: str | None = None) -> list[Sample]:
    entries = manifest.entries if split is None else manifest.split(split)
    out = []
    for e in entries:
        cb = manifest.root / CB_DIR / Path(e.label).name
        out.append(Sample(e.name, manifest.load_image(e), manifest.load_labels(e),
                          storage.read_boundary(cb) if cb.exists() else None))
    return out
