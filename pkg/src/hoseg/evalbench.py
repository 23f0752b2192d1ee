"""Benchmark protocol: dataset-level metrics, the decode/CB/CCDA ablation grid and
the augmentation-quantity sweep."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ccda
from .dataio import Sample
from .maskcore import (BOUNDARY, CLASS_NAMES, HAND_CLASSES, OBJECT_CLASSES, SEGMENT_CLASSES, LabelMap,
                       MetricsReport, aggregate_metrics, confusion_counts, generate_contact_boundary,
                       label_counts)
from .segpipeline import Pipeline, TrainConfig, train_pipeline

log = logging.getLogger(__name__)


def config_hash(payload: Mapping) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def evaluate_run(predictions: Mapping[str, object], truth: Sequence[Sample], *,
                 classes: Sequence[int] = SEGMENT_CLASSES, boundary_radius: float = 5,
                 metadata: Mapping | None = None) -> MetricsReport:
    """Score predicted label maps against a ground-truth split.

    ``predictions`` maps sample names to a ``LabelMap`` or a
    ``(LabelMap, boundary mask)`` pair. A sample without a prediction is
    scored as all background and listed under ``metadata["missing"]``. The
    contact band is scored whenever any prediction carries one; its ground
    truth is the sample's stored band or one generated at ``boundary_radius``.
    """
    if not truth:
        raise ValueError("empty ground-truth split")
    with_boundary = any(isinstance(p, tuple) and p[1] is not None for p in predictions.values())
    per_image, missing = [], []
    for s in truth:
        pred = predictions.get(s.name)
        if pred is None:
            missing.append(s.name)
            labels, cb = LabelMap.empty(*s.labels.shape), None
        elif isinstance(pred, tuple):
            labels, cb = pred
        else:
            labels, cb = pred, None
        if labels.shape != s.labels.shape:
            raise ValueError(f"{s.name}: prediction size {labels.shape} != truth size {s.labels.shape}")
        counts = label_counts(labels, s.labels, classes)
        if with_boundary:
            t_cb = s.boundary if s.boundary is not None else generate_contact_boundary(s.labels, boundary_radius)
            p_cb = cb if cb is not None else np.zeros(s.labels.shape, bool)
            counts[BOUNDARY] = confusion_counts(p_cb, t_cb)
        per_image.append(counts)
    # the contact band is reported alongside, not averaged into the class means
    report = aggregate_metrics(per_image, list(classes))
    if with_boundary:
        report.per_class.update(aggregate_metrics(per_image, [BOUNDARY]).per_class)
    report.metadata.update(dict(metadata or {}))
    report.metadata["images"] = len(truth)
    report.metadata["missing"] = sorted(missing)
    return report


def group_iou(report: MetricsReport, classes: Sequence[int]) -> float:
    """Mean IoU over the given classes that occur in the ground truth."""
    return report.mean("iou", classes)


def predict_split(pipeline: Pipeline, samples: Sequence[Sample]) -> dict[str, object]:
    out = {}
    for s in samples:
        labels, cb = pipeline.predict(s.image)
        out[s.name] = (labels, cb)
    return out


# -----------------------------------------------------------------------------
# Report files
# -----------------------------------------------------------------------------

COLUMNS = [(1, "L-Hand"), (2, "R-Hand"), (3, "L-Obj"), (4, "R-Obj"), (5, "Two-Obj")]


def report_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def format_table(rows: Sequence[tuple[str, MetricsReport | None]], attr: str = "iou") -> str:
    """Aligned plain-text table of per-class values (x100) and means."""
    header = ["Cell"] + [name for _, name in COLUMNS] + ["Hand", "Object", "mIoU"]
    body = []
    for name, rep in rows:
        if rep is None:
            body.append([name] + ["failed"] + [""] * (len(header) - 2))
            continue
        vals = [getattr(rep.per_class[c], attr) * 100 if c in rep.per_class else float("nan")
                for c, _ in COLUMNS]
        body.append([name] + [f"{v:.2f}" for v in vals]
                    + [f"{group_iou(rep, HAND_CLASSES) * 100:.2f}",
                       f"{group_iou(rep, OBJECT_CLASSES) * 100:.2f}", f"{rep.miou * 100:.2f}"])
    widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(v).ljust(w) if i == 0 else str(v).rjust(w)
                       for i, (v, w) in enumerate(zip(r, widths))) for r in [header] + body]
    return "\n".join(lines) + "\n"


def run_id(config: Mapping, seed: int, dataset_id: str) -> str:
    return config_hash({"config": config, "seed": seed, "dataset": dataset_id})


def write_report(report: MetricsReport, out_dir, config: Mapping | None = None) -> Path:
    """Write report.json, report.txt and config.json into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report_json(report), encoding="utf-8")
    (out_dir / "report.txt").write_text(format_table([("run", report)]), encoding="utf-8")
    (out_dir / "config.json").write_text(json.dumps(dict(config or {}), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return out_dir


# -----------------------------------------------------------------------------
# Ablation
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationCell:
    decode: str  # "parallel" or "sequential"
    cb: bool = False
    ccda: bool = False

    def __post_init__(self):
        if self.decode not in ("parallel", "sequential"):
            raise ValueError(f"unknown decode {self.decode!r}")
        if self.decode == "parallel" and self.cb:
            raise ValueError("the contact boundary needs sequential decoding")

    @property
    def name(self) -> str:
        parts = ["Para. Decode" if self.decode == "parallel" else "Seq. Decode"]
        if self.cb:
            parts.append("CB")
        if self.ccda:
            parts.append("CCDA")
        return " + ".join(parts)

    @property
    def object_in_channels(self) -> int | None:
        """Input channels of the object stage (None for parallel decode)."""
        if self.decode == "parallel":
            return None
        return 6 if self.cb else 5


@dataclass
class AblationPlan:
    cells: list[AblationCell]

    @classmethod
    def default(cls) -> "AblationPlan":
        """The six rows: parallel, sequential, sequential + CB, each without/with CCDA."""
        return cls([AblationCell(d, cb, aug) for d, cb in (("parallel", False), ("sequential", False),
                                                            ("sequential", True))
                    for aug in (False, True)])

    @classmethod
    def grid(cls, decodes=("parallel", "sequential"), cbs=(False, True), ccdas=(False, True)) -> "AblationPlan":
        cells = [AblationCell(d, cb, a) for d in decodes for cb in cbs for a in ccdas
                 if not (d == "parallel" and cb)]
        return cls(cells)


@dataclass
class AblationData:
    train: list[Sample]
    test: list[Sample]
    # composites mixed into training for CCDA cells
    augmented: list[Sample] = field(default_factory=list)
    dataset_id: str = "data"


@dataclass
class AblationRow:
    cell: AblationCell
    report: MetricsReport | None
    error: str | None = None


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def __getitem__(self, cell: AblationCell) -> AblationRow:
        for r in self.rows:
            if r.cell == cell:
                return r
        raise KeyError(cell.name)

    def text(self) -> str:
        return format_table([(r.cell.name, r.report) for r in self.rows])

    def to_dict(self) -> dict:
        return {"rows": [{"cell": r.cell.name, "decode": r.cell.decode, "cb": r.cell.cb, "ccda": r.cell.ccda,
                          "report": r.report.to_dict() if r.report else None, "error": r.error}
                         for r in self.rows]}

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.txt").write_text(self.text(), encoding="utf-8")
        (out_dir / "ablation.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
        return out_dir


def run_cell(cell: AblationCell, data: AblationData, config: TrainConfig) -> MetricsReport:
    if cell.ccda and not data.augmented:
        raise ValueError(f"{cell.name}: CCDA cell needs augmented samples")
    train = list(data.train) + (list(data.augmented) if cell.ccda else [])
    cfg = replace(config, ccda=cell.ccda)
    pipe = train_pipeline(train, cfg, kind=cell.decode, with_boundary=cell.cb)
    preds = predict_split(pipe, data.test)
    return evaluate_run(preds, data.test, boundary_radius=cfg.boundary_radius, metadata={
        "cell": cell.name, "seed": cfg.seed, "config_hash": config_hash(cfg.to_dict()),
        "dataset_id": data.dataset_id,
    })


def run_ablation(plan: AblationPlan, data: AblationData, config: TrainConfig) -> AblationTable:
    """Train and evaluate every cell under one seed; a failing cell is recorded, not raised."""
    if not data.train or not data.test:
        raise ValueError("ablation needs training and test samples")
    rows = []
    for cell in plan.cells:
        try:
            rows.append(AblationRow(cell, run_cell(cell, data, config)))
        except Exception as e:  # noqa: BLE001 - one cell must not abort the table
            log.exception("ablation cell %s failed", cell.name)
            rows.append(AblationRow(cell, None, f"{type(e).__name__}: {e}"))
    return AblationTable(rows)


# -----------------------------------------------------------------------------
# Augmentation quantity sweep
# -----------------------------------------------------------------------------

@dataclass
class SweepPoint:
    n_total: int
    hand_iou: float
    object_iou: float
    error: str | None = None


def sweep_augmentation_quantity(counts: Sequence[int], data: AblationData, pool: ccda.BackgroundPool,
                                config: TrainConfig, *, k: int = ccda.DEFAULT_TOPK,
                                embedder: Callable | None = None, inpainter: Callable | None = None,
                                with_boundary: bool = True) -> list[SweepPoint]:
    """Train + evaluate the sequential model once per composite count."""
    if list(counts) != sorted(counts):
        raise ValueError("counts must be sorted ascending")
    embedder = embedder or ccda.HistogramEmbedder()
    inpainter = inpainter or ccda.DiffusionInpainter()
    points = []
    for n in counts:
        try:
            aug = ccda.generate_augmented_set(data.train, pool, embedder, inpainter, k=k, n_total=n,
                                              seed=config.seed) if n else ccda.AugmentResult([])
            cfg = replace(config, ccda=n > 0)
            pipe = train_pipeline(list(data.train) + ccda.as_samples(aug.records), cfg,
                                  kind="sequential", with_boundary=with_boundary)
            rep = evaluate_run(predict_split(pipe, data.test), data.test, boundary_radius=cfg.boundary_radius)
            points.append(SweepPoint(n, group_iou(rep, HAND_CLASSES), group_iou(rep, OBJECT_CLASSES)))
        except Exception as e:  # noqa: BLE001 - record the point and keep sweeping
            log.exception("sweep point %d failed", n)
            points.append(SweepPoint(n, float("nan"), float("nan"), f"{type(e).__name__}: {e}"))
    return points


def write_curve(points: Sequence[SweepPoint], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["n_total,hand_iou,object_iou,error"]
    lines += [f"{p.n_total},{p.hand_iou!r},{p.object_iou!r},{p.error or ''}" for p in points]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def describe_curve(points: Sequence[SweepPoint]) -> str:
    """Plain-language note on the curve's shape (peak location per metric)."""
    ok = [p for p in points if p.error is None]
    if not ok:
        return "no successful points"
    hand = max(ok, key=lambda p: p.hand_iou)
    obj = max(ok, key=lambda p: p.object_iou)
    return (f"hand IoU peaks at n={hand.n_total} ({hand.hand_iou:.3f}); "
            f"object IoU peaks at n={obj.n_total} ({obj.object_iou:.3f})")


__all__ = [
    "AblationCell", "AblationData", "AblationPlan", "AblationRow", "AblationTable", "SweepPoint",
    "evaluate_run", "format_table", "group_iou", "predict_split", "run_ablation", "run_cell", "run_id",
    "sweep_augmentation_quantity", "write_curve", "write_report", "CLASS_NAMES",
]
