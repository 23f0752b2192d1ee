"""Hand -> contact boundary -> object cascade, the parallel baseline, and training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .dataio import Sample
from .maskcore import (HAND_CLASSES, LEFT_HAND, OBJECT_CLASSES, RIGHT_HAND, LabelMap,
                       generate_contact_boundary)

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageSpec:
    stage: str
    in_channels: int
    out_channels: int
    loss: str  # "ce" or "bce"

    @property
    def extra_channels(self) -> int:
        return self.in_channels - 3


HAND = StageSpec("hand", 3, 3, "ce")
BOUNDARY = StageSpec("boundary", 5, 1, "bce")
OBJECT = StageSpec("object", 6, 4, "ce")
# object stage of the cascade without the contact-boundary stage
OBJECT_NO_CB = StageSpec("object", 5, 4, "ce")
PARALLEL = StageSpec("parallel", 3, 6, "ce")

STAGES = {"hand": HAND, "boundary": BOUNDARY, "object": OBJECT, "parallel": PARALLEL}


def stage_spec(name: str, with_boundary: bool = True) -> StageSpec:
    if name == "object" and not with_boundary:
        return OBJECT_NO_CB
    try:
        return STAGES[name]
    except KeyError:
        raise ValueError(f"unknown stage {name!r}") from None


@dataclass
class TrainConfig:
    iterations: int = 80000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    # "poly" decays lr by (1 - it/iterations) ** 0.9 down to min_lr; "fixed" keeps it
    lr_policy: str = "poly"
    min_lr: float = 1e-4
    flip: bool = True
    photometric: bool = True
    ccda: bool = False
    teacher_forcing: bool = True
    boundary_radius: float = 5
    seed: int = 0
    hidden: int = 16
    dilations: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("iterations, batch_size and hidden must be positive")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative")
        self.dilations = tuple(int(d) for d in self.dilations)
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError("dilations must be positive integers")
        if self.lr_policy not in ("poly", "fixed"):
            raise ValueError(f"unknown lr_policy {self.lr_policy!r}")

    def lr_at(self, it: int) -> float:
        if self.lr_policy == "fixed" or self.lr == 0:
            return self.lr
        return (self.lr - self.min_lr) * (1 - it / self.iterations) ** 0.9 + self.min_lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {', '.join(unknown)}")
        return cls(**data)


# -----------------------------------------------------------------------------
# Inputs and targets
# -----------------------------------------------------------------------------

def normalize_image(image: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [-1, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {image.shape}")
    return np.moveaxis(image.astype(np.float32) / 127.5 - 1.0, -1, 0)


def hand_channels(labels: LabelMap) -> np.ndarray:
    """(2, H, W) one-hot left/right hand masks."""
    return np.stack([labels.classes == c for c in HAND_CLASSES]).astype(np.float32)


def assemble_stage_inputs(stage: StageSpec, image: np.ndarray, prior: Sequence[np.ndarray] = ()) -> np.ndarray:
    """Stack the normalized image with earlier-stage mask channels.

    ``prior`` holds (C, H, W) or (H, W) probability maps in stage order:
    the two hand channels, then the boundary channel.
    """
    rgb = normalize_image(image)
    extras = []
    for p in prior:
        p = np.asarray(p, dtype=np.float32)
        extras.append(p[None] if p.ndim == 2 else p)
    n_extra = sum(p.shape[0] for p in extras)
    if n_extra != stage.extra_channels:
        raise ValueError(f"{stage.stage} stage takes {stage.extra_channels} prior channels, got {n_extra}")
    for p in extras:
        if p.shape[1:] != rgb.shape[1:]:
            raise ValueError(f"prior spatial size {p.shape[1:]} != image size {rgb.shape[1:]}")
        if p.size and (p.min() < 0 or p.max() > 1):
            raise ValueError("prior mask channels must be probabilities in [0, 1]")
    x = np.concatenate([rgb, *extras], axis=0) if extras else rgb
    assert x.shape[0] == stage.in_channels
    return x


def stage_target(stage: StageSpec, labels: LabelMap, boundary: np.ndarray | None = None) -> np.ndarray:
    c = labels.classes
    if stage.stage == "hand":
        return np.select([c == LEFT_HAND, c == RIGHT_HAND], [1, 2], 0).astype(np.int64)
    if stage.stage == "object":
        return np.select([c == k for k in OBJECT_CLASSES], [1, 2, 3], 0).astype(np.int64)
    if stage.stage == "parallel":
        return c.astype(np.int64)
    if boundary is None:
        raise ValueError("boundary stage needs a boundary target")
    return boundary.astype(np.float32)


def boundary_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean per-pixel binary cross entropy between boundary probabilities and a binary map.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; values outside [0, 1] are rejected.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {t.shape}")
    if np.isnan(p).any() or p.min() < 0 or p.max() > 1:
        raise ValueError("boundary probabilities must lie in [0, 1]")
    p = np.clip(p, EPS, 1 - EPS)
    return float(-(t * np.log(p) + (1 - t) * np.log1p(-p)).mean())


# -----------------------------------------------------------------------------
# Augmentation
# -----------------------------------------------------------------------------

# horizontal flip turns the wearer's left hand into the right one
FLIP_SWAP = np.array([0, 2, 1, 4, 3, 5], dtype=np.uint8)


def flip_sample(image: np.ndarray, labels: LabelMap, boundary: np.ndarray | None):
    arm = labels.arm[:, ::-1] if labels.arm is not None else None
    flipped = LabelMap(FLIP_SWAP[labels.classes[:, ::-1]], arm=arm)
    return (image[:, ::-1].copy(), flipped,
            boundary[:, ::-1].copy() if boundary is not None else None)


def photometric_distort(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random brightness (+-32), contrast (x0.5-1.5) and saturation (x0.5-1.5), each with p=0.5."""
    img = image.astype(np.float32)
    if rng.random() < 0.5:
        img = img + rng.uniform(-32, 32)
    if rng.random() < 0.5:
        img = img * rng.uniform(0.5, 1.5)
    if rng.random() < 0.5:
        gray = img.mean(axis=2, keepdims=True)
        img = gray + (img - gray) * rng.uniform(0.5, 1.5)
    return np.clip(img, 0, 255).astype(np.uint8)


# -----------------------------------------------------------------------------
# Training
# -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    predictor: object
    losses: list[float] = field(default_factory=list)
    stage: StageSpec | None = None

    def write_losses(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["iteration,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(self.losses)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def make_predictor(stage: StageSpec, config: TrainConfig, seed_offset: int = 0) -> nn.ReferencePredictor:
    return nn.ReferencePredictor(stage.in_channels, stage.out_channels, hidden=config.hidden,
                                 dilations=config.dilations, seed=config.seed + seed_offset)


def _with_boundaries(data: Sequence[Sample], radius: float) -> list[Sample]:
    out = []
    for s in data:
        b = s.boundary if s.boundary is not None else generate_contact_boundary(s.labels, radius)
        out.append(Sample(s.name, s.image, s.labels, b))
    return out


def _predicted_priors(stage: StageSpec, images: np.ndarray, priors: dict) -> list[np.ndarray]:
    """Earlier-stage outputs for a (N, 3, H, W) normalized batch, channels first."""
    hand_maps = np.stack([one_hot_hands(a) for a in priors["hand"](images).argmax(axis=1)])
    if stage.extra_channels == 2:
        return [hand_maps]
    b_prob = nn.sigmoid(priors["boundary"](np.concatenate([images, hand_maps], axis=1)))
    return [hand_maps, b_prob]


def _batch(stage: StageSpec, samples: Sequence[Sample], config: TrainConfig, priors: dict | None):
    """Channels-last input batch and targets for one iteration."""
    images = np.stack([normalize_image(s.image) for s in samples])
    if stage.extra_channels == 0:
        extras = []
    elif config.teacher_forcing:
        extras = [np.stack([hand_channels(s.labels) for s in samples])]
        if stage.extra_channels == 3:
            extras.append(np.stack([s.boundary for s in samples]).astype(np.float32)[:, None])
    else:
        extras = _predicted_priors(stage, images, priors)
    x = np.concatenate([images, *extras], axis=1)
    if x.shape[1] != stage.in_channels:
        raise ValueError(f"{stage.stage} stage takes {stage.in_channels} channels, got {x.shape[1]}")
    t = np.stack([stage_target(stage, s.labels, s.boundary) for s in samples])
    return np.moveaxis(x, 1, -1), t


def train_stage(stage: StageSpec, predictor, data: Sequence[Sample], config: TrainConfig,
                priors: dict | None = None) -> TrainResult:
    """Train one stage with seeded SGD; returns the predictor and per-iteration loss.

    Later stages see ground-truth prior channels when ``config.teacher_forcing``
    is set; otherwise ``priors`` must map "hand" (and "boundary") to trained
    predictors whose outputs are used instead.
    """
    if not data:
        raise ValueError("no training data")
    if predictor.in_channels != stage.in_channels or predictor.out_channels != stage.out_channels:
        raise ValueError(f"predictor ({predictor.in_channels}->{predictor.out_channels}) does not match "
                         f"{stage.stage} stage ({stage.in_channels}->{stage.out_channels})")
    if not config.teacher_forcing and stage.extra_channels and not priors:
        raise ValueError("predicted-prior training needs trained earlier-stage predictors")
    data = _with_boundaries(data, config.boundary_radius)
    rng = np.random.default_rng(config.seed)
    opt = nn.SGD(predictor.params, config.lr, config.momentum, config.weight_decay)
    losses = []
    for it in range(config.iterations):
        batch = []
        for idx in rng.integers(0, len(data), config.batch_size):
            s = data[idx]
            image, labels, boundary = s.image, s.labels, s.boundary
            if config.flip and rng.random() < 0.5:
                image, labels, boundary = flip_sample(image, labels, boundary)
            if config.photometric:
                image = photometric_distort(image, rng)
            batch.append(Sample(s.name, image, labels, boundary))
        x, t = _batch(stage, batch, config, priors)
        logits = predictor.forward_train(x)
        if stage.loss == "bce":
            loss, grad = nn.bce_with_logits(logits, t[..., None])
        else:
            loss, grad = nn.cross_entropy(logits, t)
        if not math.isfinite(loss):
            raise TrainingError(f"{stage.stage} stage loss diverged ({loss})", it)
        opt.step(predictor.backward(grad), lr=config.lr_at(it))
        losses.append(loss)
        if it % 500 == 0:
            log.debug("%s it=%d loss=%.4f", stage.stage, it, loss)
    return TrainResult(predictor, losses, stage)


# -----------------------------------------------------------------------------
# Inference
# -----------------------------------------------------------------------------

def one_hot_hands(hand_argmax: np.ndarray) -> np.ndarray:
    return np.stack([hand_argmax == 1, hand_argmax == 2]).astype(np.float32)


def _forward(predictor, x: np.ndarray, stage: StageSpec) -> np.ndarray:
    if predictor.in_channels != stage.in_channels or predictor.out_channels != stage.out_channels:
        raise PipelineError(f"{stage.stage} predictor declares {predictor.in_channels}->"
                            f"{predictor.out_channels}, stage needs {stage.in_channels}->{stage.out_channels}")
    out = np.asarray(predictor(x[None]))[0]
    if out.shape != (stage.out_channels,) + x.shape[1:]:
        raise PipelineError(f"{stage.stage} stage returned shape {out.shape}, expected "
                            f"{(stage.out_channels,) + x.shape[1:]}")
    return out


@dataclass
class StageOutputs:
    """Normalized per-stage outputs of one cascade pass."""

    hand_probs: np.ndarray
    boundary_prob: np.ndarray | None
    object_probs: np.ndarray


def merge_labels(hand_argmax: np.ndarray, object_argmax: np.ndarray) -> LabelMap:
    """Object classes where the object stage fires, hands on top."""
    classes = np.zeros(hand_argmax.shape, np.uint8)
    for k, cls in enumerate(OBJECT_CLASSES, start=1):
        classes[object_argmax == k] = cls
    classes[hand_argmax == 1] = LEFT_HAND
    classes[hand_argmax == 2] = RIGHT_HAND
    return LabelMap(classes)


def sequential_outputs(image: np.ndarray, hand, boundary, obj) -> StageOutputs:
    hand_probs = nn.softmax(_forward(hand, assemble_stage_inputs(HAND, image), HAND), axis=0)
    hand_maps = one_hot_hands(hand_probs.argmax(axis=0))
    prior = [hand_maps]
    b_prob = None
    if boundary is not None:
        b_logit = _forward(boundary, assemble_stage_inputs(BOUNDARY, image, prior), BOUNDARY)[0]
        b_prob = nn.sigmoid(b_logit)
        prior.append(b_prob)
    ospec = OBJECT if boundary is not None else OBJECT_NO_CB
    obj_probs = nn.softmax(_forward(obj, assemble_stage_inputs(ospec, image, prior), ospec), axis=0)
    return StageOutputs(hand_probs, b_prob, obj_probs)


def run_sequential_inference(image: np.ndarray, predictors: Sequence, threshold: float = 0.5):
    """Predict hands, then the contact band, then interacting objects.

    ``predictors`` is (hand, boundary, object); boundary may be ``None`` for
    the cascade without the contact-boundary stage, in which case the
    returned boundary map is empty. Returns ``(LabelMap, boundary mask)``.
    """
    hand, boundary, obj = predictors
    out = sequential_outputs(image, hand, boundary, obj)
    labels = merge_labels(out.hand_probs.argmax(axis=0), out.object_probs.argmax(axis=0))
    if out.boundary_prob is None:
        cb = np.zeros(labels.shape, bool)
    else:
        cb = out.boundary_prob >= threshold
    return labels, cb


def run_parallel_inference(image: np.ndarray, predictor) -> LabelMap:
    """Per-pixel argmax over background + five classes; ties go to the lower id."""
    if predictor.out_channels != 6:
        raise ValueError(f"parallel decode needs 6 output channels, predictor has {predictor.out_channels}")
    logits = _forward(predictor, assemble_stage_inputs(PARALLEL, image), PARALLEL)
    return LabelMap(logits.argmax(axis=0).astype(np.uint8))


# -----------------------------------------------------------------------------
# Whole pipelines
# -----------------------------------------------------------------------------

@dataclass
class Pipeline:
    """Trained predictors for one decode style plus their loss curves."""

    kind: str  # "sequential" or "parallel"
    predictors: dict
    losses: dict = field(default_factory=dict)
    threshold: float = 0.5

    @property
    def with_boundary(self) -> bool:
        return self.predictors.get("boundary") is not None

    def predict(self, image: np.ndarray):
        """(LabelMap, boundary mask or None) for one image."""
        if self.kind == "parallel":
            return run_parallel_inference(image, self.predictors["parallel"]), None
        p = self.predictors
        labels, cb = run_sequential_inference(image, (p["hand"], p.get("boundary"), p["object"]),
                                              self.threshold)
        return labels, (cb if self.with_boundary else None)

    def save(self, out_dir, config: TrainConfig) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, pred in self.predictors.items():
            if pred is None:
                continue
            spec = stage_spec(name, self.with_boundary)
            path = out_dir / f"{name}.ckpt.npz"
            nn.save_checkpoint(path, pred.params, {
                "stage": asdict(spec), "model": pred.config(), "pipeline": self.kind,
                "train_config": config.to_dict(),
            })
            written.append(path)
            if name in self.losses:
                written.append(TrainResult(pred, self.losses[name]).write_losses(out_dir / f"{name}.loss.csv"))
        return written

    @classmethod
    def load(cls, ckpt_dir, threshold: float = 0.5) -> "Pipeline":
        ckpt_dir = Path(ckpt_dir)
        predictors = {}
        kind = None
        for path in sorted(ckpt_dir.glob("*.ckpt.npz")):
            params, header = nn.load_checkpoint(path)
            model = header["model"]
            pred = nn.ReferencePredictor(model["in_channels"], model["out_channels"],
                                         hidden=model["hidden"], dilations=model["dilations"],
                                         dtype=model["dtype"])
            pred.set_params(params)
            predictors[header["stage"]["stage"]] = pred
            kind = header["pipeline"]
        if kind is None:
            raise FileNotFoundError(f"no checkpoints in {ckpt_dir}")
        return cls(kind, predictors, threshold=threshold)


def train_pipeline(data: Sequence[Sample], config: TrainConfig, *, kind: str = "sequential",
                   with_boundary: bool = True) -> Pipeline:
    """Train every stage of a decode style on ``data`` (already including any composites)."""
    if kind == "parallel":
        res = train_stage(PARALLEL, make_predictor(PARALLEL, config), data, config)
        return Pipeline("parallel", {"parallel": res.predictor}, {"parallel": res.losses})
    if kind != "sequential":
        raise ValueError(f"unknown pipeline kind {kind!r}")
    stages = [HAND] + ([BOUNDARY] if with_boundary else []) + [stage_spec("object", with_boundary)]
    predictors: dict = {"boundary": None}
    losses = {}
    for offset, stage in enumerate(stages):
        priors = None if config.teacher_forcing else predictors
        res = train_stage(stage, make_predictor(stage, config, offset), data, config, priors)
        predictors[stage.stage] = res.predictor
        losses[stage.stage] = res.losses
    return Pipeline("sequential", predictors, losses)
