"""Per-hand interaction state classification.

Each image carries one state per hand. Mask channels from the segmentation
label map (hard, from ground truth) or from predicted probabilities (soft)
can be stacked onto the RGB input.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .maskcore import HAND_CLASSES, OBJECT_CLASSES, LabelMap, disk
from .segpipeline import TrainingError, normalize_image

log = logging.getLogger(__name__)

STATES = ("portable", "stationary", "no-contact", "self-contact", "not-exist")
STATE_INDEX = {s: i for i, s in enumerate(STATES)}
MODES = ("rgb", "rgb+hand", "rgb+hand+object")
MODE_CHANNELS = {"rgb": 3, "rgb+hand": 5, "rgb+hand+object": 8}


def _check_state(state: str) -> str:
    if state not in STATE_INDEX:
        raise ValueError(f"unknown hand state {state!r}; expected one of {', '.join(STATES)}")
    return state


@dataclass(frozen=True)
class HandState:
    left: str
    right: str

    def __post_init__(self):
        _check_state(self.left)
        _check_state(self.right)

    @property
    def indices(self) -> tuple[int, int]:
        return STATE_INDEX[self.left], STATE_INDEX[self.right]

    @classmethod
    def from_indices(cls, left: int, right: int) -> "HandState":
        return cls(STATES[int(left)], STATES[int(right)])


def _mode_classes(mode: str) -> tuple[int, ...]:
    if mode not in MODE_CHANNELS:
        raise ValueError(f"unknown input mode {mode!r}; expected one of {', '.join(MODES)}")
    if mode == "rgb":
        return ()
    return HAND_CLASSES + (OBJECT_CLASSES if mode == "rgb+hand+object" else ())


def build_state_input(image: np.ndarray, mode: str = "rgb", labels: LabelMap | np.ndarray | None = None) -> np.ndarray:
    """(C, H, W) float32 classifier input with C = 3, 5 or 8.

    ``labels`` is a LabelMap (hard one-vs-rest masks) or a (K, H, W) array of
    probabilities in the mode's channel order: left hand, right hand, then
    left, right and two-hand object.
    """
    classes = _mode_classes(mode)
    rgb = normalize_image(image)
    if not classes:
        if labels is not None:
            raise ValueError("rgb mode takes no mask channels")
        return rgb
    if labels is None:
        raise ValueError(f"mode {mode!r} needs labels")
    if isinstance(labels, LabelMap):
        masks = np.stack([labels.classes == c for c in classes]).astype(np.float32)
    else:
        masks = np.asarray(labels, dtype=np.float32)
        if masks.ndim != 3 or masks.shape[0] != len(classes):
            raise ValueError(f"mode {mode!r} needs {len(classes)} mask channels, got shape {masks.shape}")
        if not np.isfinite(masks).all() or masks.min() < 0 or masks.max() > 1:
            raise ValueError("soft mask channels must lie in [0, 1]")
    if masks.shape[1:] != rgb.shape[1:]:
        raise ValueError(f"mask size {masks.shape[1:]} != image size {rgb.shape[1:]}")
    return np.concatenate([rgb, masks])


def mask_source(labels) -> str:
    """Run-metadata flag: "hard" for label maps, "soft" for probabilities."""
    return "none" if labels is None else "hard" if isinstance(labels, LabelMap) else "soft"


# -----------------------------------------------------------------------------
# Reference classifier
# -----------------------------------------------------------------------------

class StateClassifier:
    """Conv trunk, global average pooling and two 5-way linear heads."""

    def __init__(self, in_channels: int, *, hidden: int = 16, dilations: Sequence[int] = (1, 2),
                 seed: int = 0, dtype=np.float32):
        self.in_channels = in_channels
        self.hidden = hidden
        self.dilations = tuple(dilations)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.trunk = nn.ConvStack([in_channels] + [hidden] * len(self.dilations), self.dilations, rng,
                                  dtype=self.dtype, final_relu=True)
        self.heads = [nn.Linear(hidden, len(STATES), rng, dtype=self.dtype) for _ in range(2)]
        self._hw = None

    @property
    def params(self) -> list[np.ndarray]:
        return self.trunk.params + [p for h in self.heads for p in h.params]

    def _features(self, x_nhwc: np.ndarray, train: bool) -> np.ndarray:
        if x_nhwc.shape[-1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x_nhwc.shape[-1]}")
        f = self.trunk.forward(x_nhwc.astype(self.dtype, copy=False), train)
        self._hw = f.shape[1:3]
        return f.mean(axis=(1, 2))

    def forward_train(self, x_nhwc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = self._features(x_nhwc, True)
        return self.heads[0].forward(g, True), self.heads[1].forward(g, True)

    def backward(self, grad_left: np.ndarray, grad_right: np.ndarray) -> list[np.ndarray]:
        dl, gl = self.heads[0].backward(grad_left.astype(self.dtype))
        dr, gr = self.heads[1].backward(grad_right.astype(self.dtype))
        h, w = self._hw
        dg = (dl + dr) / (h * w)
        df = np.broadcast_to(dg[:, None, None, :], (dg.shape[0], h, w, dg.shape[1]))
        _, gt = self.trunk.backward(np.ascontiguousarray(df))
        return gt + gl + gr

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Left and right scores for (C, H, W) or (N, C, H, W) input."""
        single = x.ndim == 3
        xb = x[None] if single else x
        if xb.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {xb.shape[1]}")
        g = self._features(np.moveaxis(xb, 1, -1), False)
        left, right = self.heads[0].forward(g), self.heads[1].forward(g)
        return (left[0], right[0]) if single else (left, right)

    def predict(self, x: np.ndarray) -> list[HandState]:
        left, right = self(x if x.ndim == 4 else x[None])
        return [HandState.from_indices(a, b) for a, b in zip(left.argmax(1), right.argmax(1))]

    def config(self) -> dict:
        return {"kind": "state", "in_channels": self.in_channels, "hidden": self.hidden,
                "dilations": list(self.dilations), "dtype": self.dtype.name}

    def save(self, path, header: dict | None = None) -> None:
        nn.save_checkpoint(path, self.params, {"model": self.config(), **(header or {})})

    @classmethod
    def load(cls, path) -> tuple["StateClassifier", dict]:
        params, header = nn.load_checkpoint(path)
        m = header["model"]
        if m.get("kind") != "state":
            raise ValueError(f"{path}: not a state classifier checkpoint")
        clf = cls(m["in_channels"], hidden=m["hidden"], dilations=m["dilations"], dtype=m["dtype"])
        for p, v in zip(clf.params, params, strict=True):
            p[...] = v
        return clf, header


# -----------------------------------------------------------------------------
# Training
# -----------------------------------------------------------------------------

@dataclass
class StateSample:
    name: str
    image: np.ndarray
    labels: LabelMap | None
    state: HandState


@dataclass
class StateTrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    hidden: int = 16
    dilations: tuple = (1, 2)
    seed: int = 0

    def __post_init__(self):
        self.dilations = tuple(self.dilations)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StateTrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown state config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    left_accuracy: float
    right_accuracy: float


@dataclass
class StateTrainResult:
    classifier: StateClassifier
    mode: str
    log: list[EpochLog] = field(default_factory=list)

    def write_log(self, path) -> Path:
        path = Path(path)
        lines = ["epoch,loss,left_accuracy,right_accuracy"]
        lines += [f"{e.epoch},{e.loss!r},{e.left_accuracy!r},{e.right_accuracy!r}" for e in self.log]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def stack_inputs(samples: Sequence[StateSample], mode: str) -> np.ndarray:
    """(N, C, H, W) inputs for a list of samples."""
    return np.stack([build_state_input(s.image, mode, s.labels if mode != "rgb" else None) for s in samples])


def train_state_classifier(data: Sequence[StateSample], mode: str = "rgb",
                           config: StateTrainConfig | None = None) -> StateTrainResult:
    """Minibatch SGD on the sum of both heads' cross-entropy."""
    config = config or StateTrainConfig()
    if not data:
        raise ValueError("no training samples")
    x = np.moveaxis(stack_inputs(data, mode), 1, -1)
    y = np.array([s.state.indices for s in data])
    clf = StateClassifier(x.shape[-1], hidden=config.hidden, dilations=config.dilations, seed=config.seed)
    opt = nn.SGD(clf.params, config.lr, config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    result = StateTrainResult(clf, mode)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total, correct = 0.0, np.zeros(2)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            left, right = clf.forward_train(x[idx])
            loss_l, grad_l = nn.cross_entropy(left, y[idx, 0])
            loss_r, grad_r = nn.cross_entropy(right, y[idx, 1])
            loss = loss_l + loss_r
            if not np.isfinite(loss):
                raise TrainingError("non-finite state loss", step)
            opt.step(clf.backward(grad_l, grad_r))
            total += loss * len(idx)
            correct += [(left.argmax(1) == y[idx, 0]).sum(), (right.argmax(1) == y[idx, 1]).sum()]
            step += 1
        entry = EpochLog(epoch, float(total / len(data)), *(float(c / len(data)) for c in correct))
        log.info("epoch %d loss %.4f acc L %.3f R %.3f", entry.epoch, entry.loss,
                 entry.left_accuracy, entry.right_accuracy)
        result.log.append(entry)
    return result


def predict_states(classifier: StateClassifier, samples: Sequence[StateSample], mode: str) -> list[HandState]:
    return classifier.predict(stack_inputs(samples, mode))


# -----------------------------------------------------------------------------
# Metrics
# -----------------------------------------------------------------------------

@dataclass
class HeadMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray  # truth x prediction over STATES

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "confusion": self.confusion.tolist()}


def head_metrics(pred: Sequence[str], truth: Sequence[str]) -> HeadMetrics:
    """Accuracy and macro precision/recall/F1 for one head.

    The macro average runs over states seen in either truth or prediction; an
    undefined ratio (no predictions / no truth of a state) counts as 0.
    """
    if len(pred) != len(truth):
        raise ValueError(f"{len(pred)} predictions for {len(truth)} targets")
    if not truth:
        raise ValueError("no examples to score")
    k = len(STATES)
    cm = np.zeros((k, k), np.int64)
    for p, t in zip(pred, truth):
        cm[STATE_INDEX[_check_state(t)], STATE_INDEX[_check_state(p)]] += 1
    tp = np.diag(cm).astype(float)
    n_pred, n_true = cm.sum(0), cm.sum(1)
    prec = np.divide(tp, n_pred, out=np.zeros(k), where=n_pred > 0)
    rec = np.divide(tp, n_true, out=np.zeros(k), where=n_true > 0)
    f1 = np.divide(2 * prec * rec, prec + rec, out=np.zeros(k), where=prec + rec > 0)
    seen = (n_pred + n_true) > 0
    return HeadMetrics(float(tp.sum() / cm.sum()), float(prec[seen].mean()), float(rec[seen].mean()),
                       float(f1[seen].mean()), cm)


@dataclass
class StateReport:
    left: HeadMetrics
    right: HeadMetrics
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"left": self.left.to_dict(), "right": self.right.to_dict(), "metadata": dict(self.metadata)}


def state_metrics(pred: Sequence[HandState], truth: Sequence[HandState]) -> StateReport:
    """Independent per-head metrics for aligned prediction/truth lists."""
    if len(pred) != len(truth):
        raise ValueError(f"{len(pred)} predictions for {len(truth)} targets")
    return StateReport(head_metrics([p.left for p in pred], [t.left for t in truth]),
                       head_metrics([p.right for p in pred], [t.right for t in truth]))


# -----------------------------------------------------------------------------
# Annotation files: "<image name> <left state> <right state>" per line
# -----------------------------------------------------------------------------

def read_state_annotations(path) -> dict[str, HandState]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'name left right', got {line!r}")
        name, left, right = parts
        if name in out:
            raise ValueError(f"{path}:{lineno}: duplicate record for {name}")
        try:
            out[name] = HandState(left, right)
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: {e}") from None
    return out


def write_state_annotations(path, states: dict[str, HandState]) -> Path:
    path = Path(path)
    lines = [f"{name} {s.left} {s.right}" for name, s in sorted(states.items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# -----------------------------------------------------------------------------
# Toy set: the state is a function of hand-mask size, RGB carries none of it
# -----------------------------------------------------------------------------

# hand disk radius per present-hand state, on a 32-pixel frame
TOY_RADII = {"portable": 3, "stationary": 5, "no-contact": 7, "self-contact": 9}


def make_state_samples(n: int, seed: int, size: int = 32) -> list[StateSample]:
    """Hands are disks whose radius encodes the state; the image is hand-free noise.

    An RGB-only classifier cannot do better than the class prior here, while
    the hand-mask channels determine both states exactly.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        classes = np.zeros((size, size), np.uint8)
        picks = rng.integers(len(STATES), size=2)
        for hand, pick, x0 in zip(HAND_CLASSES, picks, (0, size // 2)):
            state = STATES[pick]
            if state == "not-exist":
                continue
            r = TOY_RADII[state]
            d = disk(r)
            cy = int(rng.integers(r, size - r))
            cx = int(rng.integers(x0 + r, x0 + size // 2 - r)) if 2 * r < size // 2 else x0 + size // 4
            ys, xs = np.nonzero(d)
            yy, xx = ys + cy - r, xs + cx - r
            keep = (yy >= 0) & (yy < size) & (xx >= x0) & (xx < x0 + size // 2)
            classes[yy[keep], xx[keep]] = hand
        image = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
        out.append(StateSample(f"state_{i:05d}", image, LabelMap(classes), HandState.from_indices(*picks)))
    return out
