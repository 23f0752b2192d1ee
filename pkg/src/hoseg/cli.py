"""``hoseg`` command line: one subcommand per toolkit operation.

Settings resolve in order flag > ``HOSEG_*`` environment variable > config
file > default. Exit status is 0 on success, 1 on a runtime error and 2 on a
usage error; failures print a one-line JSON summary on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from . import ccda, dataio, evalbench, handstate, storage
from .maskcore import LabelMap, Pairing, generate_contact_boundary
from .segpipeline import Pipeline, TrainConfig, train_pipeline

log = logging.getLogger("hoseg")

ENV_PREFIX = "HOSEG_"
COMMANDS = ("validate", "sample-frames", "gen-cb", "build-pool", "augment", "train", "infer", "eval",
            "ablate", "sweep-aug", "state-train", "state-eval")

CCDA_DEFAULTS = {"k": ccda.DEFAULT_TOPK, "n_total": ccda.OBJECT_FOCUSED_N, "placement": "same",
                 "feather": False, "inpainter": "diffusion", "embedder": "histogram", "hand_filter": "none"}
# top-level scalar settings shared by the flags and the environment
SCALARS = {"seed": int, "radius": float, "topk": int, "n_aug": int, "mode": str, "out": str}
SECTIONS = {"train", "state", "ccda"}


class UsageError(Exception):
    """Bad invocation or configuration (exit 2)."""


@dataclass
class RunConfig:
    command: str
    config_path: str | None = None
    seed: int = 0
    out: str | None = None
    radius: float | None = None
    topk: int | None = None
    n_aug: int | None = None
    mode: str = "rgb"
    verbosity: int = 0
    train: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    ccda: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d["seed"] = self.seed
        if self.radius is not None:
            d["boundary_radius"] = self.radius
        return TrainConfig.from_dict(d)

    def state_config(self) -> handstate.StateTrainConfig:
        return handstate.StateTrainConfig.from_dict({**self.state, "seed": self.seed})

    def ccda_settings(self) -> dict:
        d = {**CCDA_DEFAULTS, **self.ccda}
        if self.topk is not None:
            d["k"] = self.topk
        if self.n_aug is not None:
            d["n_total"] = self.n_aug
        return d

    def snapshot(self) -> dict:
        """Effective settings; the run id and config.json derive from this."""
        return {"command": self.command, "seed": self.seed, "radius": self.radius,
                "train": self.train_config().to_dict(), "ccda": self.ccda_settings(),
                "state": self.state_config().to_dict(), "mode": self.mode}


def load_config_file(path) -> dict:
    """Strictly parse a YAML or JSON config file."""
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    data = data or {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a mapping")
    unknown = sorted(set(data) - set(SCALARS) - SECTIONS)
    if unknown:
        raise UsageError(f"{path}: unknown config keys: {', '.join(unknown)}")
    known = {"train": set(TrainConfig.__dataclass_fields__),
             "state": set(handstate.StateTrainConfig.__dataclass_fields__),
             "ccda": set(CCDA_DEFAULTS)}
    for section, keys in known.items():
        sub = data.get(section, {}) or {}
        if not isinstance(sub, dict):
            raise UsageError(f"{path}: section {section!r} must be a mapping")
        # the seed lives at top level so one value drives every stage
        bad = sorted(set(sub) - (keys - {"seed"}))
        if bad:
            raise UsageError(f"{path}: unknown keys in {section!r}: {', '.join(bad)}")
        data[section] = sub
    return data


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name not in SCALARS:
            raise UsageError(f"unknown environment override {key}")
        try:
            out[name] = SCALARS[name](value)
        except ValueError:
            raise UsageError(f"{key}={value!r} is not a valid {SCALARS[name].__name__}") from None
    return out


def resolve(args: argparse.Namespace, environ=None) -> RunConfig:
    data = load_config_file(args.config) if args.config else {"train": {}, "state": {}, "ccda": {}}
    merged = {k: data[k] for k in SCALARS if k in data}
    merged.update(env_overrides(environ))
    for k in SCALARS:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    if merged.get("mode", "rgb") not in handstate.MODES:
        raise UsageError(f"unknown mode {merged['mode']!r}")
    try:
        rc = RunConfig(args.command, args.config, verbosity=args.verbose,
                       train=data["train"], state=data["state"], ccda=data["ccda"], **merged)
        rc.snapshot()  # surfaces invalid values before any work starts
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    return rc


# -----------------------------------------------------------------------------
# Helpers
# -----------------------------------------------------------------------------

def _out(rc: RunConfig, default: str) -> Path:
    return Path(rc.out or default)


def _split_samples(manifest: dataio.Manifest, split: str | None) -> list[dataio.Sample]:
    """Samples of ``split``; a manifest without split columns yields everything."""
    if split and any(e.split for e in manifest.entries):
        return dataio.load_samples(manifest, split)
    return dataio.load_samples(manifest)


def dataset_id(manifest: dataio.Manifest) -> str:
    blob = "".join(e.to_line() + "\n" for e in manifest.entries).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _handles(settings: dict):
    return (ccda.resolve_handle("embedder", settings["embedder"]),
            ccda.resolve_handle("inpainter", settings["inpainter"]))


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _aug_samples(path) -> list[dataio.Sample]:
    if path is None:
        return []
    root = Path(path)
    if (root / ccda.AUG_DIR / dataio.MANIFEST_NAME).exists():
        root = root / ccda.AUG_DIR
    return dataio.load_samples(dataio.open_manifest(root))


# -----------------------------------------------------------------------------
# Subcommands
# -----------------------------------------------------------------------------

def cmd_validate(rc: RunConfig, args) -> int:
    report = dataio.validate_dataset(dataio.open_manifest(args.data))
    _print(report.to_dict())
    return 0 if report.ok else 1


def cmd_sample_frames(rc: RunConfig, args) -> int:
    frames = sorted(p for p in Path(args.video).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    spec = dataio.FrameSampleSpec(args.fps, args.interval)
    picked = dataio.sample_frames(frames, spec)
    out = _out(rc, "frames")
    out.mkdir(parents=True, exist_ok=True)
    for i in picked:
        shutil.copyfile(frames[i], out / frames[i].name)
    (out / "indices.txt").write_text("".join(f"{i}\t{frames[i].name}\n" for i in picked), encoding="utf-8")
    _print({"frames": len(frames), "sampled": len(picked)})
    return 0


def cmd_gen_cb(rc: RunConfig, args) -> int:
    manifest = dataio.open_manifest(args.data)
    radius = rc.radius if rc.radius is not None else 5
    out = _out(rc, str(Path(args.data) / dataio.CB_DIR))
    out.mkdir(parents=True, exist_ok=True)
    for e in manifest.entries:
        cb = generate_contact_boundary(manifest.load_labels(e), radius, Pairing(args.pairing))
        storage.write_boundary(out / Path(e.label).name, cb)
    _print({"written": len(manifest.entries), "radius": radius, "out": str(out)})
    return 0


def cmd_build_pool(rc: RunConfig, args) -> int:
    settings = rc.ccda_settings()
    embedder, inpainter = _handles(settings)
    frames = []
    if args.frames:
        frames = [(p.stem, storage.read_image(p)) for p in sorted(Path(args.frames).glob("*.png"))]
    labeled = dataio.open_manifest(args.data) if args.data else None
    if labeled is not None and any(e.split for e in labeled.entries):
        labeled = dataio.subset(labeled, "train")
    pool = ccda.build_background_pool(frames, ccda.resolve_handle("hand_filter", settings["hand_filter"]),
                                      inpainter, labeled, embedder)
    path = pool.save(_out(rc, "pool.npz"))
    _print({"pool": str(path), "items": len(pool)})
    return 0


def cmd_augment(rc: RunConfig, args) -> int:
    settings = rc.ccda_settings()
    embedder, inpainter = _handles(settings)
    manifest = dataio.open_manifest(args.data)
    samples = _split_samples(manifest, "train")
    res = ccda.generate_augmented_set(samples, ccda.BackgroundPool.load(args.pool), embedder, inpainter,
                                      k=settings["k"], n_total=settings["n_total"], seed=rc.seed,
                                      out_root=_out(rc, "augmented"), placement=settings["placement"],
                                      feather=settings["feather"], keep_records=False)
    _print({"composites": settings["n_total"], "failures": len(res.failures)})
    return 1 if res.failures else 0


def cmd_train(rc: RunConfig, args) -> int:
    manifest = dataio.open_manifest(args.data)
    config = rc.train_config()
    data = _split_samples(manifest, "train") + _aug_samples(args.aug)
    pipe = train_pipeline(data, config, kind=args.kind, with_boundary=not args.no_cb)
    out = _out(rc, "checkpoints")
    pipe.save(out, config)
    (out / "config.json").write_text(json.dumps(rc.snapshot(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _print({"out": str(out), "stages": sorted(k for k, v in pipe.predictors.items() if v is not None)})
    return 0


def cmd_infer(rc: RunConfig, args) -> int:
    pipe = Pipeline.load(args.checkpoint, threshold=args.threshold)
    manifest = dataio.open_manifest(args.data)
    entries = manifest.split(args.split) if args.split and any(e.split for e in manifest.entries) \
        else manifest.entries
    out = _out(rc, "predictions")
    for e in entries:
        labels, cb = pipe.predict(manifest.load_image(e))
        name = Path(e.label).name
        storage.write_class_ids(out / dataio.LABEL_DIR / name, labels.classes)
        if cb is not None:
            storage.write_boundary(out / dataio.CB_DIR / name, cb)
    _print({"predicted": len(entries), "out": str(out)})
    return 0


def read_predictions(pred_dir) -> dict[str, object]:
    pred_dir = Path(pred_dir)
    out = {}
    for p in sorted((pred_dir / dataio.LABEL_DIR).glob("*.png")):
        labels = LabelMap(storage.read_class_ids(p))
        cb_path = pred_dir / dataio.CB_DIR / p.name
        out[p.stem] = (labels, storage.read_boundary(cb_path)) if cb_path.exists() else labels
    return out


def cmd_eval(rc: RunConfig, args) -> int:
    manifest = dataio.open_manifest(args.data)
    truth = _split_samples(manifest, args.split)
    preds = read_predictions(args.pred)
    did = dataset_id(manifest)
    snap = {**rc.snapshot(), "split": args.split}
    rid = evalbench.run_id(snap, rc.seed, did)
    report = evalbench.evaluate_run(preds, truth, boundary_radius=rc.radius if rc.radius is not None else 5,
                                    metadata={"config_hash": evalbench.config_hash(snap), "seed": rc.seed,
                                              "dataset_id": did, "run_id": rid})
    out = evalbench.write_report(report, _out(rc, "runs") / rid, snap)
    _print({"run": str(out), "mIoU": report.miou, "missing": report.metadata["missing"]})
    return 0


def cmd_ablate(rc: RunConfig, args) -> int:
    manifest = dataio.open_manifest(args.data)
    config = rc.train_config()
    data = evalbench.AblationData(_split_samples(manifest, "train"), _split_samples(manifest, "test"),
                                  _aug_samples(args.aug), dataset_id(manifest))
    table = evalbench.run_ablation(evalbench.AblationPlan.default(), data, config)
    snap = rc.snapshot()
    out = table.write(_out(rc, "runs") / evalbench.run_id(snap, rc.seed, data.dataset_id))
    (out / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(table.text(), end="")
    return 0 if all(r.error is None for r in table.rows) else 1


def cmd_sweep_aug(rc: RunConfig, args) -> int:
    manifest = dataio.open_manifest(args.data)
    settings = rc.ccda_settings()
    embedder, inpainter = _handles(settings)
    counts = [int(c) for c in args.counts.split(",")]
    data = evalbench.AblationData(_split_samples(manifest, "train"), _split_samples(manifest, "test"),
                                  dataset_id=dataset_id(manifest))
    points = evalbench.sweep_augmentation_quantity(counts, data, ccda.BackgroundPool.load(args.pool),
                                                   rc.train_config(), k=settings["k"], embedder=embedder,
                                                   inpainter=inpainter)
    snap = {**rc.snapshot(), "counts": counts}
    out = _out(rc, "runs") / evalbench.run_id(snap, rc.seed, data.dataset_id)
    evalbench.write_curve(points, out / "sweep.csv")
    (out / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "sweep.txt").write_text(evalbench.describe_curve(points) + "\n", encoding="utf-8")
    _print({"out": str(out), "points": len(points)})
    return 0 if all(p.error is None for p in points) else 1


def _state_samples(args, split: str | None) -> list[handstate.StateSample]:
    manifest = dataio.open_manifest(args.data)
    states = handstate.read_state_annotations(args.states)
    entries = manifest.split(split) if split and any(e.split for e in manifest.entries) else manifest.entries
    out = []
    for e in entries:
        if e.name not in states:
            raise ValueError(f"no state record for {e.name}")
        out.append(handstate.StateSample(e.name, manifest.load_image(e), manifest.load_labels(e), states[e.name]))
    return out


def cmd_state_train(rc: RunConfig, args) -> int:
    samples = _state_samples(args, "train")
    res = handstate.train_state_classifier(samples, rc.mode, rc.state_config())
    out = _out(rc, "state")
    out.mkdir(parents=True, exist_ok=True)
    res.classifier.save(out / "state.ckpt.npz", {"mode": rc.mode, "mask_source": "hard",
                                                 "train_config": rc.state_config().to_dict()})
    res.write_log(out / "state.log.csv")
    _print({"out": str(out), "final": res.log[-1].__dict__})
    return 0


def cmd_state_eval(rc: RunConfig, args) -> int:
    clf, header = handstate.StateClassifier.load(args.checkpoint)
    mode = header.get("mode", rc.mode)
    samples = _state_samples(args, args.split)
    report = handstate.state_metrics(handstate.predict_states(clf, samples, mode), [s.state for s in samples])
    report.metadata.update({"mode": mode, "mask_source": header.get("mask_source", "hard"),
                            "images": len(samples)})
    out = _out(rc, "state")
    out.mkdir(parents=True, exist_ok=True)
    (out / "state_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    _print({"left_accuracy": report.left.accuracy, "right_accuracy": report.right.accuracy})
    return 0


HANDLERS = {
    "validate": cmd_validate, "sample-frames": cmd_sample_frames, "gen-cb": cmd_gen_cb,
    "build-pool": cmd_build_pool, "augment": cmd_augment, "train": cmd_train, "infer": cmd_infer,
    "eval": cmd_eval, "ablate": cmd_ablate, "sweep-aug": cmd_sweep_aug,
    "state-train": cmd_state_train, "state-eval": cmd_state_eval,
}


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"status": "usage-error", "error": message}) + "\n")
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file (unknown keys are rejected)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--radius", type=float, help="contact-boundary dilation radius in pixels")
    common.add_argument("--topk", type=int, help="retrieved backgrounds per foreground")
    common.add_argument("--n-aug", dest="n_aug", type=int, help="number of composites")
    common.add_argument("--mode", choices=handstate.MODES, help="hand-state input channels")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="hoseg", description="Hand-object segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    add("validate", "check a dataset directory").add_argument("data")
    p = add("sample-frames", "pick one frame per interval from a frame directory")
    p.add_argument("video")
    p.add_argument("--fps", type=float, required=True)
    p.add_argument("--interval", type=float, default=3.0)
    p = add("gen-cb", "write contact-boundary masks")
    p.add_argument("data")
    p.add_argument("--pairing", choices=[x.value for x in Pairing], default=Pairing.PER_HAND.value)
    p = add("build-pool", "build the clean-background pool")
    p.add_argument("--frames", help="directory of unlabeled frames")
    p.add_argument("--data", help="labeled dataset whose frames are inpainted")
    p = add("augment", "generate composites")
    p.add_argument("data")
    p.add_argument("--pool", required=True)
    p = add("train", "train a segmentation pipeline")
    p.add_argument("data")
    p.add_argument("--aug", help="composite dataset to mix in")
    p.add_argument("--kind", choices=("sequential", "parallel"), default="sequential")
    p.add_argument("--no-cb", action="store_true", help="skip the contact-boundary stage")
    p = add("infer", "predict label maps")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p = add("eval", "score predictions against ground truth")
    p.add_argument("pred")
    p.add_argument("data")
    p.add_argument("--split", default="test")
    p = add("ablate", "run the decode/CB/CCDA ablation")
    p.add_argument("data")
    p.add_argument("--aug", help="composite dataset for the CCDA cells")
    p = add("sweep-aug", "vary the number of composites")
    p.add_argument("data")
    p.add_argument("--pool", required=True)
    p.add_argument("--counts", required=True, help="comma-separated ascending composite counts")
    for name in ("state-train", "state-eval"):
        p = add(name, "train the hand-state classifier" if name == "state-train" else "score the hand-state classifier")
        if name == "state-eval":
            p.add_argument("checkpoint")
            p.add_argument("--split", default="test")
        p.add_argument("data")
        p.add_argument("--states", required=True, help="annotation file: name left right per line")
    return parser


def main(argv: Sequence[str] | None = None, environ=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        rc = resolve(args, environ)
    except (UsageError, OSError, yaml.YAMLError, json.JSONDecodeError) as e:
        sys.stderr.write(json.dumps({"status": "usage-error", "command": args.command, "error": str(e)}) + "\n")
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(rc.verbosity, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](rc, args)
    except Exception as e:  # noqa: BLE001 - every failure becomes an exit status
        log.debug("command failed", exc_info=True)
        sys.stderr.write(json.dumps({"status": "error", "command": args.command,
                                     "error": type(e).__name__, "message": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
