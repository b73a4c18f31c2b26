"""Iterative semi-supervised co-training across the three planes.

One round trains a per-plane model bundle on the current training set,
then relabels every unlabeled volume from scratch through multi-planar
fusion; the pseudo-labeled volumes join the labeled set for the next
round.  After the final round the bundle is trained once more on the last
augmented set, so ``rounds=T`` means T+1 training passes per plane with T
pseudo-label passes interleaved.  The first pass (the teacher) uses the
teacher budget; every later pass (the students) uses the student budget.

Mode variants:

* supervised ("fcn"): the teacher alone, no pseudo-labels.
* "spsl": per-plane self-training; plane V's pseudo-labels come from
  plane V's own stacked predictions, fusion never runs during training.
* "dmpct": the full fused co-training loop.
* "dmpct-confident": like dmpct, but students only receive the ``top_n``
  most confident pseudo-labeled slices per plane (slice confidence is the
  negative mean per-pixel entropy of the plane's probability map).

Every random choice derives from one master seed, so a run is a pure
function of (dataset, settings) regardless of worker count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbone import (
    PROB_FLOOR,
    SoftmaxSegmenter,
    TrainConfig,
    TrainingDivergedError,
    save_model,
    train_segmenter,
)
from .core_volume import (
    DEFAULT_WINDOWS,
    LabelMask,
    Volume,
    WindowSpec,
    save_mask,
    windowed_channels,
)
from .fusion import FusedMask, fuse_volume, predict_plane, predict_volume
from .planar import PLANES, Plane, extract_slice, slice_field
from .seeds import derive_seed
from .workers import parallel_map

MODES = ("fcn", "spsl", "dmpct", "dmpct-confident")

#: trainer(slices, labels, config, seed, init) -> (model, loss_curve)
Trainer = Callable[..., tuple[object, list[float]]]


class CotrainAborted(RuntimeError):
    """A run died mid-loop; carries the RunLog collected so far."""

    def __init__(self, message: str, runlog: "RunLog"):
        super().__init__(message)
        self.runlog = runlog


@dataclass(frozen=True)
class Dataset:
    """Labeled / unlabeled / test splits sharing one class count.

    ``labeled`` and ``test`` hold (case_id, volume, mask) triples,
    ``unlabeled`` holds (case_id, volume) pairs.  Generators keep withheld
    unlabeled-case masks out of this container on purpose.
    """

    labeled: tuple[tuple[str, Volume, LabelMask], ...]
    unlabeled: tuple[tuple[str, Volume], ...]
    test: tuple[tuple[str, Volume, LabelMask], ...]
    num_classes: int
    records: tuple = ()

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        for case_id, volume, mask in tuple(self.labeled) + tuple(self.test):
            if mask.num_classes != self.num_classes:
                raise ValueError(
                    f"case {case_id}: mask K={mask.num_classes} does not match "
                    f"dataset K={self.num_classes}"
                )
            if mask.labels.shape != volume.voxels.shape:
                raise ValueError(f"case {case_id}: mask dims do not match its volume")
        object.__setattr__(self, "labeled", tuple(self.labeled))
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))
        object.__setattr__(self, "test", tuple(self.test))


@dataclass(frozen=True)
class PlaneModelBundle:
    """One trained segmenter per plane, sharing a class count."""

    sagittal: object
    coronal: object
    axial: object

    def __post_init__(self):
        ks = {int(m.num_classes) for m in self.models()}
        if len(ks) != 1:
            raise ValueError(f"bundle models disagree on num_classes: {sorted(ks)}")

    def models(self) -> tuple[object, object, object]:
        return (self.sagittal, self.coronal, self.axial)

    def __getitem__(self, plane: Plane):
        return self.models()[int(Plane(plane))]

    def __contains__(self, plane) -> bool:
        return Plane(plane) in PLANES

    @property
    def num_classes(self) -> int:
        return int(self.sagittal.num_classes)


@dataclass
class RunLogEvent:
    """One step of a run: a training, fusion or pseudo-labeling pass."""

    round: int
    action: str
    plane: str | None
    detail: dict
    wall_time: float


@dataclass
class RunLog:
    """Append-only trace of a run, persisted as JSON lines."""

    events: list[RunLogEvent] = field(default_factory=list)

    def append(self, round: int, action: str, plane: str | None,
               detail: dict, wall_time: float) -> None:
        self.events.append(RunLogEvent(round, action, plane, dict(detail), wall_time))

    def count(self, action: str, plane: str | None = "any") -> int:
        return sum(
            1
            for e in self.events
            if e.action == action and (plane == "any" or e.plane == plane)
        )

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(e.__dict__, sort_keys=True) for e in self.events)

    @classmethod
    def from_jsonl(cls, text: str) -> "RunLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                doc = json.loads(line)
                log.events.append(RunLogEvent(**doc))
        return log

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunLog":
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class CotrainSettings:
    """Orchestration knobs shared by every mode."""

    teacher: TrainConfig
    student: TrainConfig
    windows: tuple[WindowSpec, ...] = DEFAULT_WINDOWS
    rounds: int = 2
    seed: int = 0
    warm_start: bool = False
    top_n: int = 192
    workers: int = 1
    record_provenance: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.teacher.num_classes != self.student.num_classes:
            raise ValueError("teacher and student budgets disagree on num_classes")
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def slice_confidence(prob_map: np.ndarray) -> float:
    """Negative mean per-pixel entropy of a (h, w, K+1) probability map."""
    p = np.asarray(prob_map, dtype=np.float64)
    ent = -(p * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=-1)
    return float(-ent.mean())


def _select_from_confidences(conf: np.ndarray, top_n: int) -> tuple[list[int], bool]:
    order = np.argsort(-np.asarray(conf, dtype=np.float64), kind="stable")
    warning = top_n > len(order)
    picked = order[: min(top_n, len(order))]
    return sorted(int(i) for i in picked), warning


def select_confident_slices(
    prob_maps: Sequence[np.ndarray], top_n: int
) -> tuple[list[int], bool]:
    """Pick the ``top_n`` most confident slices of a probability-map list.

    Confidence is :func:`slice_confidence`; ties go to the lower index.

    Returns:
        (indices, truncated): selected indices in ascending order, plus a
        warning flag set when ``top_n`` exceeded the available count (then
        every index is returned).
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    conf = np.asarray([slice_confidence(p) for p in prob_maps])
    return _select_from_confidences(conf, top_n)


def _mask_slices(labels3d: np.ndarray, plane: Plane) -> list[np.ndarray]:
    return list(slice_field(labels3d, plane).slices)


def _assemble_plane_data(
    channel_volumes: Sequence[np.ndarray],
    label_volumes: Sequence[np.ndarray],
    plane: Plane,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    slices: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for ch, lab in zip(channel_volumes, label_volumes):
        slices.extend(slice_field(ch, plane).slices)
        labels.extend(_mask_slices(lab, plane))
    return slices, labels


def _train_bundle(
    data_fn: Callable[[Plane], tuple[list[np.ndarray], list[np.ndarray]]],
    round_idx: int,
    budget: TrainConfig,
    settings: CotrainSettings,
    runlog: RunLog,
    trainer: Trainer,
    warm_from: PlaneModelBundle | None,
    out_dir: Path | None,
) -> PlaneModelBundle:
    models = {}
    for plane in PLANES:
        slices, labels = data_fn(plane)
        seed = derive_seed(settings.seed, "train", plane.name, f"round{round_idx}")
        init = warm_from[plane] if warm_from is not None else None
        start = time.perf_counter()
        model, curve = trainer(slices, labels, budget, seed, init)
        detail = {
            "steps": budget.iterations,
            "examples": len(slices),
            "loss_first": curve[0] if curve else None,
            "loss_last": curve[-1] if curve else None,
        }
        runlog.append(round_idx, "train", plane.name, detail, time.perf_counter() - start)
        models[plane] = model
    bundle = PlaneModelBundle(
        sagittal=models[Plane.SAGITTAL],
        coronal=models[Plane.CORONAL],
        axial=models[Plane.AXIAL],
    )
    if out_dir is not None:
        round_dir = out_dir / f"round_{round_idx}"
        round_dir.mkdir(parents=True, exist_ok=True)
        for plane in PLANES:
            if isinstance(bundle[plane], SoftmaxSegmenter):
                save_model(bundle[plane], round_dir / f"model_{plane.name[0]}.dmpw", plane)
    return bundle


def _fused_pseudo_task(args):
    bundle, volume, windows, record_provenance = args
    fused, _ = predict_volume(bundle, volume, windows, record_provenance=record_provenance)
    return fused


def _fused_probs_task(args):
    bundle, volume, windows, record_provenance = args
    preds = {}
    confidences = {}
    for plane in PLANES:
        pred, probs = predict_plane(bundle[plane], volume, windows, plane, return_probs=True)
        preds[plane] = pred
        confidences[plane] = np.asarray([slice_confidence(p) for p in probs])
    fused = fuse_volume(preds, bundle.num_classes, record_provenance=record_provenance)
    return fused, confidences


def _plane_pseudo_task(args):
    model, volume, windows, plane, num_classes = args
    pred = predict_plane(model, volume, windows, plane)
    return LabelMask(labels=pred.labels, num_classes=num_classes)


def generate_pseudo_labels(
    bundle: PlaneModelBundle,
    unlabeled: Sequence[tuple[str, Volume]],
    settings: CotrainSettings,
) -> list[tuple[str, FusedMask]]:
    """Relabel every unlabeled volume from scratch through fusion."""
    tasks = [
        (bundle, volume, settings.windows, settings.record_provenance)
        for _, volume in unlabeled
    ]
    fused = parallel_map(_fused_pseudo_task, tasks, settings.workers)
    return [(case_id, mask) for (case_id, _), mask in zip(unlabeled, fused)]


def _save_pseudo(
    out_dir: Path | None,
    round_idx: int,
    pairs: Sequence[tuple[str, FusedMask]],
    subdir: str | None = None,
) -> None:
    if out_dir is None:
        return
    pseudo_dir = out_dir / f"round_{round_idx}" / "pseudo"
    if subdir:
        pseudo_dir = pseudo_dir / subdir
    pseudo_dir.mkdir(parents=True, exist_ok=True)
    for case_id, fused in pairs:
        save_mask(fused.mask, pseudo_dir / f"{case_id}.dmpl")
        if fused.provenance is not None:
            prov = LabelMask(labels=fused.provenance, num_classes=6)
            save_mask(prov, pseudo_dir / f"{case_id}.prov.dmpl")


def _require_labeled(dataset: Dataset) -> None:
    if len(dataset.labeled) < 1:
        raise ValueError("training requires at least one labeled case")


def train_teacher(
    dataset: Dataset,
    settings: CotrainSettings,
    runlog: RunLog | None = None,
    trainer: Trainer | None = None,
    out_dir: str | Path | None = None,
    round_idx: int = 1,
) -> PlaneModelBundle:
    """Train the three plane models on the labeled set alone."""
    _require_labeled(dataset)
    if settings.teacher.num_classes != dataset.num_classes:
        raise ValueError(
            f"config K={settings.teacher.num_classes} does not match "
            f"dataset K={dataset.num_classes}"
        )
    runlog = RunLog() if runlog is None else runlog
    trainer = train_segmenter if trainer is None else trainer
    out = Path(out_dir) if out_dir is not None else None
    channels = [windowed_channels(v, settings.windows) for _, v, _ in dataset.labeled]
    masks = [m.labels for _, _, m in dataset.labeled]

    def data_fn(plane: Plane):
        return _assemble_plane_data(channels, masks, plane)

    return _train_bundle(
        data_fn, round_idx, settings.teacher, settings, runlog, trainer, None, out
    )


def run_supervised(
    dataset: Dataset,
    settings: CotrainSettings,
    out_dir: str | Path | None = None,
    trainer: Trainer | None = None,
) -> tuple[PlaneModelBundle, RunLog]:
    """Supervised baseline: the teacher alone, fused only at inference."""
    runlog = RunLog()
    out = Path(out_dir) if out_dir is not None else None
    try:
        bundle = train_teacher(dataset, settings, runlog, trainer, out)
    except TrainingDivergedError as err:
        _save_runlog(out, runlog)
        raise CotrainAborted(str(err), runlog) from err
    _save_runlog(out, runlog)
    return bundle, runlog


def _save_runlog(out_dir: Path | None, runlog: RunLog) -> None:
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        runlog.save(out_dir / "runlog.jsonl")


def run_dmpct(
    dataset: Dataset,
    settings: CotrainSettings,
    out_dir: str | Path | None = None,
    trainer: Trainer | None = None,
) -> tuple[PlaneModelBundle, RunLog]:
    """The full fused co-training loop (see the module docstring)."""
    _require_labeled(dataset)
    if settings.teacher.num_classes != dataset.num_classes:
        raise ValueError(
            f"config K={settings.teacher.num_classes} does not match "
            f"dataset K={dataset.num_classes}"
        )
    runlog = RunLog()
    trainer_fn = train_segmenter if trainer is None else trainer
    out = Path(out_dir) if out_dir is not None else None
    labeled_channels = [windowed_channels(v, settings.windows) for _, v, _ in dataset.labeled]
    labeled_masks = [m.labels for _, _, m in dataset.labeled]
    unlabeled_channels = [windowed_channels(v, settings.windows) for _, v in dataset.unlabeled]

    pseudo_masks: list[np.ndarray] = []
    bundle: PlaneModelBundle | None = None
    try:
        for round_idx in range(1, settings.rounds + 2):
            budget = settings.teacher if round_idx == 1 else settings.student
            warm = bundle if settings.warm_start else None
            channels = labeled_channels + (unlabeled_channels if pseudo_masks else [])
            masks = labeled_masks + pseudo_masks

            def data_fn(plane: Plane, _ch=channels, _ma=masks):
                return _assemble_plane_data(_ch, _ma, plane)

            bundle = _train_bundle(
                data_fn, round_idx, budget, settings, runlog, trainer_fn, warm, out
            )
            if round_idx > settings.rounds:
                break
            start = time.perf_counter()
            pairs = generate_pseudo_labels(bundle, dataset.unlabeled, settings)
            elapsed = time.perf_counter() - start
            runlog.append(round_idx, "fuse", None, {"volumes": len(pairs)}, elapsed)
            runlog.append(
                round_idx, "pseudo-label", None,
                {"volumes": len(pairs), "fusion": True}, elapsed,
            )
            _save_pseudo(out, round_idx, pairs)
            pseudo_masks = [fused.mask.labels for _, fused in pairs]
    except TrainingDivergedError as err:
        _save_runlog(out, runlog)
        raise CotrainAborted(str(err), runlog) from err
    _save_runlog(out, runlog)
    return bundle, runlog


def run_spsl(
    dataset: Dataset,
    settings: CotrainSettings,
    out_dir: str | Path | None = None,
    trainer: Trainer | None = None,
) -> tuple[PlaneModelBundle, RunLog]:
    """Single-planar self-training: each plane relabels for itself only."""
    _require_labeled(dataset)
    if settings.teacher.num_classes != dataset.num_classes:
        raise ValueError(
            f"config K={settings.teacher.num_classes} does not match "
            f"dataset K={dataset.num_classes}"
        )
    runlog = RunLog()
    trainer_fn = train_segmenter if trainer is None else trainer
    out = Path(out_dir) if out_dir is not None else None
    labeled_channels = [windowed_channels(v, settings.windows) for _, v, _ in dataset.labeled]
    labeled_masks = [m.labels for _, _, m in dataset.labeled]
    unlabeled_channels = [windowed_channels(v, settings.windows) for _, v in dataset.unlabeled]

    pseudo_by_plane: dict[Plane, list[np.ndarray]] = {p: [] for p in PLANES}
    bundle: PlaneModelBundle | None = None
    try:
        for round_idx in range(1, settings.rounds + 2):
            budget = settings.teacher if round_idx == 1 else settings.student
            warm = bundle if settings.warm_start else None

            def data_fn(plane: Plane):
                pseudo = pseudo_by_plane[plane]
                channels = labeled_channels + (unlabeled_channels if pseudo else [])
                return _assemble_plane_data(channels, labeled_masks + pseudo, plane)

            bundle = _train_bundle(
                data_fn, round_idx, budget, settings, runlog, trainer_fn, warm, out
            )
            if round_idx > settings.rounds:
                break
            for plane in PLANES:
                start = time.perf_counter()
                tasks = [
                    (bundle[plane], volume, settings.windows, plane, dataset.num_classes)
                    for _, volume in dataset.unlabeled
                ]
                masks = parallel_map(_plane_pseudo_task, tasks, settings.workers)
                runlog.append(
                    round_idx, "pseudo-label", plane.name,
                    {"volumes": len(masks), "fusion": False},
                    time.perf_counter() - start,
                )
                pairs = [
                    (case_id, FusedMask(mask=m, provenance=None))
                    for (case_id, _), m in zip(dataset.unlabeled, masks)
                ]
                _save_pseudo(out, round_idx, pairs, subdir=plane.name[0])
                pseudo_by_plane[plane] = [m.labels for m in masks]
    except TrainingDivergedError as err:
        _save_runlog(out, runlog)
        raise CotrainAborted(str(err), runlog) from err
    _save_runlog(out, runlog)
    return bundle, runlog


def run_dmpct_confident(
    dataset: Dataset,
    settings: CotrainSettings,
    out_dir: str | Path | None = None,
    trainer: Trainer | None = None,
) -> tuple[PlaneModelBundle, RunLog]:
    """Co-training that augments only with the most confident slices.

    Pseudo-labels still come from fusion, but each plane's student set only
    gains the ``settings.top_n`` slices with the highest slice confidence
    under that plane's own probability maps.
    """
    _require_labeled(dataset)
    if settings.teacher.num_classes != dataset.num_classes:
        raise ValueError(
            f"config K={settings.teacher.num_classes} does not match "
            f"dataset K={dataset.num_classes}"
        )
    runlog = RunLog()
    trainer_fn = train_segmenter if trainer is None else trainer
    out = Path(out_dir) if out_dir is not None else None
    labeled_channels = [windowed_channels(v, settings.windows) for _, v, _ in dataset.labeled]
    labeled_masks = [m.labels for _, _, m in dataset.labeled]
    unlabeled_channels = [windowed_channels(v, settings.windows) for _, v in dataset.unlabeled]

    # plane -> list of (volume_idx, slice_idx) chosen for the next round
    selected: dict[Plane, list[tuple[int, int]]] = {p: [] for p in PLANES}
    pseudo_label_volumes: list[np.ndarray] = []
    bundle: PlaneModelBundle | None = None
    try:
        for round_idx in range(1, settings.rounds + 2):
            budget = settings.teacher if round_idx == 1 else settings.student
            warm = bundle if settings.warm_start else None

            def data_fn(plane: Plane):
                slices, labels = _assemble_plane_data(labeled_channels, labeled_masks, plane)
                for vol_idx, slice_idx in selected[plane]:
                    slices.append(extract_slice(unlabeled_channels[vol_idx], plane, slice_idx))
                    labels.append(
                        extract_slice(pseudo_label_volumes[vol_idx], plane, slice_idx)
                    )
                return slices, labels

            bundle = _train_bundle(
                data_fn, round_idx, budget, settings, runlog, trainer_fn, warm, out
            )
            if round_idx > settings.rounds:
                break
            start = time.perf_counter()
            tasks = [
                (bundle, volume, settings.windows, settings.record_provenance)
                for _, volume in dataset.unlabeled
            ]
            results = parallel_map(_fused_probs_task, tasks, settings.workers)
            elapsed = time.perf_counter() - start
            pairs = [
                (case_id, fused)
                for (case_id, _), (fused, _) in zip(dataset.unlabeled, results)
            ]
            runlog.append(round_idx, "fuse", None, {"volumes": len(pairs)}, elapsed)
            pseudo_label_volumes = [fused.mask.labels for _, fused in pairs]
            selection_detail = {}
            for plane in PLANES:
                slice_counts = [len(confs[plane]) for _, confs in results]
                flat_conf = np.concatenate(
                    [confs[plane] for _, confs in results]
                ) if results else np.empty(0)
                picked, truncated = (
                    _select_from_confidences(flat_conf, settings.top_n)
                    if len(flat_conf)
                    else ([], False)
                )
                positions = []
                bounds = np.cumsum([0] + slice_counts)
                for flat_idx in picked:
                    vol_idx = int(np.searchsorted(bounds, flat_idx, side="right") - 1)
                    positions.append((vol_idx, int(flat_idx - bounds[vol_idx])))
                selected[plane] = positions
                selection_detail[plane.name] = {
                    "selected": len(positions),
                    "available": int(len(flat_conf)),
                    "truncated": bool(truncated),
                }
            runlog.append(
                round_idx, "pseudo-label", None,
                {"volumes": len(pairs), "fusion": True, "selection": selection_detail},
                elapsed,
            )
            _save_pseudo(out, round_idx, pairs)
    except TrainingDivergedError as err:
        _save_runlog(out, runlog)
        raise CotrainAborted(str(err), runlog) from err
    _save_runlog(out, runlog)
    return bundle, runlog


def run_mode(
    mode: str,
    dataset: Dataset,
    settings: CotrainSettings,
    out_dir: str | Path | None = None,
    trainer: Trainer | None = None,
) -> tuple[PlaneModelBundle, RunLog]:
    """Dispatch one of the four training modes by name."""
    runners = {
        "fcn": run_supervised,
        "spsl": run_spsl,
        "dmpct": run_dmpct,
        "dmpct-confident": run_dmpct_confident,
    }
    if mode not in runners:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    return runners[mode](dataset, settings, out_dir=out_dir, trainer=trainer)
