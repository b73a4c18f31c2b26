"""Multi-planar fusion of per-plane hard predictions into one 3D mask.

A voxel's fused label is decided in two branches: if at least two planes
agree on its label, the agreed label wins (with three planes, two pairs can
never agree on different labels); otherwise the label of the single most
confident plane is taken, confidence ties resolved by plane priority
(sagittal, then coronal, then axial).

Each fused voxel can record a provenance byte ``(branch << 2) | plane``:
branch 0 is agreement and plane is the first plane (priority order) holding
the winning label; branch 1 is the confidence fallback and plane is the
winner.  Values are therefore 0..2 and 4..6.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core_volume import LabelMask, Volume, WindowSpec, windowed_channels
from .planar import PLANES, Plane, SliceStack, slice_field, stack_slices

AGREEMENT = 0
FALLBACK = 1


def provenance_byte(branch: int, plane: Plane) -> int:
    """Encode a fusion decision as one byte."""
    return (branch << 2) | int(plane)


def provenance_branch(code: int) -> int:
    """Branch component of a provenance byte (AGREEMENT or FALLBACK)."""
    return code >> 2


def provenance_plane(code: int) -> Plane:
    """Plane component of a provenance byte."""
    return Plane(code & 0b11)


class FusionShapeError(ValueError):
    """Raised when per-plane predictions disagree on volume dims."""


@dataclass(frozen=True)
class PlanePrediction:
    """One plane's hard prediction for a whole volume.

    Attributes:
        plane: which plane produced the prediction.
        labels: uint8 ``[z, y, x]`` hard labels.
        confidence: float32 ``[z, y, x]`` max class probability per voxel.
    """

    plane: Plane
    labels: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        lab = np.ascontiguousarray(self.labels)
        conf = np.ascontiguousarray(self.confidence, dtype=np.float32)
        if lab.ndim != 3:
            raise ValueError(f"labels must be 3D, got shape {lab.shape}")
        if lab.dtype != np.uint8:
            lab = lab.astype(np.uint8)
        if conf.shape != lab.shape:
            raise ValueError(
                f"{Plane(self.plane).name} confidence shape {conf.shape} "
                f"does not match labels {lab.shape}"
            )
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "confidence", conf)


@dataclass(frozen=True)
class FusedMask:
    """Fusion output: the fused labels plus optional per-voxel provenance."""

    mask: LabelMask
    provenance: np.ndarray | None = None


def fuse_voxel(
    labels: Sequence[int], confidences: Sequence[float]
) -> tuple[int, int]:
    """Fuse one voxel's three per-plane (label, confidence) pairs.

    Args:
        labels: (sagittal, coronal, axial) hard labels.
        confidences: matching per-plane confidences.

    Returns:
        (label, provenance byte).
    """
    if len(labels) != 3 or len(confidences) != 3:
        raise ValueError("fusion needs exactly three per-plane inputs")
    ls, lc, la = (int(v) for v in labels)
    if ls == lc or ls == la:
        return ls, provenance_byte(AGREEMENT, Plane.SAGITTAL)
    if lc == la:
        return lc, provenance_byte(AGREEMENT, Plane.CORONAL)
    best = int(np.argmax(np.asarray(confidences, dtype=np.float64)))
    return (ls, lc, la)[best], provenance_byte(FALLBACK, Plane(best))


def fuse_volume(
    predictions: Mapping[Plane, PlanePrediction],
    num_classes: int,
    record_provenance: bool = True,
) -> FusedMask:
    """Fuse three whole-volume plane predictions voxelwise.

    Vectorized equivalent of applying :func:`fuse_voxel` at every voxel.

    Raises:
        FusionShapeError: if a plane is missing or its dims disagree,
            naming the offending plane.
    """
    for plane in PLANES:
        if plane not in predictions:
            raise FusionShapeError(f"missing prediction for {plane.name} plane")
    ref_shape = predictions[Plane.SAGITTAL].labels.shape
    for plane in PLANES:
        got = predictions[plane].labels.shape
        if got != ref_shape:
            raise FusionShapeError(
                f"{plane.name} prediction shape {got} does not match {ref_shape}"
            )
    labs = np.stack([predictions[p].labels for p in PLANES])
    confs = np.stack([predictions[p].confidence for p in PLANES])
    top = int(labs.max())
    if top > num_classes:
        raise ValueError(f"plane prediction contains label {top} above K={num_classes}")

    agree_sc = labs[0] == labs[1]
    agree_sa = labs[0] == labs[2]
    agree_ca = labs[1] == labs[2]
    any_agree = agree_sc | agree_sa | agree_ca
    majority = np.where(agree_sc | agree_sa, labs[0], labs[1])

    best_plane = confs.argmax(axis=0).astype(np.uint8)
    flat_best = best_plane.reshape(-1)
    fallback = labs.reshape(3, -1)[flat_best, np.arange(flat_best.size)].reshape(ref_shape)

    fused = np.where(any_agree, majority, fallback).astype(np.uint8)
    provenance = None
    if record_provenance:
        agree_prov = np.where(agree_sc | agree_sa, provenance_byte(AGREEMENT, Plane.SAGITTAL),
                              provenance_byte(AGREEMENT, Plane.CORONAL))
        fall_prov = (FALLBACK << 2) | best_plane
        provenance = np.where(any_agree, agree_prov, fall_prov).astype(np.uint8)
    return FusedMask(
        mask=LabelMask(labels=fused, num_classes=num_classes),
        provenance=provenance,
    )


def predict_plane(
    model,
    volume: Volume,
    windows: tuple[WindowSpec, ...],
    plane: Plane,
    return_probs: bool = False,
):
    """Run one plane's segmenter over every slice of a volume.

    Args:
        model: any object with ``predict_hard`` (and optionally the faster
            ``predict_hard_stack`` / ``forward_stack``) plus ``forward``
            when ``return_probs`` is set.

    Returns:
        A :class:`PlanePrediction`, or ``(prediction, probs)`` with a tuple
        of per-slice ``(h, w, K+1)`` probability maps when ``return_probs``.
    """
    channels = windowed_channels(volume, windows)
    stack = slice_field(channels, plane)
    slices = np.stack(stack.slices)
    probs = None
    if return_probs and hasattr(model, "forward_stack"):
        prob_stack = model.forward_stack(slices)
        labels = prob_stack.argmax(axis=-1).astype(np.uint8)
        conf = prob_stack.max(axis=-1).astype(np.float32)
        probs = tuple(prob_stack[i] for i in range(prob_stack.shape[0]))
    elif return_probs:
        prob_list = [np.asarray(model.forward(s)) for s in stack.slices]
        labels = np.stack([p.argmax(axis=-1).astype(np.uint8) for p in prob_list])
        conf = np.stack([p.max(axis=-1).astype(np.float32) for p in prob_list])
        probs = tuple(prob_list)
    elif hasattr(model, "predict_hard_stack"):
        labels, conf = model.predict_hard_stack(slices)
    else:
        pairs = [model.predict_hard(s) for s in stack.slices]
        labels = np.stack([p[0] for p in pairs])
        conf = np.stack([p[1] for p in pairs])

    shape = volume.voxels.shape
    labels3d = stack_slices(SliceStack(plane, tuple(labels)), shape)
    conf3d = stack_slices(SliceStack(plane, tuple(conf)), shape)
    pred = PlanePrediction(plane=plane, labels=labels3d.astype(np.uint8),
                           confidence=conf3d.astype(np.float32))
    if return_probs:
        return pred, probs
    return pred


def predict_volume(
    models: Mapping[Plane, object],
    volume: Volume,
    windows: tuple[WindowSpec, ...],
    record_provenance: bool = True,
) -> tuple[FusedMask, dict[Plane, PlanePrediction]]:
    """Fused whole-volume inference through all three planes.

    Args:
        models: plane-indexed mapping of segmenters sharing one class count.

    Returns:
        (fused mask, per-plane predictions).
    """
    preds = {p: predict_plane(models[p], volume, windows, p) for p in PLANES}
    num_classes = int(models[Plane.SAGITTAL].num_classes)
    fused = fuse_volume(preds, num_classes, record_provenance=record_provenance)
    return fused, preds
