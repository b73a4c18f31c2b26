"""Synthetic abdominal-style phantoms with paired oracle masks.

A phantom case is a ``[z, y, x]`` HU volume plus its label mask: K geometric
organs (ellipsoids and capsules, one deliberately small) placed in fixed
organ-index order with seeded positional and size jitter, over a noisy
background.  Voxel intensities are the labeled region's HU mean plus seeded
Gaussian noise, a per-case global HU jitter, and an optional distribution
shift (constant HU offset, organ size scale).

A dataset is a labeled/unlabeled/test split with per-case seeds derived
disjointly from one master seed; unlabeled cases drop their masks, which are
returned separately as a hidden oracle for diagnostics only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core_volume import LabelMask, Volume
from .cotrain import Dataset
from .seeds import derive_seed

_PLACEMENT_ATTEMPTS = 50
# Retry placement when the candidate would be mostly swallowed by earlier
# organs; whatever overlap remains is resolved first-placed-wins.
_MAX_OVERLAP = 0.5


class PhantomGenerationError(RuntimeError):
    """Raised when an organ cannot be placed inside the volume."""


@dataclass(frozen=True)
class OrganTemplate:
    """Geometry of one organ, in fractions of the volume dims.

    ``center`` and sizes are (x, y, z) fractions.  For capsules, ``axis``
    is the direction of the central segment and ``half_length`` its half
    extent; ``size`` is the tube radius (x-fraction applies).
    """

    family: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    half_length: float = 0.0

    def __post_init__(self):
        if self.family not in ("ellipsoid", "capsule"):
            raise ValueError(f"unknown organ family {self.family!r}")


def _default_templates(num_organs: int) -> tuple[OrganTemplate, ...]:
    """Characteristic organ layout; the last organ is deliberately small.

    Organs 2 and 3 are congruent ellipsoids whose centers differ along a
    diagonal, so when their intensities are close the split is carried by
    position — every plane sees part of the separation, none all of it.
    """
    base = [
        OrganTemplate(
            "capsule",
            center=(0.32, 0.36, 0.40),
            size=(0.13, 0.13, 0.13),
            axis=(0.5, 0.6, 0.62),
            half_length=0.10,
        ),
        OrganTemplate("ellipsoid", center=(0.72, 0.36, 0.36), size=(0.14, 0.13, 0.14)),
        OrganTemplate("ellipsoid", center=(0.52, 0.72, 0.64), size=(0.14, 0.13, 0.14)),
    ]
    small = OrganTemplate("ellipsoid", center=(0.22, 0.74, 0.78), size=(0.065, 0.065, 0.065))
    if num_organs <= len(base):
        picked = base[: num_organs - 1] if num_organs > 1 else []
        return tuple(picked + [small])
    extra = []
    for k in range(len(base) + 1, num_organs):
        angle = 2.0 * np.pi * k / num_organs
        extra.append(
            OrganTemplate(
                "ellipsoid",
                center=(
                    0.5 + 0.24 * float(np.cos(angle)),
                    0.5 + 0.24 * float(np.sin(angle)),
                    0.3 + 0.4 * (k % 3) / 2.0,
                ),
                size=(0.09, 0.09, 0.09),
            )
        )
    return tuple(base + extra + [small])


@dataclass(frozen=True)
class PhantomSpec:
    """Everything that defines the phantom distribution.

    Organ k (1-based) has HU mean ``organ_mean_base + organ_mean_step * k``.
    ``noise_scale`` multiplies the per-region Gaussian stds; ``case_hu_jitter``
    is the span of a per-case global intensity offset (scanner variation).
    ``hu_offset`` and ``size_scale`` are the distribution-shift knobs.
    """

    dims: tuple[int, int, int] = (48, 48, 48)
    num_organs: int = 4
    organ_mean_base: float = -20.0
    organ_mean_step: float = 45.0
    organ_means: tuple[float, ...] | None = None
    organ_std: float = 12.0
    background_mean: float = -60.0
    background_std: float = 15.0
    noise_scale: float = 1.0
    case_hu_jitter: float = 6.0
    center_jitter: float = 0.07
    size_jitter: float = 0.15
    hu_offset: float = 0.0
    size_scale: float = 1.0
    templates: tuple[OrganTemplate, ...] | None = None

    def __post_init__(self):
        w, h, d = (int(v) for v in self.dims)
        if min(w, h, d) < 4:
            raise ValueError(f"dims too small to place organs: {self.dims}")
        object.__setattr__(self, "dims", (w, h, d))
        if self.num_organs < 1 or self.num_organs > 255:
            raise ValueError(f"num_organs must be in 1..255, got {self.num_organs}")
        for name in ("organ_std", "background_std", "noise_scale", "case_hu_jitter",
                     "center_jitter", "size_jitter", "size_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.templates is not None and len(self.templates) != self.num_organs:
            raise ValueError(
                f"{len(self.templates)} templates for {self.num_organs} organs"
            )
        if self.organ_means is not None:
            if len(self.organ_means) != self.num_organs:
                raise ValueError(
                    f"{len(self.organ_means)} organ means for {self.num_organs} organs"
                )
            object.__setattr__(
                self, "organ_means", tuple(float(v) for v in self.organ_means)
            )

    def resolved_templates(self) -> tuple[OrganTemplate, ...]:
        if self.templates is not None:
            return self.templates
        return _default_templates(self.num_organs)

    def organ_mean(self, organ: int) -> float:
        """HU mean of organ k (1-based): explicit override or the default ladder."""
        if self.organ_means is not None:
            return self.organ_means[organ - 1]
        return self.organ_mean_base + self.organ_mean_step * organ

    def stable_hash(self) -> str:
        """Content hash of this parameter set, stable across processes."""
        doc = {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in self.__dict__.items()
            if k != "templates"
        }
        doc["templates"] = [
            {
                "family": t.family,
                "center": list(t.center),
                "size": list(t.size),
                "axis": list(t.axis),
                "half_length": t.half_length,
            }
            for t in self.resolved_templates()
        ]
        blob = json.dumps(doc, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _grids(dims: tuple[int, int, int]):
    w, h, d = dims
    zs = np.arange(d, dtype=np.float64)[:, None, None]
    ys = np.arange(h, dtype=np.float64)[None, :, None]
    xs = np.arange(w, dtype=np.float64)[None, None, :]
    return xs, ys, zs


def _ellipsoid_voxels(dims, center, semi_axes) -> np.ndarray:
    xs, ys, zs = _grids(dims)
    cx, cy, cz = center
    ax, ay, az = semi_axes
    return (
        ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 + ((zs - cz) / az) ** 2
    ) <= 1.0


def _capsule_voxels(dims, p0, p1, radius) -> np.ndarray:
    xs, ys, zs = _grids(dims)
    seg = np.asarray(p1, dtype=np.float64) - np.asarray(p0, dtype=np.float64)
    seg_len2 = float(seg @ seg)
    dx, dy, dz = xs - p0[0], ys - p0[1], zs - p0[2]
    if seg_len2 == 0.0:
        t = 0.0
    else:
        t = np.clip((dx * seg[0] + dy * seg[1] + dz * seg[2]) / seg_len2, 0.0, 1.0)
    qx = dx - t * seg[0]
    qy = dy - t * seg[1]
    qz = dz - t * seg[2]
    return qx * qx + qy * qy + qz * qz <= radius * radius


def _fits(lo: np.ndarray, hi: np.ndarray, dims) -> bool:
    w, h, d = dims
    return bool((lo >= 0).all() and (hi <= np.asarray([w, h, d]) - 1).all())


def _place_organ(
    labels: np.ndarray, organ: int, template: OrganTemplate, spec: PhantomSpec,
    rng: np.random.Generator,
) -> None:
    w, h, d = spec.dims
    scale = np.asarray([w, h, d], dtype=np.float64)
    for _ in range(_PLACEMENT_ATTEMPTS):
        jitter = rng.uniform(-spec.center_jitter, spec.center_jitter, size=3)
        center = (np.asarray(template.center) + jitter) * scale
        grow = spec.size_scale * (1.0 + rng.uniform(-spec.size_jitter, spec.size_jitter))
        if template.family == "ellipsoid":
            semi = np.asarray(template.size) * scale * grow
            semi = np.maximum(semi, 0.75)
            lo, hi = center - semi, center + semi
            if not _fits(np.floor(lo), np.ceil(hi), spec.dims):
                continue
            candidate = _ellipsoid_voxels(labels.shape[::-1], center, semi)
        else:
            axis = np.asarray(template.axis, dtype=np.float64)
            axis = axis / np.linalg.norm(axis)
            half = template.half_length * float(scale.min()) * grow
            radius = max(template.size[0] * float(scale.min()) * grow, 0.75)
            p0 = center - half * axis
            p1 = center + half * axis
            lo = np.minimum(p0, p1) - radius
            hi = np.maximum(p0, p1) + radius
            if not _fits(np.floor(lo), np.ceil(hi), spec.dims):
                continue
            candidate = _capsule_voxels(labels.shape[::-1], p0, p1, radius)
        size = int(candidate.sum())
        if size == 0:
            continue
        taken = int(np.logical_and(candidate, labels > 0).sum())
        if taken / size > _MAX_OVERLAP:
            continue
        write = np.logical_and(candidate, labels == 0)
        labels[write] = organ
        return
    raise PhantomGenerationError(
        f"organ {organ} could not be placed after {_PLACEMENT_ATTEMPTS} attempts"
    )


def generate_case(spec: PhantomSpec, case_seed: int) -> tuple[Volume, LabelMask]:
    """Generate one phantom case deterministically from its seed.

    Organs are placed in index order (a voxel once labeled is never
    overwritten), then intensities are drawn in one pass: region HU mean +
    region std * noise_scale * N(0,1) + per-case jitter + ``hu_offset``.
    The noise field is drawn after placement from the same stream, so two
    specs differing only in ``hu_offset`` yield volumes differing by
    exactly that constant.
    """
    w, h, d = spec.dims
    rng = np.random.Generator(np.random.PCG64(int(case_seed)))
    labels = np.zeros((d, h, w), dtype=np.uint8)
    templates = spec.resolved_templates()
    for organ, template in enumerate(templates, start=1):
        _place_organ(labels, organ, template, spec, rng)

    case_shift = rng.uniform(-spec.case_hu_jitter, spec.case_hu_jitter)
    noise = rng.standard_normal(size=labels.shape)
    means = np.asarray(
        [spec.background_mean] + [spec.organ_mean(k) for k in range(1, spec.num_organs + 1)]
    )
    stds = np.asarray(
        [spec.background_std] + [spec.organ_std] * spec.num_organs
    )
    voxels = (
        means[labels]
        + noise * stds[labels] * spec.noise_scale
        + case_shift
        + spec.hu_offset
    )
    # Quantize to a 1/64 HU grid: every value stays exactly representable in
    # float32, so a constant grid-multiple hu_offset shifts voxels exactly.
    voxels = np.round(voxels * 64.0) / 64.0
    return (
        Volume(voxels=voxels.astype(np.float32), spacing=(1.0, 1.0, 1.0)),
        LabelMask(labels=labels, num_classes=spec.num_organs),
    )


def shifted(spec: PhantomSpec, hu_offset: float, size_scale: float) -> PhantomSpec:
    """Distribution-shifted copy of a spec (constant HU offset, size scale)."""
    return replace(spec, hu_offset=float(hu_offset), size_scale=float(size_scale))


@dataclass(frozen=True)
class CaseRecord:
    """Manifest row for one generated case."""

    case_id: str
    split: str
    seed: int
    spec_hash: str


def generate_dataset(
    spec: PhantomSpec,
    num_labeled: int,
    num_unlabeled: int,
    num_test: int,
    master_seed: int,
) -> tuple[Dataset, dict[str, LabelMask]]:
    """Generate a full split with disjoint per-case seeds.

    Returns:
        (dataset, hidden): the dataset, whose unlabeled cases carry no
        masks, and the hidden oracle masks of those unlabeled cases keyed
        by case id.  Hidden masks are for diagnostics only and must never
        reach training code.
    """
    if num_labeled < 1:
        raise ValueError("need at least one labeled case")
    if num_unlabeled < 0 or num_test < 0:
        raise ValueError("split counts must be >= 0")
    spec_hash = spec.stable_hash()
    records: list[CaseRecord] = []
    labeled = []
    unlabeled = []
    test = []
    hidden: dict[str, LabelMask] = {}
    for split, count in (("lab", num_labeled), ("unl", num_unlabeled), ("test", num_test)):
        for i in range(count):
            case_id = f"{split}{i:03d}"
            seed = derive_seed(master_seed, "phantom", split, str(i))
            records.append(CaseRecord(case_id, split, seed, spec_hash))
            volume, mask = generate_case(spec, seed)
            if split == "lab":
                labeled.append((case_id, volume, mask))
            elif split == "unl":
                unlabeled.append((case_id, volume))
                hidden[case_id] = mask
            else:
                test.append((case_id, volume, mask))
    seeds = [r.seed for r in records]
    if len(set(seeds)) != len(seeds):
        raise RuntimeError("derived case seeds collided; change the master seed")
    dataset = Dataset(
        labeled=tuple(labeled),
        unlabeled=tuple(unlabeled),
        test=tuple(test),
        num_classes=spec.num_organs,
        records=tuple(records),
    )
    return dataset, hidden


def save_dataset(
    dataset: Dataset,
    hidden: dict[str, LabelMask],
    out_dir: str | Path,
) -> None:
    """Persist a dataset: cases/, hidden/ and a JSON-lines manifest."""
    from .core_volume import save_mask, save_volume

    out = Path(out_dir)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    lines = []
    for record in dataset.records:
        lines.append(json.dumps(record.__dict__, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for case_id, volume, mask in dataset.labeled + dataset.test:
        save_volume(volume, out / "cases" / f"{case_id}.dmpv")
        save_mask(mask, out / "cases" / f"{case_id}.dmpl")
    for case_id, volume in dataset.unlabeled:
        save_volume(volume, out / "cases" / f"{case_id}.dmpv")
    if hidden:
        (out / "hidden").mkdir(exist_ok=True)
        for case_id, mask in hidden.items():
            save_mask(mask, out / "hidden" / f"{case_id}.dmpl")


def load_dataset(data_dir: str | Path) -> Dataset:
    """Load a persisted dataset from its manifest.

    Hidden oracle masks are intentionally not loaded here.

    Raises:
        FileNotFoundError: if the manifest or a referenced case is missing.
    """
    from .core_volume import load_mask, load_volume

    root = Path(data_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    records = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if line.strip():
            doc = json.loads(line)
            records.append(
                CaseRecord(doc["case_id"], doc["split"], int(doc["seed"]), doc["spec_hash"])
            )
    labeled = []
    unlabeled = []
    test = []
    num_classes = 0
    for record in records:
        volume = load_volume(root / "cases" / f"{record.case_id}.dmpv")
        if record.split == "unl":
            unlabeled.append((record.case_id, volume))
            continue
        mask = load_mask(root / "cases" / f"{record.case_id}.dmpl")
        num_classes = max(num_classes, mask.num_classes)
        if record.split == "lab":
            labeled.append((record.case_id, volume, mask))
        else:
            test.append((record.case_id, volume, mask))
    if num_classes == 0:
        raise ValueError(f"dataset under {root} has no masks to infer K from")
    return Dataset(
        labeled=tuple(labeled),
        unlabeled=tuple(unlabeled),
        test=tuple(test),
        num_classes=num_classes,
        records=tuple(records),
    )
