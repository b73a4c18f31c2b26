"""Evaluation: Dice-Sørensen scores, per-organ reports, paired significance.

The similarity between a predicted organ region Z and its reference Y is
``2|Z ∩ Y| / (|Z| + |Y|)``; two empty regions score 1.0 and exactly one
empty region scores 0.0.  Reports aggregate per organ over test cases with
sample standard deviations (ddof=1, zero for a single case) and close with
a mean row averaging the per-organ means (its std column averages the
per-organ stds).

``paired_significance`` is a two-sided Wilcoxon signed-rank test: zero
differences are dropped, tied absolute differences get average ranks, and
the p-value comes from exact sign enumeration below 10 effective pairs or
from the tie-corrected normal approximation otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core_volume import LabelMask

MEAN_ROW = "mean"
REPORT_COLUMNS = ("mode", "organ", "n", "mean_dsc", "std_dsc", "p_vs_baseline")


def dsc(prediction: LabelMask, truth: LabelMask, organ: int) -> float:
    """Dice-Sørensen coefficient of one organ between two masks.

    Raises:
        ValueError: on dims mismatch or an organ id outside 1..K.
    """
    if prediction.labels.shape != truth.labels.shape:
        raise ValueError(
            f"mask dims mismatch: {prediction.dims} vs {truth.dims}"
        )
    k = max(prediction.num_classes, truth.num_classes)
    if not 1 <= organ <= k:
        raise ValueError(f"organ id {organ} outside 1..{k}")
    z = prediction.labels == organ
    y = truth.labels == organ
    nz = int(z.sum())
    ny = int(y.sum())
    if nz == 0 and ny == 0:
        return 1.0
    inter = int(np.logical_and(z, y).sum())
    return 2.0 * inter / (nz + ny)


@dataclass(frozen=True)
class OrganReport:
    """Per-organ aggregate over a list of test cases."""

    organ: int
    case_ids: tuple[str, ...]
    per_case: tuple[float, ...]
    mean: float
    std: float

    @property
    def n(self) -> int:
        return len(self.per_case)


@dataclass(frozen=True)
class EvaluationResult:
    """Evaluation of one model bundle over one test split."""

    mode: str
    organ_reports: tuple[OrganReport, ...]
    mean_dsc: float
    mean_std: float

    @property
    def n_cases(self) -> int:
        return self.organ_reports[0].n if self.organ_reports else 0


def aggregate_scores(
    mode: str, case_ids: Sequence[str], per_organ: Mapping[int, Sequence[float]]
) -> EvaluationResult:
    """Build an EvaluationResult from raw per-case, per-organ scores."""
    reports = []
    for organ in sorted(per_organ):
        vals = [float(v) for v in per_organ[organ]]
        if len(vals) != len(case_ids):
            raise ValueError(
                f"organ {organ} has {len(vals)} scores for {len(case_ids)} cases"
            )
        arr = np.asarray(vals, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(vals) > 1 else 0.0
        reports.append(
            OrganReport(
                organ=organ,
                case_ids=tuple(case_ids),
                per_case=tuple(vals),
                mean=float(arr.mean()),
                std=std,
            )
        )
    means = [r.mean for r in reports]
    stds = [r.std for r in reports]
    return EvaluationResult(
        mode=mode,
        organ_reports=tuple(reports),
        mean_dsc=float(np.mean(means)) if means else 0.0,
        mean_std=float(np.mean(stds)) if stds else 0.0,
    )


def evaluate_predictions(
    mode: str, pairs: Sequence[tuple[str, LabelMask, LabelMask]], num_classes: int
) -> EvaluationResult:
    """Score (case_id, predicted, truth) triples over every organ."""
    if not pairs:
        raise ValueError("cannot evaluate an empty test set")
    case_ids = [p[0] for p in pairs]
    per_organ = {
        organ: [dsc(pred, truth, organ) for _, pred, truth in pairs]
        for organ in range(1, num_classes + 1)
    }
    return aggregate_scores(mode, case_ids, per_organ)


def _eval_task(args):
    models, volume, windows = args
    from .fusion import predict_volume

    fused, _ = predict_volume(models, volume, windows, record_provenance=False)
    return fused.mask


def evaluate_models(
    models,
    test_cases: Sequence[tuple[str, object, LabelMask]],
    windows,
    mode: str = "dmpct",
    workers: int = 1,
) -> EvaluationResult:
    """Run fused inference over the test split and score every organ.

    ``models`` maps each plane to a trained segmenter (a bundle works);
    inference parallelizes over volumes and is bit-identical for any
    worker count because each volume's prediction is self-contained.
    """
    from .planar import Plane
    from .workers import parallel_map

    if not test_cases:
        raise ValueError("cannot evaluate an empty test set")
    num_classes = int(models[Plane.SAGITTAL].num_classes)
    for case_id, _, truth in test_cases:
        if truth.num_classes != num_classes:
            raise ValueError(
                f"case {case_id}: mask K={truth.num_classes} does not match "
                f"model K={num_classes}"
            )
    tasks = [(models, volume, windows) for _, volume, _ in test_cases]
    predicted = parallel_map(_eval_task, tasks, workers)
    pairs = [
        (case_id, pred, truth)
        for (case_id, _, truth), pred in zip(test_cases, predicted)
    ]
    return evaluate_predictions(mode, pairs, num_classes)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties replaced by their group's average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def paired_significance(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired score lists.

    Zero differences are dropped; if every pair is tied the p-value is 1.0.
    Below 10 effective pairs the null distribution of the positive-rank sum
    is enumerated exactly over all sign assignments (conditional on the
    observed ranks); otherwise the tie-corrected normal approximation is
    used without continuity correction.

    Raises:
        ValueError: if the lists differ in length or have fewer than 5 pairs.
    """
    xs = np.asarray(a, dtype=np.float64)
    ys = np.asarray(b, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"paired lists must share one shape, got {xs.shape} vs {ys.shape}")
    if len(xs) < 5:
        raise ValueError(f"need at least 5 pairs, got {len(xs)}")
    diffs = ys - xs
    diffs = diffs[diffs != 0.0]
    n = len(diffs)
    if n == 0:
        return 1.0
    ranks = _average_ranks(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    total = float(ranks.sum())

    if n < 10:
        # Work on doubled ranks so tie-averaged halves stay exact integers.
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        patterns = np.arange(1 << n, dtype=np.uint32)
        bits = (patterns[:, None] >> np.arange(n)) & 1
        w_all = bits @ doubled
        w_obs = int(round(2.0 * w_plus))
        w_lo = min(w_obs, int(round(2.0 * total)) - w_obs)
        p = 2.0 * float((w_all <= w_lo).sum()) / float(1 << n)
        return min(1.0, p)

    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, counts = np.unique(np.abs(diffs), return_counts=True)
    var -= float(((counts.astype(np.float64) ** 3) - counts).sum()) / 48.0
    if var <= 0:
        return 1.0
    z = abs(w_plus - mean) / math.sqrt(var)
    return min(1.0, 2.0 * _normal_sf(z))


def result_rows(
    result: EvaluationResult, p_values: Mapping[int | str, float] | None = None
) -> list[dict]:
    """Flatten an EvaluationResult into report rows (one per organ + mean)."""
    p_values = p_values or {}
    rows = []
    for rep in result.organ_reports:
        rows.append(
            {
                "mode": result.mode,
                "organ": str(rep.organ),
                "n": rep.n,
                "mean_dsc": rep.mean,
                "std_dsc": rep.std,
                "p_vs_baseline": p_values.get(rep.organ, ""),
            }
        )
    rows.append(
        {
            "mode": result.mode,
            "organ": MEAN_ROW,
            "n": result.n_cases,
            "mean_dsc": result.mean_dsc,
            "std_dsc": result.mean_std,
            "p_vs_baseline": p_values.get(MEAN_ROW, ""),
        }
    )
    return rows


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_csv(rows: Sequence[dict], path: str | Path) -> None:
    """Write report rows as CSV with the fixed column schema."""
    lines = [",".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append(",".join(_cell(row[c]) for c in REPORT_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_result_json(result: EvaluationResult, path: str | Path) -> None:
    """Persist an evaluation, including per-case scores, as stable JSON."""
    doc = {
        "mode": result.mode,
        "mean_dsc": result.mean_dsc,
        "mean_std": result.mean_std,
        "organs": [
            {
                "organ": rep.organ,
                "case_ids": list(rep.case_ids),
                "per_case": list(rep.per_case),
                "mean": rep.mean,
                "std": rep.std,
            }
            for rep in result.organ_reports
        ],
    }
    Path(path).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_result_json(path: str | Path) -> EvaluationResult:
    """Inverse of :func:`write_result_json`."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    reports = tuple(
        OrganReport(
            organ=int(o["organ"]),
            case_ids=tuple(o["case_ids"]),
            per_case=tuple(float(v) for v in o["per_case"]),
            mean=float(o["mean"]),
            std=float(o["std"]),
        )
        for o in doc["organs"]
    )
    return EvaluationResult(
        mode=doc["mode"],
        organ_reports=reports,
        mean_dsc=float(doc["mean_dsc"]),
        mean_std=float(doc["mean_std"]),
    )


def comparison_rows(
    results: Sequence[EvaluationResult], baseline_mode: str = "fcn"
) -> list[dict]:
    """Merge evaluations of several modes into one comparison table.

    Each non-baseline organ row carries the paired significance of its
    per-case scores against the baseline mode's, aligned by case id.
    """
    baseline = next((r for r in results if r.mode == baseline_mode), None)
    rows: list[dict] = []
    for result in results:
        p_values: dict[int | str, float] = {}
        if baseline is not None and result.mode != baseline.mode:
            base_by_organ = {rep.organ: rep for rep in baseline.organ_reports}
            for rep in result.organ_reports:
                base = base_by_organ.get(rep.organ)
                if base is not None and base.case_ids == rep.case_ids and rep.n >= 5:
                    p_values[rep.organ] = paired_significance(base.per_case, rep.per_case)
            if len(p_values) == len(result.organ_reports) and result.organ_reports:
                base_means = _per_case_means(baseline)
                ours = _per_case_means(result)
                if base_means is not None and ours is not None:
                    p_values[MEAN_ROW] = paired_significance(base_means, ours)
        rows.extend(result_rows(result, p_values))
    return rows


def _per_case_means(result: EvaluationResult) -> list[float] | None:
    """Mean DSC across organs per test case, for the mean-row significance."""
    if not result.organ_reports:
        return None
    ids = result.organ_reports[0].case_ids
    if any(rep.case_ids != ids for rep in result.organ_reports):
        return None
    stacked = np.asarray([rep.per_case for rep in result.organ_reports])
    return [float(v) for v in stacked.mean(axis=0)]
