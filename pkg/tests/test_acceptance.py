"""Acceptance suite: one test per shipped acceptance criterion.

Every test prints one ``ACCEPTANCE <n> <name>: PASS|FAIL`` line (to the
real stderr, so it survives pytest's capture) before asserting.  Criteria
1-5 and 9 are fast, self-contained oracle checks.  Criteria 6-8 share one
session-scoped experiment that trains all three modes on five master
seeds at the full 48^3 scale and takes ~15 minutes on a laptop CPU.
"""

import sys
import time
from dataclasses import dataclass

import numpy as np
import pytest
import scipy.stats

from mpcotrain import (
    CotrainSettings,
    Dataset,
    LabelMask,
    PatchFeatureSpec,
    Plane,
    SoftmaxSegmenter,
    TrainConfig,
    dsc,
    fuse_voxel,
    paired_significance,
    run_dmpct,
    slice_field,
    stack_slices,
)
from mpcotrain.backbone import _loss_and_grads_core, _loss_core
from mpcotrain.cli import main as cli_main
from mpcotrain.metrics import load_result_json

from conftest import random_mask, random_volume


@pytest.fixture(scope="session")
def live_stderr(pytestconfig):
    """Writer that suspends pytest's capture so acceptance lines stream live.

    pytest captures at the file-descriptor level, so plain writes to
    ``sys.__stderr__`` would be swallowed until a failure report.
    """
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def write(line: str) -> None:
        if capman is None:
            sys.stderr.write(line)
            sys.stderr.flush()
            return
        with capman.global_and_fixture_disabled():
            sys.stderr.write(line)
            sys.stderr.flush()

    return write


def announce(live, num: int, name: str, ok: bool) -> bool:
    line = f"ACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'}\n"
    live(line)
    print(line, end="")
    return ok


# --- 1. fusion oracle equivalence -----------------------------------------


def reference_fusion(labels: list, confs: list) -> int:
    """Independent brute-force fusion: literal two-of-three majority count,
    confidence maximum with lower plane index breaking exact ties."""
    for candidate in labels:
        if labels.count(candidate) >= 2:
            return candidate
    best = 0
    for i in (1, 2):
        if confs[i] > confs[best]:
            best = i
    return labels[best]


def test_acceptance_1_fusion_oracle(live_stderr):
    rng = np.random.default_rng(101_1)
    total, per_k = 100_000, 25_000
    all_labels, all_confs = [], []
    for k in (1, 2, 3, 4):
        all_labels.append(rng.integers(0, k + 1, size=(per_k, 3)))
        all_confs.append(rng.random((per_k, 3)))
    labels = np.concatenate(all_labels).tolist()
    confs = np.concatenate(all_confs)
    # Inject exact confidence ties so the priority path is exercised too.
    confs[::7, 1] = confs[::7, 0]
    confs[::13, 2] = confs[::13, 0]
    confs = confs.tolist()

    start = time.perf_counter()
    mismatches = sum(
        1
        for lab, conf in zip(labels, confs)
        if fuse_voxel(lab, conf)[0] != reference_fusion(lab, conf)
    )
    elapsed = time.perf_counter() - start

    ok = mismatches == 0 and elapsed < 5.0
    announce(live_stderr, 1, "fusion-oracle", ok)
    assert mismatches == 0, f"{mismatches}/{total} voxels disagree with the oracle"
    assert elapsed < 5.0, f"fusion oracle sweep took {elapsed:.2f}s (budget 5s)"


# --- 2. gradient correctness ----------------------------------------------


def fd_gradient(params: dict, feats: np.ndarray, labels: np.ndarray, h: float = 1e-6) -> dict:
    out = {}
    for key, arr in params.items():
        if arr is None:
            out[key] = None
            continue
        grad = np.zeros_like(arr)
        flat, gflat = arr.ravel(), grad.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = _loss_core(params, feats, labels)
            flat[j] = orig - h
            down = _loss_core(params, feats, labels)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * h)
        out[key] = grad
    return out


def random_state(rng: np.random.Generator, hidden: int) -> SoftmaxSegmenter:
    spec = PatchFeatureSpec(channels=2, pooling_radii=(1,))
    k = int(rng.integers(1, 4))
    f = spec.feature_dim
    width = hidden if hidden else f
    return SoftmaxSegmenter(
        out_weights=rng.normal(0, 0.5, size=(k + 1, width)),
        out_bias=rng.normal(0, 0.5, size=k + 1),
        hidden_weights=rng.normal(0, 0.5, size=(hidden, f)) if hidden else None,
        hidden_bias=rng.normal(0, 0.5, size=hidden) if hidden else None,
        feature_spec=spec,
        num_classes=k,
    )


def test_acceptance_2_gradient_check(live_stderr):
    rng = np.random.default_rng(101_2)
    start = time.perf_counter()
    worst = 0.0
    for i in range(50):
        state = random_state(rng, hidden=0 if i % 2 == 0 else int(rng.integers(2, 4)))
        params = state._params64()
        n_pix = int(rng.integers(6, 16))
        feats = rng.normal(0, 1, size=(n_pix, state.feature_spec.feature_dim))
        labels = rng.integers(0, state.num_classes + 1, size=n_pix)
        _, analytic = _loss_and_grads_core(params, feats, labels)
        numeric = fd_gradient(params, feats, labels)
        for key, num in numeric.items():
            if num is None:
                continue
            ana = analytic[key]
            rel = np.abs(ana - num) / np.maximum.reduce(
                [np.abs(ana), np.abs(num), np.full_like(num, 1e-8)]
            )
            worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - start

    ok = worst <= 1e-4 and elapsed < 30.0
    announce(live_stderr, 2, "gradient-check", ok)
    assert worst <= 1e-4, f"max relative gradient error {worst:.3e} exceeds 1e-4"
    assert elapsed < 30.0, f"gradient sweep took {elapsed:.2f}s (budget 30s)"


# --- 3. slice/stack round-trip ---------------------------------------------


def test_acceptance_3_slice_roundtrip(live_stderr):
    rng = np.random.default_rng(101_3)
    failures = 0
    cases = 0
    for _ in range(200):
        shape = tuple(int(s) for s in rng.integers(2, 9, size=3))
        vol = rng.uniform(-400.0, 600.0, size=shape).astype(np.float32)
        mask = rng.integers(0, 5, size=shape).astype(np.uint8)
        for field in (vol, mask):
            for plane in Plane:
                rebuilt = stack_slices(slice_field(field, plane), field.shape)
                cases += 1
                if rebuilt.dtype != field.dtype or rebuilt.tobytes() != field.tobytes():
                    failures += 1

    ok = failures == 0 and cases == 200 * 2 * 3
    announce(live_stderr, 3, "slice-roundtrip", ok)
    assert failures == 0, f"{failures}/{cases} round-trips were not bit-exact"
    assert cases == 1200


# --- 4. dice oracle ----------------------------------------------------------


def brute_force_dice(pred: np.ndarray, truth: np.ndarray, organ: int) -> float:
    n_pred = n_truth = n_both = 0
    d, h, w = pred.shape
    for z in range(d):
        for y in range(h):
            for x in range(w):
                in_pred = pred[z, y, x] == organ
                in_truth = truth[z, y, x] == organ
                n_pred += in_pred
                n_truth += in_truth
                n_both += in_pred and in_truth
    if n_pred == 0 and n_truth == 0:
        return 1.0
    if n_pred == 0 or n_truth == 0:
        return 0.0
    return 2 * n_both / (n_pred + n_truth)


def test_acceptance_4_dsc_oracle(rng, live_stderr):
    mismatches = 0
    for _ in range(100):
        organ = int(rng.integers(1, 5))
        a = random_mask(rng)
        b = random_mask(rng)
        expected = brute_force_dice(a.labels, b.labels, organ)
        if dsc(a, b, organ) != expected:
            mismatches += 1

    # The four documented edge cases, built on a 10-voxel line.
    def line_mask(positions):
        arr = np.zeros((1, 2, 5), dtype=np.uint8)
        arr.ravel()[list(positions)] = 1
        return LabelMask(labels=arr, num_classes=1)

    identical = line_mask([0, 3, 7])
    edges_ok = (
        dsc(identical, line_mask([0, 3, 7]), 1) == 1.0
        and dsc(line_mask([0, 1, 2, 3]), line_mask([1, 2, 3, 5, 6, 8]), 1) == 0.6
        and dsc(line_mask([0, 1]), line_mask([4, 5]), 1) == 0.0
        and dsc(line_mask([]), line_mask([]), 1) == 1.0
    )

    ok = mismatches == 0 and edges_ok
    announce(live_stderr, 4, "dsc-oracle", ok)
    assert mismatches == 0, f"{mismatches}/100 dice values disagree with brute-force counting"
    assert edges_ok, "one of the four edge-case examples failed"


# --- 5. training-loop trace --------------------------------------------------


def trace_dataset(rng) -> Dataset:
    dims, k = (5, 5, 5), 2
    return Dataset(
        labeled=tuple(
            (f"lab{i}", random_volume(rng, shape=dims), random_mask(rng, shape=dims, num_classes=k))
            for i in range(2)
        ),
        unlabeled=tuple((f"unl{i}", random_volume(rng, shape=dims)) for i in range(2)),
        test=(("test0", random_volume(rng, shape=dims), random_mask(rng, shape=dims, num_classes=k)),),
        num_classes=k,
    )


def test_acceptance_5_loop_trace(rng, live_stderr):
    budget = TrainConfig(
        num_classes=2,
        iterations=2,
        batch_slices=2,
        pixels_per_slice=8,
        feature_spec=PatchFeatureSpec(channels=3, pooling_radii=(1,)),
    )
    dataset = trace_dataset(rng)
    plane_names = [p.name for p in Plane]
    round_block = [("train", name) for name in plane_names] + [("fuse", None), ("pseudo-label", None)]

    ok = True
    details = []
    for rounds in (1, 2, 3):
        settings = CotrainSettings(teacher=budget, student=budget, rounds=rounds, seed=31)
        _, runlog = run_dmpct(dataset, settings)
        trace = [(e.action, e.plane) for e in runlog.events]
        expected = round_block * rounds + [("train", name) for name in plane_names]
        train_counts = {
            name: sum(1 for a, p in trace if a == "train" and p == name) for name in plane_names
        }
        pseudo_count = sum(1 for a, _ in trace if a == "pseudo-label")
        round_ok = (
            trace == expected
            and all(c == rounds + 1 for c in train_counts.values())
            and pseudo_count == rounds
        )
        ok = ok and round_ok
        details.append((rounds, trace, expected))

    announce(live_stderr, 5, "loop-trace", ok)
    for rounds, trace, expected in details:
        assert trace == expected, f"rounds={rounds}: trace {trace} != expected {expected}"


# --- 6-8. full-scale experiment (shared fixture) -----------------------------

SEEDS = (101, 202, 303, 404, 505)
TUNED_MEANS = "organ_means = 255.0, 145.0, 145.0, 350.0"
MODES_UNDER_TEST = ("fcn", "spsl", "dmpct")


def run_cli(*args) -> None:
    code = cli_main([str(a) for a in args])
    assert code == 0, f"cli {args[0]} exited {code}"


@dataclass
class SeedOutcome:
    base: dict  # mode -> mean dice on the in-distribution test split
    shifted: dict  # mode -> mean dice on the shifted test split
    runtime: float  # wall time of dataset + three trainings + three evals


@dataclass
class ExperimentOutcome:
    seeds: dict  # master seed -> SeedOutcome
    reports_w1: dict  # "result/<mode>" and "report" -> bytes (seed 101, 1 worker)
    reports_w4: dict  # same artifacts rerun with 4 workers


def _mode_artifacts(seed_dir) -> dict:
    arts = {}
    for mode in MODES_UNDER_TEST:
        arts[f"result/{mode}"] = (seed_dir / f"eval_{mode}" / "result.json").read_bytes()
    arts["report"] = (seed_dir / "report.csv").read_bytes()
    return arts


def _run_trio(seed_dir, config_path, data_dir, workers: int) -> dict:
    """Train and evaluate all three modes on one dataset; returns mean dice."""
    means = {}
    for mode in MODES_UNDER_TEST:
        run_dir = seed_dir / f"run_{mode}"
        run_cli(
            "cotrain", "--config", config_path, "--mode", mode, "--workers", workers,
            "--data", data_dir, "--out", run_dir,
        )
        eval_dir = seed_dir / f"eval_{mode}"
        run_cli(
            "evaluate", "--config", config_path, "--mode", mode, "--workers", workers,
            "--models", run_dir, "--data", data_dir, "--out", eval_dir,
        )
        means[mode] = load_result_json(eval_dir / "result.json").mean_dsc
    run_cli(
        "report", *(seed_dir / f"eval_{mode}" for mode in MODES_UNDER_TEST),
        "--baseline", "fcn", "--out", seed_dir / "report.csv",
    )
    return means


@pytest.fixture(scope="session")
def experiment(tmp_path_factory, live_stderr) -> ExperimentOutcome:
    root = tmp_path_factory.mktemp("experiment")
    outcomes = {}
    for master in SEEDS:
        seed_dir = root / f"seed_{master}"
        seed_dir.mkdir()
        base_cfg = seed_dir / "base.cfg"
        base_cfg.write_text(f"seed = {master}\n{TUNED_MEANS}\n")
        shifted_cfg = seed_dir / "shifted.cfg"
        shifted_cfg.write_text(
            f"seed = {master}\n{TUNED_MEANS}\nhu_offset = 40.0\nsize_scale = 1.2\n"
        )

        start = time.perf_counter()
        base_data = seed_dir / "data"
        run_cli("generate", "--config", base_cfg, "--out", base_data)
        base = _run_trio(seed_dir, base_cfg, base_data, workers=1)
        runtime = time.perf_counter() - start

        shifted_data = seed_dir / "data_shifted"
        run_cli("generate", "--config", shifted_cfg, "--out", shifted_data)
        shifted = {}
        for mode in ("fcn", "dmpct"):
            eval_dir = seed_dir / f"eval_{mode}_shifted"
            run_cli(
                "evaluate", "--config", base_cfg, "--mode", mode, "--workers", 1,
                "--models", seed_dir / f"run_{mode}", "--data", shifted_data,
                "--out", eval_dir,
            )
            shifted[mode] = load_result_json(eval_dir / "result.json").mean_dsc

        outcomes[master] = SeedOutcome(base=base, shifted=shifted, runtime=runtime)
        live_stderr(
            "    [experiment] "
            f"seed {master}: "
            + " ".join(f"{m}={base[m]:.4f}" for m in MODES_UNDER_TEST)
            + f" | shifted fcn={shifted['fcn']:.4f} dmpct={shifted['dmpct']:.4f}"
            + f" | {runtime:.0f}s\n"
        )

    # Rerun the first seed end-to-end with four workers for the
    # bit-identical-reports check.
    reports_w1 = _mode_artifacts(root / f"seed_{SEEDS[0]}")
    w4_dir = root / f"seed_{SEEDS[0]}_w4"
    w4_dir.mkdir()
    w4_cfg = w4_dir / "base.cfg"
    w4_cfg.write_text(f"seed = {SEEDS[0]}\n{TUNED_MEANS}\n")
    w4_data = w4_dir / "data"
    run_cli("generate", "--config", w4_cfg, "--out", w4_data)
    _run_trio(w4_dir, w4_cfg, w4_data, workers=4)
    reports_w4 = _mode_artifacts(w4_dir)
    live_stderr("    [experiment] 4-worker rerun of the first seed complete\n")

    return ExperimentOutcome(seeds=outcomes, reports_w1=reports_w1, reports_w4=reports_w4)


def test_acceptance_6_trend(experiment, live_stderr):
    means = {
        mode: float(np.mean([o.base[mode] for o in experiment.seeds.values()]))
        for mode in MODES_UNDER_TEST
    }
    total_runtime = sum(o.runtime for o in experiment.seeds.values())
    band_ok = 0.55 <= means["fcn"] <= 0.80
    gap_fcn = means["dmpct"] - means["fcn"]
    gap_spsl = means["dmpct"] - means["spsl"]

    ok = band_ok and gap_fcn >= 0.02 and gap_spsl >= 0.0 and total_runtime <= 900.0
    announce(live_stderr, 6, "trend", ok)
    assert band_ok, f"supervised mean dice {means['fcn']:.4f} outside the 0.55-0.80 band"
    assert gap_fcn >= 0.02, f"dmpct {means['dmpct']:.4f} vs fcn {means['fcn']:.4f}: gap {gap_fcn:.4f} < 0.02"
    assert gap_spsl >= 0.0, f"dmpct {means['dmpct']:.4f} below spsl {means['spsl']:.4f}"
    assert total_runtime <= 900.0, f"experiment took {total_runtime:.0f}s (budget 900s)"


def test_acceptance_7_domain_shift(experiment, live_stderr):
    wins = sum(1 for o in experiment.seeds.values() if o.shifted["dmpct"] >= o.shifted["fcn"])

    ok = wins >= 4
    announce(live_stderr, 7, "domain-shift", ok)
    detail = {m: o.shifted for m, o in experiment.seeds.items()}
    assert wins >= 4, f"dmpct beat fcn on the shifted split in only {wins}/5 seeds: {detail}"


def test_acceptance_8_worker_determinism(experiment, live_stderr):
    diffs = [
        name
        for name in experiment.reports_w1
        if experiment.reports_w1[name] != experiment.reports_w4[name]
    ]

    ok = not diffs
    announce(live_stderr, 8, "worker-determinism", ok)
    assert not diffs, f"artifacts differ between 1-worker and 4-worker runs: {diffs}"


# --- 9. significance machinery -----------------------------------------------


def test_acceptance_9_significance(live_stderr):
    rng = np.random.default_rng(101_9)
    worst = 0.0
    for trial in range(25):
        a = rng.uniform(0.3, 0.9, size=12)
        if trial % 3 == 0:
            b = a + 0.1  # constant uniform improvement: all ranks tied
        else:
            b = a + rng.normal(0.0, 0.05, size=12)
        if trial % 5 == 0:
            a, b = np.round(a, 1), np.round(b, 1)  # force tied differences
        if np.any(a == b):
            b = b + 1e-3  # the reference and ours drop zeros identically; keep n = 12
        ours = paired_significance(a.tolist(), b.tolist())
        ref = float(scipy.stats.wilcoxon(a, b, correction=False, method="approx").pvalue)
        worst = max(worst, abs(ours - ref))

    same = [0.61, 0.72, 0.55, 0.81, 0.64, 0.59, 0.77, 0.70, 0.66, 0.62, 0.74, 0.69]
    identical_ok = paired_significance(same, list(same)) == 1.0

    ok = worst <= 1e-6 and identical_ok
    announce(live_stderr, 9, "significance", ok)
    assert worst <= 1e-6, f"max |p - reference| = {worst:.3e} exceeds 1e-6"
    assert identical_ok, "identical lists must give p = 1.0"
