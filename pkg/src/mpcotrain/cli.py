"""Command-line surface: generate / train / pseudolabel / cotrain / evaluate / report.

Every run directory is self-describing: the resolved config echo, a small
run manifest and the runlog land next to the checkpoints, so a report can
be re-derived without re-running inference.  All failures exit nonzero
after printing a single ``error: ...`` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .backbone import load_model
from .config import ExperimentConfig, ConfigError, format_config, load_config
from .core_volume import FileFormatError, save_mask
from .cotrain import (
    MODES,
    CotrainAborted,
    Dataset,
    PlaneModelBundle,
    generate_pseudo_labels,
    run_mode,
)
from .metrics import (
    comparison_rows,
    evaluate_models,
    load_result_json,
    result_rows,
    write_report_csv,
    write_result_json,
)
from .phantom import generate_dataset, load_dataset, save_dataset
from .planar import PLANES, Plane


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpcotrain",
        description="Multi-planar co-training for volumetric segmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, data: bool = True):
        p.add_argument("--config", type=Path, default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--workers", type=int, default=None, help="worker count override")
        if data:
            p.add_argument("--data", type=Path, required=True, help="dataset directory")

    gen = sub.add_parser("generate", help="generate a phantom dataset")
    common(gen, data=False)
    gen.add_argument("--out", type=Path, required=True, help="output dataset directory")

    train = sub.add_parser("train", help="train the supervised teacher bundle")
    common(train)
    train.add_argument("--out", type=Path, required=True, help="run directory")

    pseudo = sub.add_parser("pseudolabel", help="fuse pseudo-labels for unlabeled cases")
    common(pseudo)
    pseudo.add_argument("--models", type=Path, required=True,
                        help="run or round directory holding model_[SCA].dmpw")
    pseudo.add_argument("--out", type=Path, required=True, help="output mask directory")

    cot = sub.add_parser("cotrain", help="run a full co-training mode end-to-end")
    common(cot)
    cot.add_argument("--out", type=Path, required=True, help="run directory")
    cot.add_argument("--mode", choices=MODES, default=None, help="mode override")

    ev = sub.add_parser("evaluate", help="score a model bundle on the test split")
    common(ev)
    ev.add_argument("--models", type=Path, required=True,
                    help="run or round directory holding model_[SCA].dmpw")
    ev.add_argument("--out", type=Path, required=True, help="evaluation output directory")
    ev.add_argument("--mode", choices=MODES, default=None,
                    help="row label for the report (defaults to the config mode)")

    rep = sub.add_parser("report", help="merge evaluations into one comparison table")
    rep.add_argument("inputs", type=Path, nargs="+",
                     help="evaluation directories or result.json files")
    rep.add_argument("--out", type=Path, required=True, help="merged CSV path")
    rep.add_argument("--baseline", default="fcn", help="baseline mode for p-values")
    return parser


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config is not None else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    return replace(config, **overrides) if overrides else config


def _write_run_files(out_dir: Path, config: ExperimentConfig, command: str,
                     data_dir: Path | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = format_config(config)
    (out_dir / "config.txt").write_text(echo, encoding="utf-8")
    manifest = {
        "command": command,
        "mode": config.mode,
        "seed": config.seed,
        "data_dir": str(data_dir) if data_dir is not None else None,
    }
    (out_dir / "run.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    sys.stdout.write(echo)


def _find_round_dir(root: Path) -> Path:
    if (root / "model_S.dmpw").is_file():
        return root
    best = None
    best_round = -1
    for candidate in root.glob("round_*"):
        suffix = candidate.name.rsplit("_", 1)[-1]
        if not suffix.isdigit():
            continue
        if all((candidate / f"model_{p.name[0]}.dmpw").is_file() for p in PLANES):
            if int(suffix) > best_round:
                best_round = int(suffix)
                best = candidate
    if best is None:
        raise FileNotFoundError(f"no model checkpoints found under {root}")
    return best


def _load_bundle(models_dir: Path) -> PlaneModelBundle:
    round_dir = _find_round_dir(models_dir)
    loaded = {}
    for plane in PLANES:
        path = round_dir / f"model_{plane.name[0]}.dmpw"
        if not path.is_file():
            raise FileNotFoundError(f"missing model file: {path}")
        model, tagged_plane = load_model(path)
        if tagged_plane != plane:
            raise ValueError(
                f"{path} is tagged for the {tagged_plane.name} plane, "
                f"expected {plane.name}"
            )
        loaded[plane] = model
    return PlaneModelBundle(
        sagittal=loaded[Plane.SAGITTAL],
        coronal=loaded[Plane.CORONAL],
        axial=loaded[Plane.AXIAL],
    )


def _load_dataset_checked(data_dir: Path, config: ExperimentConfig) -> Dataset:
    dataset = load_dataset(data_dir)
    if dataset.num_classes != config.num_classes:
        raise ValueError(
            f"dataset under {data_dir} has K={dataset.num_classes}, "
            f"config expects K={config.num_classes}"
        )
    return dataset


def _cmd_generate(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    _write_run_files(args.out, config, "generate", None)
    dataset, hidden = generate_dataset(
        config.phantom_spec(),
        config.num_labeled,
        config.num_unlabeled,
        config.num_test,
        config.seed,
    )
    save_dataset(dataset, hidden, args.out)
    print(
        f"generated {len(dataset.labeled)} labeled / {len(dataset.unlabeled)} "
        f"unlabeled / {len(dataset.test)} test cases under {args.out}"
    )
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = replace(_resolve_config(args), mode="fcn")
    dataset = _load_dataset_checked(args.data, config)
    _write_run_files(args.out, config, "train", args.data)
    bundle, runlog = run_mode("fcn", dataset, config.cotrain_settings(), out_dir=args.out)
    print(f"trained teacher bundle (K={bundle.num_classes}) -> {args.out}/round_1")
    return 0


def _cmd_pseudolabel(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    dataset = _load_dataset_checked(args.data, config)
    bundle = _load_bundle(args.models)
    if bundle.num_classes != dataset.num_classes:
        raise ValueError(
            f"model bundle K={bundle.num_classes} does not match "
            f"dataset K={dataset.num_classes}"
        )
    args.out.mkdir(parents=True, exist_ok=True)
    pairs = generate_pseudo_labels(bundle, dataset.unlabeled, config.cotrain_settings())
    for case_id, fused in pairs:
        save_mask(fused.mask, args.out / f"{case_id}.dmpl")
        if fused.provenance is not None:
            from .core_volume import LabelMask

            save_mask(
                LabelMask(labels=fused.provenance, num_classes=6),
                args.out / f"{case_id}.prov.dmpl",
            )
    print(f"wrote {len(pairs)} pseudo-label masks to {args.out}")
    return 0


def _cmd_cotrain(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    dataset = _load_dataset_checked(args.data, config)
    _write_run_files(args.out, config, "cotrain", args.data)
    bundle, runlog = run_mode(config.mode, dataset, config.cotrain_settings(), out_dir=args.out)
    trains = runlog.count("train")
    pseudos = runlog.count("pseudo-label")
    print(
        f"{config.mode}: {trains} training passes, {pseudos} pseudo-label passes "
        f"-> {args.out}"
    )
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    dataset = _load_dataset_checked(args.data, config)
    if not dataset.test:
        raise ValueError(f"dataset under {args.data} has no test cases")
    bundle = _load_bundle(args.models)
    if bundle.num_classes != dataset.num_classes:
        raise ValueError(
            f"model bundle K={bundle.num_classes} does not match "
            f"dataset K={dataset.num_classes}"
        )
    _write_run_files(args.out, config, "evaluate", args.data)
    result = evaluate_models(
        bundle, dataset.test, config.windows, mode=config.mode, workers=config.workers
    )
    write_result_json(result, args.out / "result.json")
    write_report_csv(result_rows(result), args.out / "report.csv")
    for report in result.organ_reports:
        print(f"organ {report.organ}: mean_dsc={report.mean:.4f} std_dsc={report.std:.4f}")
    print(f"mean: mean_dsc={result.mean_dsc:.4f} std_dsc={result.mean_std:.4f}")
    print(f"wrote {args.out}/result.json and {args.out}/report.csv")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    results = []
    for raw in args.inputs:
        path = raw / "result.json" if raw.is_dir() else raw
        if not path.is_file():
            raise FileNotFoundError(f"no evaluation result at {path}")
        results.append(load_result_json(path))
    rows = comparison_rows(results, baseline_mode=args.baseline)
    write_report_csv(rows, args.out)
    for row in rows:
        print(",".join(str(row[col]) for col in
                       ("mode", "organ", "n", "mean_dsc", "std_dsc", "p_vs_baseline")))
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "pseudolabel": _cmd_pseudolabel,
    "cotrain": _cmd_cotrain,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CotrainAborted as err:
        print(f"error: training aborted: {err}", file=sys.stderr)
        return 1
    except (ConfigError, FileFormatError, OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
