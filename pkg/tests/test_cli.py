"""End-to-end CLI pipeline on a miniature experiment."""

import json

import pytest

from mpcotrain import RunLog, load_mask, load_model, parse_config
from mpcotrain.cli import main
from mpcotrain.metrics import REPORT_COLUMNS, load_result_json

TINY_CONFIG = """\
num_classes = 2
rounds = 1
teacher_iterations = 3
student_iterations = 3
batch_slices = 2
pixels_per_slice = 8
dims = 16,16,16
num_labeled = 1
num_unlabeled = 1
num_test = 2
seed = 5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One full pipeline run: generate -> train -> pseudolabel -> cotrain -> evaluate."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CONFIG, encoding="utf-8")
    paths = {
        "cfg": cfg,
        "data": root / "data",
        "teacher": root / "teacher",
        "pseudo": root / "pseudo",
        "cotrain": root / "cotrain",
        "eval_fcn": root / "eval_fcn",
        "eval_dmpct": root / "eval_dmpct",
        "report": root / "comparison.csv",
    }
    steps = [
        ["generate", "--config", str(cfg), "--out", str(paths["data"])],
        ["train", "--config", str(cfg), "--data", str(paths["data"]),
         "--out", str(paths["teacher"])],
        ["pseudolabel", "--config", str(cfg), "--data", str(paths["data"]),
         "--models", str(paths["teacher"]), "--out", str(paths["pseudo"])],
        ["cotrain", "--config", str(cfg), "--data", str(paths["data"]),
         "--out", str(paths["cotrain"]), "--mode", "dmpct"],
        ["evaluate", "--config", str(cfg), "--data", str(paths["data"]),
         "--models", str(paths["teacher"]), "--out", str(paths["eval_fcn"]),
         "--mode", "fcn"],
        ["evaluate", "--config", str(cfg), "--data", str(paths["data"]),
         "--models", str(paths["cotrain"]), "--out", str(paths["eval_dmpct"]),
         "--mode", "dmpct"],
        ["report", str(paths["eval_fcn"]), str(paths["eval_dmpct"]),
         "--out", str(paths["report"]), "--baseline", "fcn"],
    ]
    paths["exit_codes"] = [main(argv) for argv in steps]
    return paths


def test_every_pipeline_step_exits_zero(workspace):
    assert workspace["exit_codes"] == [0] * 7


def test_generate_writes_a_self_describing_dataset(workspace):
    data = workspace["data"]
    assert (data / "manifest.jsonl").is_file()
    case_files = sorted(p.name for p in (data / "cases").glob("*.dmpv"))
    assert case_files == ["lab000.dmpv", "test000.dmpv", "test001.dmpv", "unl000.dmpv"]
    assert (data / "cases" / "lab000.dmpl").is_file()
    assert not (data / "cases" / "unl000.dmpl").exists()  # unlabeled: volume only
    assert (data / "hidden" / "unl000.dmpl").is_file()
    echoed = parse_config((data / "config.txt").read_text(encoding="utf-8"))
    assert echoed.num_classes == 2
    assert echoed.seed == 5
    manifest = json.loads((data / "run.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "generate"


def test_train_writes_teacher_checkpoints_and_log(workspace):
    teacher = workspace["teacher"]
    for letter in ("S", "C", "A"):
        model, _ = load_model(teacher / "round_1" / f"model_{letter}.dmpw")
        assert model.num_classes == 2
    runlog = RunLog.load(teacher / "runlog.jsonl")
    assert [e.action for e in runlog.events] == ["train"] * 3


def test_pseudolabel_writes_masks_with_provenance(workspace):
    mask = load_mask(workspace["pseudo"] / "unl000.dmpl")
    assert mask.num_classes == 2
    assert mask.labels.shape == (16, 16, 16)
    prov = load_mask(workspace["pseudo"] / "unl000.prov.dmpl")
    assert prov.num_classes == 6


def test_cotrain_runs_the_loop_and_checkpoints_every_round(workspace):
    cot = workspace["cotrain"]
    runlog = RunLog.load(cot / "runlog.jsonl")
    assert runlog.count("train") == 6  # (rounds + 1) x 3 planes
    assert runlog.count("pseudo-label") == 1
    for round_idx in (1, 2):
        for letter in ("S", "C", "A"):
            assert (cot / f"round_{round_idx}" / f"model_{letter}.dmpw").is_file()
    assert (cot / "round_1" / "pseudo" / "unl000.dmpl").is_file()


def test_evaluate_writes_result_and_report(workspace):
    result = load_result_json(workspace["eval_fcn"] / "result.json")
    assert result.mode == "fcn"
    assert [r.organ for r in result.organ_reports] == [1, 2]
    assert result.organ_reports[0].case_ids == ("test000", "test001")
    assert all(0.0 <= v <= 1.0 for r in result.organ_reports for v in r.per_case)
    lines = (workspace["eval_fcn"] / "report.csv").read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == 1 + 3  # two organs + the mean row


def test_report_merges_modes_into_one_table(workspace):
    lines = workspace["report"].read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    body = [line.split(",") for line in lines[1:]]
    assert [(r[0], r[1]) for r in body] == [
        ("fcn", "1"), ("fcn", "2"), ("fcn", "mean"),
        ("dmpct", "1"), ("dmpct", "2"), ("dmpct", "mean"),
    ]
    # Two test cases are below the pairing threshold: no p-values anywhere.
    assert all(r[5] == "" for r in body)


def test_evaluate_repeats_bit_identically(workspace, tmp_path):
    again = tmp_path / "eval_again"
    code = main([
        "evaluate", "--config", str(workspace["cfg"]), "--data", str(workspace["data"]),
        "--models", str(workspace["teacher"]), "--out", str(again), "--mode", "fcn",
    ])
    assert code == 0
    assert (again / "result.json").read_bytes() == (
        workspace["eval_fcn"] / "result.json"
    ).read_bytes()
    assert (again / "report.csv").read_bytes() == (
        workspace["eval_fcn"] / "report.csv"
    ).read_bytes()


def test_seed_and_workers_overrides_land_in_the_echo(workspace, tmp_path, capsys):
    out = tmp_path / "data777"
    code = main(["generate", "--config", str(workspace["cfg"]), "--seed", "777",
                 "--workers", "2", "--out", str(out)])
    assert code == 0
    capsys.readouterr()
    echoed = parse_config((out / "config.txt").read_text(encoding="utf-8"))
    assert echoed.seed == 777
    assert echoed.workers == 2


def test_seed_override_changes_the_generated_data(workspace, tmp_path, capsys):
    out = tmp_path / "data778"
    main(["generate", "--config", str(workspace["cfg"]), "--seed", "778",
          "--out", str(out)])
    capsys.readouterr()
    a = (workspace["data"] / "cases" / "lab000.dmpv").read_bytes()
    b = (out / "cases" / "lab000.dmpv").read_bytes()
    assert a != b


# --- failure paths --------------------------------------------------------------------

def run_expecting_error(argv, capsys) -> str:
    code = main(argv)
    captured = capsys.readouterr()
    assert code == 1
    assert captured.err.startswith("error: ")
    return captured.err


def test_missing_models_directory_is_reported(workspace, tmp_path, capsys):
    err = run_expecting_error(
        ["evaluate", "--config", str(workspace["cfg"]), "--data", str(workspace["data"]),
         "--models", str(tmp_path / "nowhere"), "--out", str(tmp_path / "ev")],
        capsys,
    )
    assert "nowhere" in err


def test_missing_dataset_is_reported(workspace, tmp_path, capsys):
    err = run_expecting_error(
        ["train", "--config", str(workspace["cfg"]), "--data", str(tmp_path / "void"),
         "--out", str(tmp_path / "run")],
        capsys,
    )
    assert "manifest" in err


def test_bad_config_file_is_reported_with_line(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("speeed = 9\n", encoding="utf-8")
    err = run_expecting_error(
        ["generate", "--config", str(bad), "--out", str(tmp_path / "out")], capsys
    )
    assert "line 1" in err


def test_class_count_mismatch_is_reported(workspace, tmp_path, capsys):
    # Default config expects K=4; the tiny dataset has K=2.  The check fires
    # before any training starts.
    err = run_expecting_error(
        ["train", "--data", str(workspace["data"]), "--out", str(tmp_path / "run")],
        capsys,
    )
    assert "K=2" in err and "K=4" in err


def test_report_with_missing_input_is_reported(tmp_path, capsys):
    err = run_expecting_error(
        ["report", str(tmp_path / "absent"), "--out", str(tmp_path / "merged.csv")],
        capsys,
    )
    assert "absent" in err


def test_unknown_mode_is_rejected_by_the_parser(workspace, tmp_path):
    with pytest.raises(SystemExit):
        main(["cotrain", "--config", str(workspace["cfg"]), "--data", str(workspace["data"]),
              "--out", str(tmp_path / "x"), "--mode", "gan"])
