"""The flat key=value experiment config: parsing, echo, validation."""

import pytest

from mpcotrain import (
    ConfigError,
    ExperimentConfig,
    WindowSpec,
    format_config,
    load_config,
    parse_config,
)


def test_empty_text_yields_defaults():
    assert parse_config("") == ExperimentConfig()
    assert parse_config("\n\n# only a comment\n") == ExperimentConfig()


def test_defaults_are_the_reference_experiment():
    cfg = ExperimentConfig()
    assert cfg.mode == "dmpct"
    assert cfg.rounds == 2
    assert cfg.num_classes == 4
    assert cfg.teacher_iterations == 10000
    assert cfg.student_iterations == 28000
    assert cfg.learning_rate == 0.1
    assert cfg.batch_slices == 2
    assert cfg.pixels_per_slice == 512
    assert cfg.dims == (48, 48, 48)
    assert (cfg.num_labeled, cfg.num_unlabeled, cfg.num_test) == (4, 16, 10)
    assert cfg.workers == 1


def test_format_parse_round_trip_with_overrides():
    cfg = ExperimentConfig(
        mode="spsl",
        seed=404,
        rounds=3,
        num_classes=2,
        organ_means=(255.0, 145.0),
        windows=(WindowSpec(-125.0, 275.0), WindowSpec(-1000.0, 1000.0)),
        dims=(32, 24, 16),
        warm_start=True,
        hu_offset=40.0,
        size_scale=1.2,
    )
    assert parse_config(format_config(cfg)) == cfg


def test_format_parse_round_trip_with_none_organ_means():
    cfg = ExperimentConfig(organ_means=None)
    text = format_config(cfg)
    assert "organ_means = \n" in text or "organ_means =\n" in text
    assert parse_config(text) == cfg


def test_overrides_apply_on_top_of_custom_defaults():
    base = ExperimentConfig(rounds=3, seed=9)
    cfg = parse_config("seed = 11\n", defaults=base)
    assert cfg.rounds == 3
    assert cfg.seed == 11


def test_comments_and_spacing_are_ignored():
    cfg = parse_config(
        """
        # reference run
        rounds = 3   # extra round
          seed=5

        mode = fcn
        """
    )
    assert (cfg.rounds, cfg.seed, cfg.mode) == (3, 5, "fcn")


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("speed = 5", "line 1"),
        ("rounds = 2\nrounds = 3", "line 2"),
        ("rounds 3", "key=value"),
        ("rounds = floor", "bad value"),
        ("windows = -125..275", "bad value"),
        ("dims = 48,48", "bad value"),
    ],
)
def test_parse_errors_name_the_line(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_unknown_key_names_the_key():
    with pytest.raises(ConfigError, match="'speeed'"):
        parse_config("rounds = 2\nspeeed = 4")


@pytest.mark.parametrize(
    "text",
    [
        "mode = gan",
        "rounds = 0",
        "num_classes = 0",
        "teacher_iterations = -1",
        "workers = 0",
        "top_n = 0",
        "num_labeled = 0",
        "num_test = -1",
    ],
)
def test_semantic_validation(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_student_budget_sentinel():
    explicit = parse_config("student_iterations = 12345")
    assert explicit.resolved_student_iterations == 12345
    doubled = parse_config("student_iterations = 0\nteacher_iterations = 300")
    assert doubled.resolved_student_iterations == 600
    assert doubled.train_config(student=True).iterations == 600
    assert doubled.train_config(student=False).iterations == 300


def test_config_maps_onto_component_settings():
    cfg = parse_config(
        "windows = -100.0:100.0,-50.0:50.0\nnum_classes = 3\nrounds = 4\nseed = 88"
    )
    settings = cfg.cotrain_settings()
    assert settings.rounds == 4
    assert settings.seed == 88
    assert settings.teacher.num_classes == 3
    assert settings.teacher.feature_spec.channels == 2  # one per window
    assert settings.windows == (WindowSpec(-100.0, 100.0), WindowSpec(-50.0, 50.0))
    spec = cfg.phantom_spec()
    assert spec.num_organs == 3
    assert spec.dims == cfg.dims


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("rounds = 5\n", encoding="utf-8")
    assert load_config(path).rounds == 5
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.cfg")
