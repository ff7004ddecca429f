import pytest

import config
from gradibd.errors import ConfigError, ParseError
from gradibd.model import Ablation


def test_defaults():
    run = config.RunConfig.from_values()
    assert (run.model.d_node, run.model.d_graph, run.model.depth, run.model.d_hidden) == (64, 256, 3, 128)
    assert run.model.lam == 0.3
    assert (run.experiment.tau, run.experiment.lead_days, run.experiment.vocab_scope) == (7, 30, "train")
    assert run.train.folds == 10


def test_parse_text_with_comments():
    text = "# model\nd_node = 16\n\nlambda = 0.1  # decay\ncs = false\n"
    assert config.parse_config_text(text) == {"d_node": 16, "lambda": 0.1, "cs": False}


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ParseError) as excinfo:
        config.parse_config_text("d_node = 8\nd_graph\n")
    assert excinfo.value.line_no == 2
    with pytest.raises(ParseError) as excinfo:
        config.parse_config_text("depth = three\n")
    assert excinfo.value.line_no == 1


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError):
        config.parse_config_text("learning_rate = 0.1\n")


def test_text_round_trip():
    run = config.RunConfig.from_values({"lr": 0.01, "td": False, "lead_days": 90})
    again = config.RunConfig.from_text(run.to_text())
    assert again == run
    assert again.model.ablation == Ablation(True, True, False)
    assert again.fingerprint() == run.fingerprint()


def test_fingerprint_changes_with_values():
    assert config.RunConfig.from_values().fingerprint() != config.RunConfig.from_values({"seed": 1}).fingerprint()


def test_precedence_file_then_overrides_then_flags(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\nlead_days = 60\ndepth = 2\n", encoding="utf-8")
    run = config.resolve_run_config(path, ["lead_days=90", "depth=1"], {"lead_days": 120, "seed": None})
    assert run.train.seed == run.experiment.seed == 3
    assert run.model.depth == 1
    assert run.experiment.lead_days == 120


def test_missing_file_and_bad_override(tmp_path):
    with pytest.raises(ConfigError):
        config.resolve_run_config(tmp_path / "nope.cfg")
    with pytest.raises(ConfigError):
        config.parse_overrides(["depth"])


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigError):
        config.RunConfig.from_values({"folds": 1})
    with pytest.raises(ParseError):
        config.parse_overrides(["vocab_scope=test"])
