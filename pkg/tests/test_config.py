from pathlib import Path

import pytest

from conftest import config_text
from dpfed.config import FederationConfig, load_config, parse_config
from dpfed.errors import ConfigError


def test_minimal_config_uses_defaults():
    cfg = parse_config("master_seed = 1\n")
    assert cfg.privacy.epsilon == 1.0
    assert cfg.privacy.delta == 1e-5
    assert cfg.privacy.policy == "clipped" and cfg.privacy.clip_norm == 1.0
    assert cfg.training.rounds == 36
    assert cfg.training.aggregation == "uniform_mean"
    assert cfg.training.early_stop_threshold is None
    assert cfg.model.hidden == (16, 16)


def test_master_seed_required():
    with pytest.raises(ConfigError, match="master_seed"):
        parse_config("[data]\nclasses = 2\n")


def test_full_template_parses():
    cfg = parse_config(config_text())
    assert isinstance(cfg, FederationConfig)
    assert cfg.model.hidden == (6, 6)


@pytest.mark.parametrize(
    "text,field,line",
    [
        ("master_seed = 1\nbogus = 2\n", "bogus", 2),
        ("master_seed = 1\n[privacy]\nepsilon = 1.0\nepsilom = 2.0\n", "privacy.epsilom", 4),
        ("master_seed = 1\n[training]\nrounds = 0\n", "training.rounds", 3),
        ("master_seed = 1\n[privacy]\ndelta = 1.0\n", "privacy.delta", 3),
        ("master_seed = 1\n[privacy]\nepsilon = -1\n", "privacy.epsilon", 3),
        ("master_seed = 1\n[privacy]\npolicy = \"exact\"\n", "privacy.policy", 3),
        ("master_seed = 1\n[training]\nrounds = \"ten\"\n", "training.rounds", 3),
        ("master_seed = 1\n[training]\nrounds = 3.5\n", "training.rounds", 3),
        ("master_seed = 1\n[privacy]\nenabled = 1\n", "privacy.enabled", 3),
        ("master_seed = -4\n", "master_seed", 1),
        ("master_seed = 1\n[model]\nhidden = [4, 0]\n", "model.hidden", 3),
        ("master_seed = 1\n[model]\nhidden = []\n", "model.hidden", 3),
        ("master_seed = 1\n[partition]\nmode = \"dirichlet\"\n", "partition.mode", 3),
        ("master_seed = 1\n[data]\nsource = \"csv\"\n", "data.path", None),
        ("master_seed = 1\n[data]\ntest_fraction = 1.0\n", "data.test_fraction", 3),
        ("master_seed = 1\n[nonsense]\nx = 1\n", "nonsense", None),
        ("master_seed = 1\nprivacy = 3\n", "privacy", 2),
    ],
)
def test_invalid_values_name_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    err = info.value
    assert err.field == field
    assert f"field '{field}'" in str(err)
    if line is not None:
        assert err.line == line
        assert str(err).startswith(f"line {line}")


def test_syntax_error_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config("master_seed = 1\n[privacy\n")
    assert info.value.line == 2


def test_cross_field_checks():
    with pytest.raises(ConfigError, match="validation_fraction"):
        parse_config("master_seed = 1\n[training]\nvalidation_fraction = 0.0\n")
    parse_config(
        "master_seed = 1\n[training]\nvalidation_fraction = 0.0\nprogress_source = \"client_weighted_train_loss\"\n"
    )
    with pytest.raises(ConfigError, match="warm_start.fraction"):
        parse_config("master_seed = 1\n[warm_start]\nepochs = 2\n")
    with pytest.raises(ConfigError, match="labels_path"):
        parse_config("master_seed = 1\n[data]\nsource = \"gray8\"\npath = \"x.fg8\"\n")


def test_integers_accepted_for_floats():
    cfg = parse_config("master_seed = 1\n[privacy]\nepsilon = 2\n")
    assert cfg.privacy.epsilon == 2.0 and isinstance(cfg.privacy.epsilon, float)


def test_replace_revalidates():
    cfg = parse_config("master_seed = 1\n")
    assert cfg.replace(privacy={"epsilon": 10.0}).privacy.epsilon == 10.0
    with pytest.raises(ConfigError):
        cfg.replace(training={"validation_fraction": 0.0})


def test_load_config_resolves_relative_paths(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text("master_seed = 1\n[output]\ntrace = \"out/t.jsonl\"\n")
    cfg = load_config(p)
    assert cfg.resolve(cfg.output.trace) == tmp_path / "out" / "t.jsonl"
    assert cfg.resolve("/abs/x") == Path("/abs/x")


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/exp.toml")
