import pytest

from opendecoder.config import ConfigError, RunConfig, config_from_dict, load_config
from opendecoder.prompting import DEFAULT_INSTRUCTION


def test_defaults_are_valid():
    cfg = config_from_dict({})
    assert cfg.instruction == DEFAULT_INSTRUCTION
    assert cfg.retrieval.k == 10
    assert cfg.noisy.n_relevant + cfg.noisy.n_partial + cfg.noisy.n_irrelevant == 10
    assert cfg.modulation == "multiplicative"


def test_nested_overrides():
    cfg = config_from_dict(
        {"corpus": {"n_entities": 5}, "training": {"epochs": 2}, "seed": 1}
    )
    assert cfg.corpus.n_entities == 5
    assert cfg.corpus.n_relations == 3  # default retained
    assert cfg.training.epochs == 2
    assert cfg.seed == 1


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"corpsu": {}})
    with pytest.raises(ConfigError, match="training.lr_decay: unknown key"):
        config_from_dict({"training": {"lr_decay": 0.1}})


def test_enum_validation():
    with pytest.raises(ConfigError, match="modulation"):
        config_from_dict({"modulation": "divide"})
    with pytest.raises(ConfigError, match="indicators.scheme"):
        config_from_dict({"indicators": {"scheme": "softmax"}})
    with pytest.raises(ConfigError, match="noisy.order"):
        config_from_dict({"noisy": {"order": "sorted"}})


def test_all_violations_reported_at_once():
    try:
        config_from_dict(
            {
                "modulation": "divide",
                "bogus": 1,
                "indicators": {"scheme": "softmax"},
                "retrieval": {"k": 7},  # breaks the noisy composition too
            }
        )
    except ConfigError as exc:
        text = str(exc)
        assert "modulation" in text
        assert "bogus" in text
        assert "indicators.scheme" in text
        assert "composition" in text
        assert len(text.strip().split("\n")) >= 4
    else:
        pytest.fail("expected ConfigError")


def test_cross_field_constraints():
    with pytest.raises(ConfigError, match="composition totals"):
        config_from_dict({"noisy": {"n_irrelevant": 3}})
    with pytest.raises(ConfigError, match="divisible"):
        config_from_dict({"training": {"n_heads": 3}})
    cfg = config_from_dict({"noisy": {"n_irrelevant": 3, "n_partial": 2}})
    assert cfg.noisy.n_partial == 2


def test_type_errors_reported():
    with pytest.raises(ConfigError, match="expected integer"):
        config_from_dict({"seed": "seven"})
    with pytest.raises(ConfigError, match="expected a list"):
        config_from_dict({"eval": {"seeds": 5}})


def test_fingerprint_sensitivity():
    a = config_from_dict({})
    b = config_from_dict({"seed": 8})
    assert a.fingerprint() != b.fingerprint()
    assert a.fingerprint() == config_from_dict({}).fingerprint()


def test_load_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        "seed: 3\ncorpus:\n  n_entities: 4\n  n_distractors: 10\n"
        "eval:\n  seeds: [1, 2]\n"
    )
    cfg = load_config(path)
    assert cfg.seed == 3
    assert cfg.corpus.n_entities == 4
    assert cfg.eval.seeds == (1, 2)


def test_load_none_gives_defaults():
    assert load_config(None) == RunConfig()


def test_load_rejects_non_mapping(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(path)


def test_ablate_epochs_optional_none():
    cfg = config_from_dict({"ablate": {"epochs": None}})
    assert cfg.ablate.epochs is None
    cfg = config_from_dict({"ablate": {"epochs": 2}})
    assert cfg.ablate.epochs == 2
