import json

import pytest

from loan_ate.config import (
    ALL_METHODS,
    DgpConfig,
    EstimatorSpec,
    RunConfig,
    config_hash,
    load_run_config,
)
from loan_ate.errors import ConfigInvalid


class TestLoadRunConfig:

    def test_defaults(self):
        cfg = load_run_config()

        assert cfg.features == "without_text"
        assert cfg.nuisance == "linear"
        assert cfg.methods == ALL_METHODS
        assert cfg.trim == (0.01, 0.99)
        assert cfg.split.fractions == (0.6, 0.2, 0.2)
        assert cfg.embedding.dim == 100

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"nuisance": "mlp", "training": {"l2_strength": 0.01}, "split": {"seed": 4}}))

        cfg = load_run_config(path, {"split": {"seed": 9}, "features": "with_text"})

        assert cfg.nuisance == "mlp"
        assert cfg.training.l2_strength == pytest.approx(0.01)
        assert cfg.split.seed == 9
        assert cfg.features == "with_text"

    def test_unknown_field_is_rejected(self):
        with pytest.raises(ConfigInvalid) as exc:
            load_run_config(overrides={"trainig": {}})
        assert exc.value.field == "trainig"

    def test_bad_trim_names_the_field(self):
        with pytest.raises(ConfigInvalid) as exc:
            load_run_config(overrides={"trim": [0.9, 0.1]})
        assert exc.value.field == "trim"

    def test_nested_field_path(self):
        with pytest.raises(ConfigInvalid) as exc:
            load_run_config(overrides={"training": {"learning_rate": -1}})
        assert exc.value.field == "training.learning_rate"

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{")
        with pytest.raises(ConfigInvalid):
            load_run_config(path)


class TestConfigHash:

    def test_stable_and_sensitive(self):
        a = RunConfig()
        b = RunConfig()
        c = RunConfig(nuisance="lstm")

        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)
        assert len(config_hash(a)) == 16


class TestDgpConfig:

    def test_coefficient_length_is_checked(self):
        with pytest.raises(ValueError):
            DgpConfig(p=3, gamma=[1.0, 2.0])

    def test_default_vectors_are_zero(self):
        cfg = DgpConfig(p=2)
        assert cfg.gamma_vector == [0.0, 0.0]
        assert cfg.beta_vector == [0.0, 0.0]

    def test_estimator_trim(self):
        with pytest.raises(ValueError):
            EstimatorSpec(trim=(0.0, 0.5))
