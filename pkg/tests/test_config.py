"""Tests for settings and run-config loading."""

from __future__ import annotations

from pathlib import Path

import pytest

from vbivec.config import RunConfig, Settings, load_run_config
from vbivec.errors import ConfigError
from vbivec.state import CovarianceMode, Recipe
from vbivec.trainer import TrainConfig


@pytest.fixture
def settings() -> Settings:
    return Settings(_env_file=None)


class TestSettings:
    def test_env_prefix(self, monkeypatch):
        monkeypatch.setenv("VBIVEC_NUM_THREADS", "3")
        monkeypatch.setenv("VBIVEC_CALIBRATION_TOL", "1e-9")
        s = Settings(_env_file=None)
        assert s.threads == 3
        assert s.calibration_tol == 1e-9

    def test_zero_threads_means_all_cores(self, settings):
        assert settings.threads >= 1


class TestLoadRunConfig:
    def test_defaults(self, settings):
        run = load_run_config(None, settings=settings)
        assert run.recipe is Recipe.CLASSICAL
        assert run.iterations == 10
        assert run.ivector_dim == 10

    def test_file_values(self, tmp_path: Path, settings):
        path = tmp_path / "run.conf"
        path.write_text("# comment\nrecipe=phonetic-joint\niterations=3\nCOVARIANCE-MODE=full\n", encoding="utf-8")
        run = load_run_config(path, settings=settings)
        assert run.recipe is Recipe.PHONETIC_JOINT
        assert run.iterations == 3
        assert run.covariance_mode is CovarianceMode.FULL

    def test_overrides_beat_file(self, tmp_path: Path, settings):
        path = tmp_path / "run.conf"
        path.write_text("iterations=3\nseed=4\n", encoding="utf-8")
        run = load_run_config(path, {"iterations": 7, "seed": None}, settings)
        assert run.iterations == 7
        assert run.seed == 4

    def test_unknown_key(self, tmp_path: Path, settings):
        path = tmp_path / "run.conf"
        path.write_text("iteratoins=3\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="iteratoins"):
            load_run_config(path, settings=settings)

    def test_missing_file(self, tmp_path: Path, settings):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.conf", settings=settings)

    def test_bad_value(self, settings):
        with pytest.raises(ConfigError):
            load_run_config(None, {"iterations": "many"}, settings)

    def test_classical_with_u_update(self, settings):
        with pytest.raises(ConfigError):
            load_run_config(None, {"recipe": "classical", "update_u": True}, settings)

    def test_negative_seed(self, settings):
        with pytest.raises(ConfigError, match="seed"):
            load_run_config(None, {"seed": -3}, settings)

    def test_explicit_keys_are_tracked(self, tmp_path: Path, settings):
        path = tmp_path / "run.conf"
        path.write_text("diagonal_alpha=false\n", encoding="utf-8")
        assert "diagonal_alpha" in load_run_config(path, settings=settings).model_fields_set
        assert "diagonal_alpha" not in load_run_config(None, settings=settings).model_fields_set

    def test_settings_supply_ambient_defaults(self):
        s = Settings(_env_file=None, variance_floor_abs=0.5, reproducible=True)
        run = RunConfig.from_settings(s)
        assert run.variance_floor_abs == 0.5
        assert run.reproducible is True

    def test_train_config_mirrors_run_config(self, settings):
        run = load_run_config(None, {"recipe": "calibrated", "diagonal_alpha": True, "ivector_dim": 4}, settings)
        cfg = TrainConfig.from_run_config(run, threads=2)
        assert cfg.recipe is Recipe.CALIBRATED
        assert cfg.update_U is True
        assert cfg.diagonal_alpha is True
        assert cfg.ivector_dim == 4
        assert cfg.threads == 2
