import json
import logging

import pytest

from src.config import Config, RunConfig
from src.errors import ConfigError
from src.model.projection import SigmaMode


@pytest.fixture
def env_file(tmp_path):
    path = tmp_path / '.env'
    path.write_text('SPARSEALIGN_CHUNK_SIZE=128\n')
    return path


@pytest.fixture
def clean_env(monkeypatch):
    for key in Config.DEFAULTS:
        monkeypatch.delenv(key, raising=False)
    return monkeypatch


def test_defaults_and_env_file(clean_env, env_file):
    config = Config(str(env_file))
    assert config.get('SPARSEALIGN_LOG_LEVEL') == 'INFO'
    assert config.num_threads == 1
    assert config.chunk_size == 128
    assert config.log_format == 'text'


def test_environment_overrides(clean_env, env_file):
    clean_env.setenv('SPARSEALIGN_NUM_THREADS', '4')
    clean_env.setenv('SPARSEALIGN_CHUNK_SIZE', '64')
    config = Config(str(env_file))
    assert config.num_threads == 4
    assert config.chunk_size == 64


def test_invalid_integer_falls_back_with_a_warning(clean_env, env_file, caplog):
    clean_env.setenv('SPARSEALIGN_NUM_THREADS', 'many')
    assert Config(str(env_file)).num_threads == 1
    assert 'Invalid integer value for SPARSEALIGN_NUM_THREADS' in caplog.text


def test_logging_settings(clean_env, env_file, caplog):
    config = Config(str(env_file))
    assert config.log_level == logging.INFO
    assert config.log_format == 'text'
    assert config.log_file is None

    clean_env.setenv('SPARSEALIGN_LOG_LEVEL', 'debug')
    clean_env.setenv('SPARSEALIGN_LOG_FORMAT', 'JSON')
    clean_env.setenv('SPARSEALIGN_LOG_FILE', 'run.log')
    config = Config(str(env_file))
    assert config.log_level == logging.DEBUG
    assert config.log_format == 'json'
    assert config.log_file == 'run.log'

    clean_env.setenv('SPARSEALIGN_LOG_LEVEL', 'chatty')
    assert Config(str(env_file)).log_level == logging.INFO
    assert 'Unknown log level CHATTY' in caplog.text


def test_empty_run_config_uses_the_two_dimensional_preset():
    run = RunConfig()
    assert run.preset == '2d'
    assert run.dimension == 2
    geometry = run.geometry()
    assert geometry.n_tilts == 20
    assert geometry.detector_shape == (64,)
    assert run.phantom_spec().n_markers == 10
    assert run.preprocess_mode() == 'simulated'
    assert run.noise().mode == 'none'


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match='solver'):
        RunConfig({'solver': {'n_maximum': 3}})
    with pytest.raises(ConfigError, match='<root>'):
        RunConfig({'phantoms': {}})
    with pytest.raises(ConfigError):
        RunConfig({'phantom': {'preset': '4d'}})
    with pytest.raises(ConfigError):
        RunConfig({'solver': {'prune_threshold': 1.0}})


def test_three_dimensional_preset():
    run = RunConfig({'phantom': {'preset': '3d'}, 'geometry': {'n_tilts': 5, 'detector_pixels': 64}})
    geometry = run.geometry()
    assert geometry.dim == 3
    assert geometry.angles_deg[0] == -70.0 and geometry.angles_deg[-1] == 70.0
    assert geometry.pixel_size == pytest.approx(819.2 / 64)
    assert run.phantom_spec().n_markers == 20


def test_schedule_defaults_by_dimension():
    three = RunConfig({'phantom': {'preset': '3d'}}).schedule((64, 64))
    assert three.decimations == (8, 4, 2)
    assert three.dropped == (16,)
    two = RunConfig().schedule((64,))
    assert two.decimations == (1,)


def test_schedule_overrides():
    run = RunConfig({'schedule': {'etas': ['1/4', '1'], 'tolerance': [1e-4, 1e-6]}})
    schedule = run.schedule((128,))
    assert schedule.decimations == (4, 1)
    assert schedule.tolerances == (1e-4, 1e-6)


def test_solver_config_from_sections(clean_env, env_file):
    clean_env.setenv('SPARSEALIGN_NUM_THREADS', '3')
    run = RunConfig({'solver': {'n_max': 5, 'candidate_grid_shape': [16, 16], 'sigma_mode': 'fixed',
                                'deformation_components': ['x', 'z']}})
    config = run.solver_config(Config(str(env_file)))
    assert config.n_max == 5
    assert config.candidate_grid_shape == (16, 16)
    assert config.sigma_mode == SigmaMode.FIXED
    assert config.deformation_components == ('x', 'z')
    assert config.num_threads == 3
    assert config.chunk_size == 128


def test_explicit_geometry(tmp_path):
    run = RunConfig({'geometry': {'angles_deg': [-10.0, 0.0, 10.0], 'detector_pixels': 32, 'shape_sigma': 0.05}})
    geometry = run.geometry()
    assert geometry.angles_deg.tolist() == [-10.0, 0.0, 10.0]
    assert geometry.times.tolist() == [0.0, 0.5, 1.0]
    assert geometry.shape_sigma == 0.05
    assert run.phantom_spec().shape_sigma == 0.05
    with pytest.raises(ConfigError, match='geometry'):
        RunConfig({'geometry': {'angles_deg': [0.0, 10.0], 'times': [0.0]}}).geometry()


def test_seed_override():
    run = RunConfig({'seed': 3})
    assert run.seed == 3
    changed = run.with_seed(8)
    assert changed.seed == 8 and run.seed == 3
    assert changed.phantom_spec().seed == 8


def test_from_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'seed': 4, 'phantom': {'n_markers': 3}}))
    run = RunConfig.from_file(path)
    assert run.phantom_spec().n_markers == 3
    assert run.to_dict() == {'seed': 4, 'phantom': {'n_markers': 3}}
    with pytest.raises(ConfigError, match='not found'):
        RunConfig.from_file(tmp_path / 'missing.json')
    path.write_text('{"seed": ')
    with pytest.raises(ConfigError, match='not valid JSON'):
        RunConfig.from_file(path)


def test_output_paths(tmp_path):
    run = RunConfig({'output': {'directory': str(tmp_path / 'out'), 'prefix': 'run1_'}})
    path = run.output_path('result.json')
    assert path == tmp_path / 'out' / 'run1_result.json'
    assert path.parent.is_dir()
    assert run.output_path('loss.csv', tmp_path / 'cli') == tmp_path / 'cli' / 'run1_loss.csv'


def test_evaluation_settings():
    run = RunConfig({'evaluation': {'grid_shape': [50, 40], 'match_radius_pixels': 2.0}})
    box = [[-0.5, 0.5], [-0.5, 0.5]]
    assert run.evaluation_grid(box).shape == (50, 40)
    assert RunConfig().evaluation_grid(box).shape == (1000, 1000)
    geometry = run.geometry()
    assert run.match_radius(geometry) == pytest.approx(2.0 * geometry.pixel_size)
