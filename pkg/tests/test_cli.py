import json
import logging

import mrcfile
import numpy as np
import pytest

import main
from src.fileio import read_json, read_tiltstack
from src.model.projection import render_stack
from src.model.types import DeformationModel, MarkerSet, TiltGeometry

SMALL_RUN = {
    'seed': 1,
    'phantom': {'preset': '2d', 'n_markers': 2},
    'geometry': {'n_tilts': 8, 'detector_pixels': 32, 'shape_sigma': 0.047},
    'solver': {'n_max': 4, 'candidate_grid_shape': [16, 16], 'lbfgs_max_evals': 30},
    'schedule': {'etas': ['1']},
    'evaluation': {'grid_shape': [50, 50]},
}


@pytest.fixture(autouse=True)
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in list(root.handlers):
        if handler not in handlers:
            root.removeHandler(handler)
            handler.close()
    for handler in handlers:
        if handler not in root.handlers:
            root.addHandler(handler)
    root.setLevel(level)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(SMALL_RUN))
    return path


def run(*argv):
    return main.main([str(arg) for arg in argv])


def test_simulate_is_reproducible(tmp_path, config_file):
    first, second = tmp_path / 'first', tmp_path / 'second'
    assert run('simulate', '--config', config_file, '--out', first) == 0
    assert run('simulate', '--config', config_file, '--out', second) == 0
    for name in ('stack.tstk', 'traces.csv', 'ground_truth.json'):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    truth = read_json(first / 'ground_truth.json')
    assert len(truth['markers']['locations']) == 2
    assert read_tiltstack(first / 'stack.tstk').frames.shape == (8, 32)


def test_seed_flag_changes_the_phantom(tmp_path, config_file):
    run('simulate', '--config', config_file, '--out', tmp_path / 'a')
    run('simulate', '--config', config_file, '--out', tmp_path / 'b', '--seed', 9)
    first = read_json(tmp_path / 'a' / 'ground_truth.json')['markers']['locations']
    second = read_json(tmp_path / 'b' / 'ground_truth.json')['markers']['locations']
    assert first != second


@pytest.mark.slow
def test_align_then_evaluate(tmp_path, config_file):
    out = tmp_path / 'out'
    assert run('simulate', '--config', config_file, '--out', out) == 0
    assert run('align', '--config', config_file, '--out', out, '--stack', out / 'stack.tstk',
               '--truth', out / 'ground_truth.json') == 0
    result = read_json(out / 'result.json')
    assert result['final_loss'] <= result['initial_loss']
    assert (out / 'loss.csv').read_text().startswith('level,decimation,iteration,step,loss,n_markers')

    assert run('eval', '--config', config_file, '--out', out, '--truth', out / 'ground_truth.json',
               '--result', out / 'result.json') == 0
    report = read_json(out / 'report.json')
    assert np.isfinite(report['e_global'])
    assert (out / 'error_field.pgm').read_text().startswith('P2\n50 50\n255\n')


def test_evaluating_the_truth_against_itself(tmp_path, config_file):
    out = tmp_path / 'out'
    run('simulate', '--config', config_file, '--out', out)
    assert run('eval', '--config', config_file, '--out', out, '--truth', out / 'ground_truth.json',
               '--result', out / 'ground_truth.json') == 0
    report = read_json(out / 'report.json')
    assert report['e_global'] == 0.0
    assert report['e_markers'] == 0.0
    assert report['missed'] == 0 and report['spurious'] == 0
    assert len((out / 'error_field.csv').read_text().splitlines()) == 1 + 50 * 50


def test_baseline_from_simulated_traces(tmp_path, config_file):
    out = tmp_path / 'out'
    run('simulate', '--config', config_file, '--out', out)
    assert run('baseline', '--config', config_file, '--out', out, '--traces', out / 'traces.csv') == 0
    estimate = read_json(out / 'dm_result.json')
    truth = read_json(out / 'ground_truth.json')
    np.testing.assert_allclose(estimate['markers']['locations'], truth['markers']['locations'], atol=1e-4)


def test_render_with_and_without_deformation(tmp_path, config_file):
    out = tmp_path / 'out'
    run('simulate', '--config', config_file, '--out', out)
    assert run('render', '--config', config_file, '--out', out, '--result', out / 'ground_truth.json') == 0
    assert run('render', '--config', config_file, '--out', out, '--result', out / 'ground_truth.json',
               '--zero-deformation') == 0
    simulated = read_tiltstack(out / 'stack.tstk').frames
    rendered = read_tiltstack(out / 'rendered.tstk').frames
    flat = read_tiltstack(out / 'rendered_zero_deformation.tstk').frames
    np.testing.assert_array_equal(rendered, simulated)
    assert not np.allclose(flat, simulated)
    assert run('render', '--config', config_file, '--out', out, '--result', out / 'ground_truth.json',
               '--decimation', 2) == 0
    assert read_tiltstack(out / 'rendered.tstk').frames.shape == (8, 16)


def test_invalid_config_exits_with_config_code(tmp_path, capsys):
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps({'solver': {'bogus': 1}}))
    assert run('simulate', '--config', path, '--out', tmp_path) == 2
    assert 'E: ConfigError:' in capsys.readouterr().err
    assert run('simulate', '--config', tmp_path / 'missing.json', '--out', tmp_path) == 2


def test_invalid_stack_exits_with_data_code(tmp_path, config_file, capsys):
    stack = tmp_path / 'broken.tstk'
    stack.write_bytes(b'not a tilt stack')
    assert run('align', '--config', config_file, '--out', tmp_path, '--stack', stack) == 3
    assert 'E: DataError:' in capsys.readouterr().err


def test_bad_command_lines_are_config_errors(tmp_path, capsys):
    assert run('simulate', '--frobnicate') == 2
    assert 'E: ConfigError:' in capsys.readouterr().err
    assert run('align', '--out', tmp_path) == 2
    assert 'E: ConfigError:' in capsys.readouterr().err
    assert run('render', '--result', tmp_path / 'r.json', '--decimation', 'two') == 2
    assert 'E: ConfigError:' in capsys.readouterr().err
    assert run('reconstruct') == 2
    assert 'E: ConfigError:' in capsys.readouterr().err


def test_incomplete_documents_exit_with_data_code(tmp_path, config_file, capsys):
    out = tmp_path / 'out'
    run('simulate', '--config', config_file, '--out', out)
    truth = read_json(out / 'ground_truth.json')
    broken = tmp_path / 'broken.json'
    broken.write_text(json.dumps({'markers': truth['markers']}))
    assert run('eval', '--config', config_file, '--out', out, '--truth', out / 'ground_truth.json',
               '--result', broken) == 3
    assert "missing required key 'model'" in capsys.readouterr().err

    del truth['model']['coeffs']
    broken.write_text(json.dumps(truth))
    assert run('render', '--config', config_file, '--out', out, '--result', broken) == 3
    assert 'E: DataError:' in capsys.readouterr().err
    assert run('eval', '--config', config_file, '--out', out, '--truth', tmp_path / 'nowhere.json',
               '--result', out / 'ground_truth.json') == 3


@pytest.mark.slow
def test_align_on_the_2d_phantom_reduces_the_loss(tmp_path):
    config = tmp_path / 'phantom.json'
    config.write_text(json.dumps({'seed': 0, 'evaluation': {'grid_shape': [50, 50]}}))
    out = tmp_path / 'out'
    assert run('simulate', '--config', config, '--out', out) == 0
    assert run('align', '--config', config, '--out', out, '--stack', out / 'stack.tstk') == 0
    result = read_json(out / 'result.json')
    assert result['final_loss'] < 1e-4 * result['initial_loss']


@pytest.mark.slow
def test_pipeline_is_bitwise_reproducible(tmp_path, config_file):
    outputs = []
    for name in ('first', 'second'):
        out = tmp_path / name
        assert run('simulate', '--config', config_file, '--out', out) == 0
        assert run('align', '--config', config_file, '--out', out, '--stack', out / 'stack.tstk') == 0
        assert run('eval', '--config', config_file, '--out', out, '--truth', out / 'ground_truth.json',
                   '--result', out / 'result.json') == 0
        outputs.append(out)
    for name in ('stack.tstk', 'result.json', 'loss.csv', 'report.json', 'error_field.csv'):
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes(), name


def test_align_reads_an_mrc_series(tmp_path):
    angles = [-30.0, 0.0, 30.0]
    box = [[-8.0, 8.0], [-8.0, 8.0], [-1.0, 1.0]]
    geometry = TiltGeometry(angles, [0.0, 0.5, 1.0], (16, 16), 1.0, 1.5, box)
    markers = MarkerSet([[1.5, -2.0, 0.0]], [1.0])
    frames = render_stack(markers, DeformationModel.zeros(3, active_components=(2,)), geometry).frames
    series = tmp_path / 'series.mrc'
    with mrcfile.new(str(series)) as mrc:
        mrc.set_data(np.transpose(frames, (0, 2, 1)).astype(np.float32))
        mrc.voxel_size = 10.0

    config = tmp_path / 'mrc.json'
    config.write_text(json.dumps({
        'phantom': {'preset': '3d'},
        'geometry': {'angles_deg': angles, 'shape_sigma': 1.5, 'sample_box': box},
        'solver': {'n_max': 2, 'candidate_grid_shape': [8, 8, 2], 'lbfgs_max_evals': 10},
        'schedule': {'etas': ['1']},
    }))
    out = tmp_path / 'out'
    assert run('align', '--config', config, '--out', out, '--mrc', series) == 0
    result = read_json(out / 'result.json')
    assert result['geometry']['detector_shape'] == [16, 16]
    assert result['geometry']['pixel_size'] == 1.0
    assert result['final_loss'] < result['initial_loss']
    assert len(result['markers']['locations']) >= 1
