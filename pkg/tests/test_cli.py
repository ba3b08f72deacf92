import os

import pandas as pd
import pytest

import orsg
from dataset import list_records, load_4dor_record
from logging_utils import new_run_id
from visualize import plot_training_curves

TINY_SETS = ['synthetic.image_size=[64,96]', 'synthetic.entities=[2,3]', 'synthetic.floor_points=64',
             'synthetic.points_per_m2=60']


@pytest.fixture(autouse=True)
def _log_env(tmp_path, monkeypatch):
    monkeypatch.setenv('ORSG_LOG_DIR', str(tmp_path / 'logs'))
    monkeypatch.setenv('ORSG_RUN_ID', 'test')
    monkeypatch.delenv('ORSG_DEVICE', raising=False)


def test_generate_command(tmp_path):
    argv = ['generate', '--out', str(tmp_path / 'data'), '--count', '2', '--seed', '7']
    for item in TINY_SETS:
        argv += ['--set', item]
    assert orsg.main(argv) == 0
    records = list_records(tmp_path / 'data')
    assert [p.name for p in records] == ['scene_00000', 'scene_00001']
    sample = load_4dor_record(records[0])
    assert sample.views[0].shape == (64, 96, 3)


def test_errors_exit_with_code_two(tmp_path):
    assert orsg.main(['generate', '--out', str(tmp_path), '--count', '1', '--set', 'model.nothing=1']) == 2
    assert orsg.main(['eval', '--ckpt', str(tmp_path / 'missing.pt'), '--data', str(tmp_path)]) == 2


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        orsg.build_parser().parse_args([])


def test_training_curves_figure(tmp_path):
    history = pd.DataFrame({'epoch': [1, 2, 3], 'loss': [3.0, 2.0, 1.5], 'loss_entity': [2.0, 1.5, 1.0],
                            'loss_relation': [1.0, 0.5, 0.5], 'entity_class': [0.5, 0.4, 0.3]})
    path = plot_training_curves(history, tmp_path / 'figs' / 'curves.png')
    assert path.exists() and path.stat().st_size > 0


def test_new_run_id_is_stamped_once(monkeypatch):
    monkeypatch.delenv('ORSG_RUN_ID')
    run_id = new_run_id()
    assert len(run_id) == 14 and run_id.isdigit()
    assert os.environ['ORSG_RUN_ID'] == run_id
    assert new_run_id() == run_id
