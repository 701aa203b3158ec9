import numpy as np
import pandas as pd
import pytest
import yaml

from os.path import isfile, join

from lmlcc.cli import main
from lmlcc.phantom import generate_dataset


@pytest.fixture
def ratings_csv(tmp_path):
    generate_dataset(10, 10, side=16, seed=1, n_unlabeled=4,
                     out_dir=str(tmp_path / 'data'), verbose=False)

    return str(tmp_path / 'data' / 'ratings.csv')


def read_resolved(out_dir):
    with open(join(out_dir, 'resolved-config.yaml')) as fh:
        return yaml.safe_load(fh)


def test_label(ratings_csv, tmp_path, capsys):
    outputs = []

    for run in ('a', 'b'):
        out_dir = str(tmp_path / run)
        assert main(['label', '--ratings', ratings_csv, '--out-dir', out_dir,
                     '--seed', '4']) == 0
        outputs.append(pd.read_csv(join(out_dir, 'manifest.csv')))

    pd.testing.assert_frame_equal(*outputs)
    assert (outputs[0]['split'] == 'unlabeled').sum() == 4

    printed = capsys.readouterr().out
    assert 'benign: 10, malignant: 10, ambiguous: 4' in printed


def test_malformed_ratings(tmp_path, capsys):
    fp = str(tmp_path / 'ratings.csv')
    pd.DataFrame([{'series_id': 's', 'nodule_id': 'n1', 'coordX': 0,
                   'coordY': 0, 'coordZ': 0, 'diameter_mm': 4,
                   'ratings': '1|9'}]).to_csv(fp, index=False)

    assert main(['label', '--ratings', fp, '--out-dir', str(tmp_path)]) == 2
    assert 'row 1' in capsys.readouterr().err


def test_missing_input_file(tmp_path):
    assert main(['label', '--ratings', str(tmp_path / 'none.csv'),
                 '--out-dir', str(tmp_path)]) == 2


def test_missing_required_flag(tmp_path, capsys):
    assert main(['label', '--out-dir', str(tmp_path)]) == 1
    assert '--ratings' in capsys.readouterr().err


def test_invalid_flag_value(tmp_path):
    assert main(['train', '--branches', 'many', '--out-dir',
                 str(tmp_path)]) == 1


@pytest.mark.parametrize('argv', [['fly'], [], ['train', '--mode', 'cnn']])
def test_usage_errors_exit_with_one(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)

    assert e.value.code == 1


def test_flags_override_config_file(ratings_csv, tmp_path):
    fp = str(tmp_path / 'params.yaml')

    with open(fp, 'w') as fh:
        yaml.safe_dump({'seed': 5, 'test_frac': 0.25}, fh)

    out_dir = str(tmp_path / 'out')
    assert main(['label', '--config', fp, '--seed', '7', '--ratings',
                 ratings_csv, '--out-dir', out_dir]) == 0

    resolved = read_resolved(out_dir)
    assert resolved['seed'] == 7
    assert resolved['test_frac'] == 0.25


def test_unknown_config_key(tmp_path):
    fp = str(tmp_path / 'params.yaml')

    with open(fp, 'w') as fh:
        yaml.safe_dump({'sead': 5}, fh)

    assert main(['label', '--config', fp, '--out-dir', str(tmp_path)]) == 1


def test_phantom_train_evaluate(tmp_path, capsys):
    data = str(tmp_path / 'data')
    run = str(tmp_path / 'run')
    scores = str(tmp_path / 'eval')

    assert main(['phantom', '--n-benign', '8', '--n-malignant', '8',
                 '--augment', 'false', '--out-dir', data]) == 0

    for split in ('train', 'val', 'test', 'unlabeled'):
        assert isfile(join(data, f'{split}.patches'))

    assert main(['train', '--patches-dir', data, '--out-dir', run,
                 '--epochs', '2', '--batch-size', '8', '--branches', '2']) == 0
    assert isfile(join(run, 'best.ckpt'))
    assert read_resolved(run)['epochs'] == 2

    assert main(['evaluate', '--patches-dir', data, '--checkpoint',
                 join(run, 'best.ckpt'), '--out-dir', scores]) == 0

    metrics = pd.read_csv(join(scores, 'metrics.csv'))
    assert metrics.loc[0, 'n'] == 4
    assert 'cuts (HU)' in capsys.readouterr().out

    assert main(['gradcam', '--patches-dir', data, '--checkpoint',
                 join(run, 'best.ckpt'), '--out-dir', scores]) == 0
    cams = pd.read_csv(join(scores, 'gradcam', 'gradcam.csv'))
    assert len(cams) == 4
    assert cams['box_mass'].between(0, 1).all()

    assert main(['profile', '--patches-dir', data, '--split', 'train',
                 '--out-dir', scores]) == 0
    assert isfile(join(scores, 'profile.csv'))


def test_evaluate_missing_checkpoint(tmp_path):
    assert main(['evaluate', '--patches-dir', str(tmp_path), '--checkpoint',
                 str(tmp_path / 'model.ckpt'), '--out-dir',
                 str(tmp_path)]) == 2


def test_manifest_without_label_column(tmp_path, capsys):
    data = str(tmp_path / 'data')
    generate_dataset(3, 3, side=16, seed=0, out_dir=data, verbose=False)

    bad = str(tmp_path / 'manifest.csv')
    pd.read_csv(join(data, 'manifest.csv')).drop(columns='label') \
        .to_csv(bad, index=False)

    assert main(['preprocess', '--ratings', join(data, 'ratings.csv'),
                 '--manifest', bad, '--volumes-dir', join(data, 'volumes'),
                 '--out-dir', str(tmp_path / 'out')]) == 2
    assert 'missing column label' in capsys.readouterr().err


@pytest.mark.slow
def test_sweep(tmp_path):
    data = str(tmp_path / 'data')
    out_dir = str(tmp_path / 'sweep')

    assert main(['phantom', '--n-benign', '8', '--n-malignant', '8',
                 '--augment', 'false', '--out-dir', data]) == 0
    assert main(['sweep', '--patches-dir', data, '--out-dir', out_dir,
                 '--branch-list', '2,3,6,11', '--epochs', '2',
                 '--batch-size', '8']) == 0

    df = pd.read_csv(join(out_dir, 'sweep.csv'))

    assert len(df) == 32
    combos = df[['branches', 'init', 'cuts', 'include_original']]
    assert not combos.duplicated().any()
    assert set(df['branches']) == {2, 3, 6, 11}
    assert np.isfinite(df[['acc', 'auc']].to_numpy()).all()
    assert set(df['cuts']) == {'learnable', 'fixed'}
    assert df['auc'].between(0, 1).all()
