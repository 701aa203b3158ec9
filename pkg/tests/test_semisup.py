from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from os.path import isdir, join

from lmlcc.errors import ConfigError, DataError, InsufficientDataError
from lmlcc.labeling import MANIFEST_COLUMNS, read_manifest, write_manifest
from lmlcc.phantom import generate_dataset
from lmlcc.semisup import (
    HISTORY_COLUMNS, PseudoLabel, PseudoLabelRound, assign_pseudo_labels,
    nodule_probabilities, pseudo_label_manifest, semisup_loop
)
from lmlcc.torch import TrainConfig
from lmlcc.torch import train as train_model
from lmlcc.torch.models import BackboneConfig, LmlccConfig, build_lmlcc
from lmlcc.torch.utils import predict
from lmlcc.torch.validation import evaluate
from lmlcc.utils import seed_everything


def test_assign_pseudo_labels():
    probs = {'a': 0.95, 'b': 0.05, 'c': 0.5, 'd': 0.9, 'e': 0.08, 'f': 0.85}

    accepted = {p.nodule_id: p for p in
                assign_pseudo_labels(probs, 0.9, round_index=2)}

    assert sorted(accepted) == ['a', 'b', 'd', 'e']
    assert accepted['a'].label == 1 and accepted['b'].label == 0
    assert accepted['b'].confidence == pytest.approx(0.95)
    assert accepted['e'].confidence == pytest.approx(0.92)
    assert {p.round_index for p in accepted.values()} == {2}


@pytest.mark.parametrize('threshold', [0.5, 0.3, 1.2])
def test_threshold_must_exceed_one_half(threshold):
    with pytest.raises(ConfigError):
        assign_pseudo_labels({'a': 0.99}, threshold)


def test_certain_threshold_accepts_only_certain():
    accepted = assign_pseudo_labels({'a': 1.0, 'b': 0.999, 'c': 0.0}, 1.0)

    assert [(p.nodule_id, p.label) for p in accepted] == [('a', 1), ('c', 0)]


def test_round_bookkeeping():
    r = PseudoLabelRound(1, 2, 5, accepted=[PseudoLabel('a', 1, 0.9),
                                            PseudoLabel('b', 0, 1.0)])

    assert r.mean_confidence == pytest.approx(0.95)
    assert np.isnan(PseudoLabelRound(2, 0, 5).mean_confidence)


def test_nodule_probabilities_average_patches(random_patches):
    model = build_lmlcc(LmlccConfig(n_branches=2))
    patches = random_patches(4)
    pool = {'x': patches[:3], 'y': patches[3:]}

    probs = nodule_probabilities(model, pool)
    each = predict(model, patches)

    assert probs['x'] == pytest.approx(each[:3].mean())
    assert probs['y'] == pytest.approx(each[3])


def test_pseudo_label_manifest():
    manifest = pd.DataFrame({
        'nodule_id': ['a', 'u1', 'u2', 'v'],
        'split': ['train', 'unlabeled', 'unlabeled', 'val'],
        'label': pd.array([1, pd.NA, pd.NA, 0], dtype='Int64')
    })
    pseudo = {'u1': PseudoLabel('u1', 0, 0.97, 2),
              'a': PseudoLabel('a', 0, 0.99, 1)}

    df = pseudo_label_manifest(manifest, pseudo).set_index('nodule_id')

    assert df.loc['u1', 'split'] == 'train'
    assert df.loc['u1', 'label'] == 0
    assert df.loc['u1', 'provenance'] == 'pseudo'
    assert df.loc['u1', 'confidence'] == pytest.approx(0.97)
    assert df.loc['u1', 'round'] == 2

    assert df.loc['a', 'label'] == 1
    assert df.loc['a', 'provenance'] == 'radiologist'
    assert df.loc['v', 'split'] == 'val'
    assert df.loc['u2', 'split'] == 'unlabeled'
    assert df.loc['u2', 'provenance'] == ''
    assert pd.isna(df.loc['u2', 'label'])


def model_factory():
    seed_everything(0)

    return build_lmlcc(LmlccConfig(n_branches=2,
                                   backbone=BackboneConfig.desk(16)))


def test_loop_argument_errors(phantoms):
    train = phantoms.split('train')
    val = phantoms.split('val')
    pool = phantoms.split('unlabeled')
    tc = TrainConfig(epochs=1)

    with pytest.raises(ConfigError):
        semisup_loop(train, val, pool, model_factory, tc, threshold=0.4)
    with pytest.raises(ConfigError):
        semisup_loop(train, val, pool, model_factory, tc, max_rounds=0)
    with pytest.raises(InsufficientDataError):
        semisup_loop([], val, pool, model_factory, tc)
    with pytest.raises(DataError):
        semisup_loop(train, val, pool + [train[0].relabel(None)],
                     model_factory, tc)


def test_loop_invariants(phantoms, tmp_path):
    train = phantoms.split('train')
    pool = phantoms.split('unlabeled')
    tc = TrainConfig(epochs=2, batch_size=8, lr=1e-3)
    save_dir = str(tmp_path)

    result = semisup_loop(train, phantoms.split('val'), pool, model_factory,
                          tc, threshold=0.51, max_rounds=3, min_new=1,
                          augment=True, save_dir=save_dir, verbose=False)

    remaining = len(pool)

    for r in result.rounds:
        assert r.n_newly_labeled + r.n_remaining_unlabeled == remaining
        remaining = r.n_remaining_unlabeled

    ids = [p.nodule_id for r in result.rounds for p in r.accepted]
    assert len(ids) == len(set(ids)) == len(result.pseudo_labels)
    assert set(ids) <= {p.nodule_id for p in pool}

    assert result.train_sizes[0] == len(train)
    assert result.train_sizes == sorted(result.train_sizes)
    assert result.train_sizes[-1] == len(train) + 8 * len(ids)
    assert not result.model.training

    history = pd.read_csv(join(save_dir, 'rounds.csv'))
    assert list(history.columns) == HISTORY_COLUMNS
    assert len(history) == len(result.rounds)
    assert isdir(join(save_dir, 'round_1'))


@pytest.mark.parametrize('max_rounds', [1, 10])
def test_each_training_set_is_fit_once(random_patches, monkeypatch,
                                       max_rounds):
    fits = []

    def fake_train(model, train_set, val_set, tc, save_dir=None,
                   verbose=True):
        fits.append(len(train_set))
        return SimpleNamespace(model=None)

    monkeypatch.setattr('lmlcc.semisup.train', fake_train)
    monkeypatch.setattr('lmlcc.semisup.nodule_probabilities',
                        lambda model, pool, *args: {i: 0.99 for i in pool})

    patches = random_patches(10)
    train = patches[:4]
    pool = [p.relabel(None) for p in patches[4:]]

    result = semisup_loop(train, train, pool, lambda: None, TrainConfig(),
                          max_rounds=max_rounds, min_new=1, verbose=False)

    assert fits == [4, 10]
    assert result.train_sizes == [4, 10]
    assert len(result.rounds) == 1
    assert len(result.pseudo_labels) == 6


def held_out_csv(manifest):
    rows = manifest.loc[manifest['split'].isin(['val', 'test']),
                        list(MANIFEST_COLUMNS)]

    return rows.to_csv(index=False)


@pytest.mark.slow
def test_pseudo_labels_do_not_hurt_accuracy(tmp_path):
    tc = TrainConfig(epochs=10, batch_size=16, lr=1e-3, seed=0)
    passed = []

    for seed in range(3):
        ds = generate_dataset(50, 50, side=16, seed=seed, n_unlabeled=300,
                              verbose=False)
        train, val, test = (ds.split(s) for s in ('train', 'val', 'test'))
        fp = str(tmp_path / f'manifest{seed}.csv')
        write_manifest(ds.manifest, fp)
        manifest = read_manifest(fp)

        baseline = train_model(model_factory(), train, val, tc,
                               verbose=False)
        result = semisup_loop(train, val, ds.split('unlabeled'),
                              model_factory, tc, verbose=False)

        assert len(result.rounds) <= 10
        assert result.train_sizes == sorted(result.train_sizes)
        assert held_out_csv(pseudo_label_manifest(
            manifest, result.pseudo_labels)) == held_out_csv(manifest)

        acc = evaluate(result.model, test).metrics.acc
        baseline_acc = evaluate(baseline.model, test).metrics.acc
        passed.append(acc >= baseline_acc - 0.01)

    assert sum(passed) >= 2
