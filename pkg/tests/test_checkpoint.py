import numpy as np
import pytest
import torch

from lmlcc.errors import CheckpointError, DataError
from lmlcc.torch.checkpoint import (
    MAGIC, load_model, read_checkpoint, restore_optimizer, save_checkpoint
)
from lmlcc.torch.diffkit import bce_loss
from lmlcc.torch.models import BackboneConfig, LmlccConfig, LmlccNet
from lmlcc.torch.models import build_backbone, build_lmlcc
from lmlcc.torch.utils import predict


def trained_a_little(model, steps=3):
    optimizer = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=1e-3)
    x = torch.rand(4, 1, 16, 16, 16)
    y = torch.tensor([0.0, 1.0, 1.0, 0.0])

    for _ in range(steps):
        optimizer.zero_grad()
        bce_loss(model(x), y).backward()
        optimizer.step()

    return optimizer


@pytest.mark.parametrize('make', [
    lambda: build_lmlcc(LmlccConfig(n_branches=3, include_original=True)),
    lambda: build_lmlcc(LmlccConfig(n_branches=2, cuts_mode='fixed')),
    lambda: build_backbone(BackboneConfig.desk(16)),
])
def test_predictions_survive_round_trip(make, tmp_path, random_patches):
    model = make()
    optimizer = trained_a_little(model)
    fp = str(tmp_path / 'model.ckpt')

    save_checkpoint(fp, model, optimizer, meta={'epoch': 3})
    loaded = load_model(fp)
    patches = random_patches(6)

    assert type(loaded) is type(model)
    assert not loaded.training
    assert np.array_equal(predict(model, patches), predict(loaded, patches))

    for name, t in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[name], t), name


def test_learned_cuts_are_stored(tmp_path):
    model = build_lmlcc(LmlccConfig(n_branches=4, init='random'))
    trained_a_little(model)
    fp = str(tmp_path / 'model.ckpt')

    save_checkpoint(fp, model)
    loaded = load_model(fp)

    assert isinstance(loaded, LmlccNet)
    assert loaded.learned_cuts() == model.learned_cuts()
    assert read_checkpoint(fp).config['lmlcc']['init'] == 'random'


def test_optimizer_state_is_restored(tmp_path):
    model = build_lmlcc(LmlccConfig(n_branches=2))
    optimizer = trained_a_little(model)
    fp = str(tmp_path / 'model.ckpt')
    save_checkpoint(fp, model, optimizer, meta={'epoch': 1, 'val_loss': 0.5})

    ckpt = read_checkpoint(fp)
    loaded = load_model(fp)
    restored = restore_optimizer(ckpt, loaded)

    assert ckpt.meta == {'epoch': 1, 'val_loss': 0.5}
    assert restored.param_groups[0]['lr'] == pytest.approx(1e-3)

    originals = dict(model.named_parameters())

    for name, p in loaded.named_parameters():
        old = optimizer.state[originals[name]]
        new = restored.state[p]
        assert int(new['step']) == 3
        assert torch.equal(new['exp_avg'], old['exp_avg'])
        assert torch.equal(new['exp_avg_sq'], old['exp_avg_sq'])


def test_restore_without_optimizer_state(tmp_path):
    model = build_backbone(BackboneConfig.desk(16))
    fp = str(tmp_path / 'model.ckpt')
    save_checkpoint(fp, model)

    with pytest.raises(CheckpointError):
        restore_optimizer(read_checkpoint(fp), load_model(fp))


def write_model(tmp_path):
    fp = str(tmp_path / 'model.ckpt')
    save_checkpoint(fp, build_backbone(BackboneConfig.desk(16)))

    with open(fp, 'rb') as fh:
        return fp, bytearray(fh.read())


def rewrite(fp, data):
    with open(fp, 'wb') as fh:
        fh.write(bytes(data))


def test_bad_magic(tmp_path):
    fp, data = write_model(tmp_path)
    data[0:len(MAGIC)] = b'NOTACKPT'
    rewrite(fp, data)

    with pytest.raises(CheckpointError, match='not a checkpoint'):
        load_model(fp)


def test_config_digest_mismatch(tmp_path):
    fp, data = write_model(tmp_path)
    # First byte of the JSON config, after magic, version and length.
    data[len(MAGIC) + 8] ^= 0xFF
    rewrite(fp, data)

    with pytest.raises(CheckpointError, match='digest'):
        read_checkpoint(fp)


def test_unsupported_version(tmp_path):
    fp, data = write_model(tmp_path)
    data[len(MAGIC)] = 99
    rewrite(fp, data)

    with pytest.raises(CheckpointError, match='version'):
        read_checkpoint(fp)


@pytest.mark.parametrize('change', ['truncate', 'append'])
def test_damaged_tensor_table(tmp_path, change):
    fp, data = write_model(tmp_path)
    rewrite(fp, data[:-10] if change == 'truncate' else data + b'\0\0')

    with pytest.raises(CheckpointError):
        read_checkpoint(fp)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DataError, match='missing.ckpt'):
        load_model(str(tmp_path / 'missing.ckpt'))
