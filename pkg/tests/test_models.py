from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn as nn

from lmlcc.errors import ConfigError, ShapeError, ValidationError
from lmlcc.preprocess import Patch
from lmlcc.torch.datasets import PatchDataset
from lmlcc.torch.diffkit import bce_loss, grad_check
from lmlcc.torch.huwindow import CutMode
from lmlcc.torch.models import (
    Backbone3D, BackboneConfig, LmlccConfig, LmlccNet, build_backbone,
    build_lmlcc, build_model
)
from lmlcc.torch.utils import count_parameters, grad_cam, predict


def test_full_backbone_layout():
    model = build_backbone(BackboneConfig.full(32))

    convs = [m for m in model.modules() if isinstance(m, nn.Conv3d)]
    pools = [m for m in model.modules() if isinstance(m, nn.MaxPool3d)]
    drops = [m for m in model.modules() if isinstance(m, nn.Dropout)]
    dense = [m for m in model.modules() if isinstance(m, nn.Linear)]

    assert (len(convs), len(pools), len(drops), len(dense)) == (12, 4, 2, 5)
    assert all(c.kernel_size == (3, 3, 3) and c.padding == (1, 1, 1)
               for c in convs)
    # Conv weights and biases, BN scale and shift, dense weights and biases.
    assert count_parameters(model) == 2_165_281


def test_desk_backbone_layout():
    model = build_backbone(BackboneConfig.desk(16))

    assert sum(isinstance(m, nn.Conv3d) for m in model.modules()) == 4
    assert sum(isinstance(m, nn.MaxPool3d) for m in model.modules()) == 2
    assert sum(isinstance(m, nn.Dropout) for m in model.modules()) == 1
    assert sum(isinstance(m, nn.Linear) for m in model.modules()) == 2


@pytest.mark.parametrize('cfg', [BackboneConfig.desk(16),
                                 BackboneConfig.full(16)])
def test_backbone_output(cfg):
    model = build_backbone(cfg).eval()

    y = model(torch.rand(3, 1, 16, 16, 16))

    assert y.shape == (3,)
    assert torch.all((y >= 0) & (y <= 1))


@pytest.mark.parametrize('kwargs', [
    {'dense_widths': (8, 2)},
    {'pool_after': (5,)},
    {'conv_channels': ()},
    {'patch_side': 10},
])
def test_backbone_config_errors(kwargs):
    with pytest.raises(ConfigError):
        replace(BackboneConfig.desk(16), **kwargs)


def test_scale_names():
    assert BackboneConfig.for_scale('desk', 16).scale == 'desk'
    with pytest.raises(ConfigError):
        BackboneConfig.for_scale('huge', 16)


@pytest.mark.parametrize('n, include_original, paths', [(1, False, 1),
                                                        (3, False, 3),
                                                        (3, True, 4),
                                                        (5, True, 6)])
def test_lmlcc_paths(n, include_original, paths):
    model = build_lmlcc(LmlccConfig(n_branches=n,
                                    include_original=include_original))

    assert len(model.extractors) == paths
    assert model.head.layers[0].in_features == \
        paths * model.cfg.backbone.feature_width
    assert model.eval()(torch.rand(2, 1, 16, 16, 16)).shape == (2,)


def test_extractors_do_not_share_weights():
    model = build_lmlcc(LmlccConfig(n_branches=2))
    a, b = model.extractors

    assert a.layers[0][0].weight.data_ptr() != b.layers[0][0].weight.data_ptr()
    assert not torch.equal(a.layers[0][0].weight, b.layers[0][0].weight)


def test_lmlcc_config_errors():
    with pytest.raises(ConfigError):
        LmlccConfig(n_branches=0)
    with pytest.raises(ConfigError):
        LmlccConfig(shared_weights=True)
    with pytest.raises(ConfigError):
        LmlccConfig(n_branches=3, fixed_cuts_hu=(-500.0,))
    with pytest.raises(ValueError):
        LmlccConfig(cuts_mode='sometimes')


def test_fixed_hu_cuts():
    cfg = LmlccConfig(n_branches=3, cuts_mode='fixed',
                      fixed_cuts_hu=(-400.0, 0.0))
    model = build_lmlcc(cfg)

    assert model.learned_cuts() == pytest.approx([0.4, 1000 / 1500],
                                                 abs=1e-5)
    assert 'window.theta' not in dict(model.named_parameters())


def test_single_fixed_branch_equals_backbone():
    backbone = build_backbone(BackboneConfig.desk(16))
    lmlcc = build_lmlcc(LmlccConfig(n_branches=1, cuts_mode=CutMode.FIXED))

    lmlcc.extractors[0].load_state_dict(backbone.features.state_dict())
    lmlcc.head.load_state_dict(backbone.head.state_dict())

    x = torch.rand(4, 1, 16, 16, 16)

    with torch.no_grad():
        assert torch.allclose(lmlcc.eval()(x), backbone.eval()(x), atol=1e-6)


def test_build_model_from_config_dict():
    model = build_lmlcc(LmlccConfig(n_branches=2, include_original=True))

    rebuilt = build_model(model.config_dict())

    assert isinstance(rebuilt, LmlccNet)
    assert rebuilt.cfg.to_dict() == model.cfg.to_dict()
    assert isinstance(build_model(build_backbone(
        BackboneConfig.desk(16)).config_dict()), Backbone3D)

    with pytest.raises(ConfigError):
        build_model({'model': 'resnet'})


def test_end_to_end_gradients():
    torch.manual_seed(1)
    backbone = replace(BackboneConfig.desk(8), dropout_rate=0.0)
    model = build_lmlcc(LmlccConfig(n_branches=2, backbone=backbone)).double()
    x = torch.rand(4, 1, 8, 8, 8, dtype=torch.float64)
    y = torch.tensor([0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
    params = list(model.parameters())

    def f(*_):
        return bce_loss(model(x), y)

    assert len([n for n, _ in model.named_parameters()
                if n == 'window.theta']) == 1
    assert grad_check(f, params, n_coords=6, seed=0) < 1e-3


def test_window_cuts_get_gradient_in_training():
    model = build_lmlcc(LmlccConfig(n_branches=3))
    x = torch.rand(4, 1, 16, 16, 16)

    bce_loss(model(x), torch.tensor([0.0, 1.0, 0.0, 1.0])).backward()

    assert model.window.theta.grad.abs().sum() > 0


def test_patch_dataset():
    patches = [Patch('a', 4, np.zeros((4,) * 3, np.float32), 1, 'rot090')]
    item = PatchDataset(patches)[0]

    assert item['image'].shape == (1, 4, 4, 4)
    assert item['label'].item() == 1.0
    assert item['info'] == {'nodule_id': 'a', 'augmentation_tag': 'rot090'}

    unlabeled = [Patch('b', 4, np.zeros((4,) * 3, np.float32))]
    assert PatchDataset(unlabeled, require_labels=False)[0]['label'] == -1

    with pytest.raises(ValidationError):
        PatchDataset(unlabeled)
    with pytest.raises(ShapeError):
        PatchDataset(patches, side=8)


def test_predict_and_grad_cam(random_patches):
    model = build_lmlcc(LmlccConfig(n_branches=2))
    patches = random_patches(5)

    probs = predict(model, patches, batch_size=2)

    assert probs.shape == (5,) and probs.dtype == np.float64
    assert np.all((probs > 0) & (probs < 1))
    assert np.allclose(probs, predict(model, patches, batch_size=5))

    heatmap = grad_cam(model, patches[0])

    assert heatmap.shape == (16, 16, 16)
    assert heatmap.min() >= 0 and heatmap.max() <= 1

    with pytest.raises(ShapeError):
        predict(model, random_patches(1, side=8))
