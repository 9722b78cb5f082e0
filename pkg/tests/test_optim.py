import numpy as np
import pytest
from numpy.testing import assert_allclose

from models.errors import ValidationError
from models.params import ModelParams
from services.optim import AdamW, SGDMomentum, decays
from services.tensor import Tensor

NAMES = ("blocks.0.mlp.fc1.weight", "blocks.0.mlp.fc1.bias", "norm.gamma", "norm.beta", "pos_spatial",
         "pos_temporal", "stages.0.blocks.0.attn.rel_pos_bias", "patch_embed.weight")


def ones_with_zero_grads():
    params = ModelParams("timesformer", {}, {name: Tensor(np.ones((2, 3)), requires_grad=True) for name in NAMES})
    for _, t in params.items():
        t.grad = np.zeros_like(t.data)
    return params


def test_only_weights_decay():
    assert [name for name in NAMES if decays(name)] == ["blocks.0.mlp.fc1.weight", "patch_embed.weight"]


@pytest.mark.parametrize("make", [
    lambda p: AdamW(p, lr=0.1, weight_decay=0.5),
    lambda p: SGDMomentum(p, lr=0.1, momentum=0.9, weight_decay=0.5),
])
def test_zero_gradient_step_shrinks_weights_and_leaves_the_rest(make):
    params = ones_with_zero_grads()
    make(params).step()
    for name, t in params.items():
        assert_allclose(t.data, 0.95 if decays(name) else 1.0, rtol=1e-6)


def test_adamw_decay_is_decoupled_from_the_gradient():
    params = ModelParams("c3d", {}, {"fc0.weight": Tensor(np.full(4, 2.0), requires_grad=True),
                                     "fc0.bias": Tensor(np.full(4, 2.0), requires_grad=True)})
    for _, t in params.items():
        t.grad = np.full(4, 0.3)
    AdamW(params, lr=0.1, weight_decay=0.5).step()
    # first Adam step moves every entry by lr, whatever the gradient scale
    assert_allclose(params["fc0.bias"].data, 1.9, rtol=1e-5)
    assert_allclose(params["fc0.weight"].data, 2.0 * 0.95 - 0.1, rtol=1e-5)


def test_nonpositive_lr_rejected():
    params = ones_with_zero_grads()
    with pytest.raises(ValidationError):
        AdamW(params, lr=0.0)
    with pytest.raises(ValidationError):
        SGDMomentum(params, lr=-1.0)
