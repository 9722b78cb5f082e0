import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from models.clip_info import Clip
from models.configs import TrainConfig
from models.errors import DimensionError, TrainingDivergedError, ValidationError
from models.report_info import ConfusionMatrix2
from services import backbones
from services import tensor as T
from services.tensor import GradTape, Tensor
from services.trainer import cross_entropy_loss, evaluate, fit, predict, predict_classes, stack_clips

TINY_C3D = {"conv_channels": [4], "pool_schedule": [[1, 2, 2]], "fc_widths": [], "num_frames": 2,
            "input_size": [8, 8]}


def tiny_config(**overrides):
    data = {"backbone": "c3d", "model": TINY_C3D, "epochs": 12, "batch_size": 4, "lr": 0.05, "seed": 0}
    data.update(overrides)
    return TrainConfig.from_dict(data)


def separable_clips(n=16, seed=0):
    """Class 1 clips sit around +2, class 0 clips around -2."""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        label = i % 2
        data = rng.normal(2.0 if label else -2.0, 0.5, size=(3, 2, 8, 8))
        clips.append(Clip(data=Tensor(data), label=label, source_id=f"c{i}"))
    return clips


# ---------------------------------------------------------------------------
# loss

def test_uniform_logits_give_ln2():
    loss = cross_entropy_loss(Tensor(np.zeros((4, 2))), [0, 1, 1, 0])
    assert loss.item() == pytest.approx(math.log(2), rel=1e-6)


def test_saturated_logits_stay_finite(float64):
    logits = Tensor([[1000.0, -1000.0]])
    assert cross_entropy_loss(logits, [0]).item() == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy_loss(logits, [1]).item() == pytest.approx(2000.0)


@pytest.mark.parametrize("seed", range(5))
def test_loss_and_gradient_match_numpy(seed, float64):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, 2)) * 3
    labels = rng.integers(0, 2, size=6)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    expected = -log_probs[np.arange(6), labels].mean()

    leaf = Tensor(logits, requires_grad=True)
    with GradTape() as tape:
        loss = cross_entropy_loss(leaf, labels)
        tape.backward(loss)
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    assert_allclose(leaf.grad, (np.exp(log_probs) - np.eye(2)[labels]) / 6, atol=1e-12)


def test_loss_rejects_bad_inputs():
    with pytest.raises(DimensionError):
        cross_entropy_loss(Tensor(np.zeros((3, 2))), [0, 1])
    with pytest.raises(ValidationError):
        cross_entropy_loss(Tensor(np.zeros((2, 2))), [0, 2])


# ---------------------------------------------------------------------------
# fit

def test_fit_is_deterministic():
    clips = separable_clips()
    a, trace_a = fit(clips, tiny_config(epochs=3))
    b, trace_b = fit(clips, tiny_config(epochs=3))
    assert a.equals(b)
    assert trace_a == trace_b
    c, _ = fit(clips, tiny_config(epochs=3, seed=1))
    assert not a.equals(c)


def test_fit_learns_separable_clips():
    clips = separable_clips()
    params, trace = fit(clips, tiny_config())
    assert len(trace) == 12
    assert trace[-1] < trace[0]
    confusion = evaluate(params, clips)
    assert (confusion.tp + confusion.tn) / confusion.total >= 0.9
    assert not any(t.requires_grad for _, t in params.items())


def test_fit_with_adamw():
    clips = separable_clips(seed=1)
    params, trace = fit(clips, tiny_config(optimizer="adamw", lr=1e-2, epochs=8))
    assert params.all_finite()
    assert trace[-1] < trace[0]


def test_nan_input_raises_diverged():
    clips = separable_clips(n=4)
    bad = np.full((3, 2, 8, 8), np.nan)
    clips[0] = Clip(data=Tensor(bad), label=0, source_id="bad")
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        fit(clips, tiny_config(batch_size=4))


def test_nan_weight_raises_diverged_naming_the_batch():
    config = tiny_config(batch_size=4)
    params = backbones.init_params("c3d", config.model, 0)
    name = params.names()[0]
    params[name] = Tensor(np.full(params[name].shape, np.nan))
    with pytest.raises(TrainingDivergedError, match="epoch 1, batch 1"):
        fit(separable_clips(n=8), config, params=params)


def test_fit_needs_both_classes():
    clips = [c for c in separable_clips() if c.label == 1]
    with pytest.raises(ValidationError):
        fit(clips, tiny_config())


def test_zero_epochs_rejected():
    with pytest.raises(ValidationError):
        tiny_config(epochs=0)


@pytest.mark.parametrize("field, value", [
    ("epochs", "1"),
    ("epochs", True),
    ("lr", "0.01"),
    ("seed", 1.5),
    ("backbone", 3),
    ("sampling", {"stride": "2"}),
    ("norm_mean", [0.5, "0.5", 0.5]),
])
def test_config_values_of_the_wrong_type_are_rejected(field, value):
    with pytest.raises(ValidationError, match=field):
        tiny_config(**{field: value})


def test_model_values_of_the_wrong_type_are_rejected():
    with pytest.raises(ValidationError, match="conv_channels"):
        tiny_config(model={**TINY_C3D, "conv_channels": ["2"]})
    with pytest.raises(ValidationError, match="pool_schedule"):
        tiny_config(model={**TINY_C3D, "pool_schedule": [[1, 2, "2"]]})
    with pytest.raises(ValidationError):
        TrainConfig.from_dict(["c3d"])


def test_integral_lr_is_accepted():
    assert tiny_config(lr=1).lr == 1.0


def test_fit_does_not_touch_given_params():
    clips = separable_clips()
    start = backbones.init_params("c3d", TINY_C3D, seed=5)
    snapshot = start.copy()
    fit(clips, tiny_config(epochs=1), params=start)
    assert start.equals(snapshot)


# ---------------------------------------------------------------------------
# inference and evaluation

def test_predict_batches_agree_with_one_pass():
    clips = separable_clips(n=7)
    params = backbones.init_params("c3d", TINY_C3D, seed=2)
    whole = backbones.forward(params, stack_clips(clips)).data
    assert_allclose(predict(params, clips, batch_size=3), whole, rtol=1e-5, atol=1e-6)


def test_ties_predict_class_zero():
    clips = separable_clips(n=4)
    params = backbones.init_params("c3d", TINY_C3D, seed=0).zeros_like()
    assert predict_classes(params, clips).tolist() == [0, 0, 0, 0]


def test_evaluate_counts_against_positive_class():
    clips = separable_clips(n=3)  # labels 0, 1, 0
    params = backbones.init_params("c3d", TINY_C3D, seed=0).zeros_like()
    assert evaluate(params, clips) == ConfusionMatrix2(tp=0, fn=1, fp=0, tn=2)
    assert evaluate(params, clips, positive_class=0) == ConfusionMatrix2(tp=2, fn=0, fp=1, tn=0)


def test_inference_outside_a_tape_records_nothing():
    clips = separable_clips(n=2)
    params = backbones.init_params("c3d", TINY_C3D, seed=0).trainable()
    logits = backbones.forward(params, stack_clips(clips))
    assert not logits.requires_grad
    assert T.sum(logits)._tape is None
