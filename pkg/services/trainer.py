"""Fine-tuning loop, batched inference and binary evaluation."""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from models.clip_info import Clip
from models.configs import TrainConfig, canonical_json
from models.errors import DimensionError, TrainingDivergedError, ValidationError
from models.params import ModelParams
from models.report_info import ConfusionMatrix2
from services import backbones
from services import tensor as T
from services.metrics import tally
from services.optim import make_optimizer
from services.tensor import GradTape, Tensor

logger = logging.getLogger(__name__)


def cross_entropy_loss(logits, labels):
    """Mean over the batch of -log softmax(logits)[label], in log-sum-exp form."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise DimensionError(f"cross_entropy_loss: logits {list(logits.shape)} vs {labels.size} labels")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValidationError(f"Labels must lie in [0, {logits.shape[1]}), got {sorted(set(labels.tolist()))}")
    one_hot = Tensor(np.eye(logits.shape[1])[labels], dtype=logits.dtype)
    picked = T.sum(T.mul(T.log_softmax(logits, axis=-1), one_hot))
    return T.scale(picked, -1.0 / labels.size)


def stack_clips(clips: Sequence[Clip]) -> Tensor:
    return Tensor(np.stack([clip.data.data for clip in clips]), dtype=clips[0].data.dtype)


def initial_params(config: TrainConfig) -> ModelParams:
    """Scratch parameters from the seed, or the parameters stored at ``config.init``."""
    if config.init == "scratch":
        return backbones.init_params(config.backbone, config.model, config.seed)
    from services.checkpoint import load_checkpoint
    params = load_checkpoint(config.init, expected_backbone=config.backbone)
    if canonical_json(params.config) != canonical_json(config.model):
        raise ValidationError(f"Checkpoint {config.init} was built for a different {config.backbone} config")
    logger.info("Fine-tuning from %s", config.init)
    return params


def fit(train_clips: Sequence[Clip], config: TrainConfig, params: Optional[ModelParams] = None,
        progress: bool = False) -> Tuple[ModelParams, List[float]]:
    """
    Train ``config.backbone`` on ``train_clips``.

    Clip order is reshuffled every epoch by a permutation drawn from
    ``config.seed``, so equal inputs give bit-identical parameters. Returns the
    final parameters and the per-epoch mean loss.
    """
    labels = np.array([clip.label for clip in train_clips], dtype=np.int64)
    if len(train_clips) == 0 or set(labels.tolist()) != {0, 1}:
        raise ValidationError("Training needs at least one clip of each class")
    if config.epochs < 1:
        raise ValidationError(f"epochs must be >= 1, got {config.epochs}")

    params = (params if params is not None else initial_params(config)).trainable()
    optimizer = make_optimizer(params, config)
    rng = np.random.default_rng(config.seed)
    n = len(train_clips)
    trace = []

    for epoch in tqdm(range(config.epochs), desc=f"{config.backbone} epochs", disable=not progress, leave=False):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            index = order[start:start + config.batch_size]
            batch = stack_clips([train_clips[i] for i in index])
            with GradTape() as tape:
                loss = cross_entropy_loss(backbones.forward(params, batch), labels[index])
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"Loss became {value} at epoch {epoch + 1}, batch {b + 1} ({config.backbone})")
                tape.backward(loss)
            if not params.grads_finite():
                raise TrainingDivergedError(
                    f"Gradients became non-finite at epoch {epoch + 1}, batch {b + 1} ({config.backbone})")
            optimizer.step()
            optimizer.zero_grad()
            epoch_loss += value * len(index)
        trace.append(epoch_loss / n)
        logger.info("%s epoch %d/%d: mean loss %.6f", config.backbone, epoch + 1, config.epochs, trace[-1])

    if not params.all_finite():
        raise TrainingDivergedError(f"Parameters of {config.backbone} are no longer finite after training")
    return params.frozen(), trace


def predict(params: ModelParams, clips: Sequence[Clip], batch_size: int = 8) -> np.ndarray:
    """Logits [N, 2] in inference mode."""
    frozen = params.frozen()
    out = []
    for start in range(0, len(clips), batch_size):
        out.append(backbones.forward(frozen, stack_clips(clips[start:start + batch_size])).numpy())
    if not out:
        return np.zeros((0, 2))
    return np.concatenate(out)


def predict_classes(params: ModelParams, clips: Sequence[Clip], batch_size: int = 8) -> np.ndarray:
    # argmax picks the first maximum, so ties go to class 0
    return np.argmax(predict(params, clips, batch_size), axis=1)


def evaluate(params: ModelParams, clips: Sequence[Clip], positive_class: int = 1,
             batch_size: int = 8) -> ConfusionMatrix2:
    predictions = predict_classes(params, clips, batch_size)
    return tally([clip.label for clip in clips], predictions, positive_class)
