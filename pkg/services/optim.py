"""Parameter update rules. Tensors are immutable, so a step swaps in fresh leaf tensors."""
import numpy as np

from models.errors import ValidationError
from models.params import ModelParams
from services.tensor import Tensor

# biases, norm affines, position embeddings and relative-position tables are not decayed
NO_DECAY_LEAVES = ("bias", "beta", "gamma", "pos_spatial", "pos_temporal", "rel_pos_bias")


def decays(name: str) -> bool:
    return name.rsplit(".", 1)[-1] not in NO_DECAY_LEAVES


class SGDMomentum:
    """Heavy-ball SGD with L2 weight decay folded into the gradient of the decayed weights."""

    def __init__(self, params: ModelParams, lr=1e-2, momentum=0.9, weight_decay=5e-4):
        if lr <= 0:
            raise ValidationError(f"lr must be > 0, got {lr}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self):
        for name, p in list(self.params.items()):
            if p.grad is None:
                continue
            grad = p.grad + self.weight_decay * p.data if decays(name) else p.grad
            self.velocity[name] = self.momentum * self.velocity[name] + grad
            self.params[name] = Tensor(p.data - self.lr * self.velocity[name], requires_grad=True, dtype=p.dtype)

    def zero_grad(self):
        self.params.zero_grad()


class AdamW:
    """Adam with decoupled weight decay on the decayed weights."""

    def __init__(self, params: ModelParams, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05):
        if lr <= 0:
            raise ValidationError(f"lr must be > 0, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        for name, p in list(self.params.items()):
            if p.grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (p.grad ** 2)
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            shrink = 1 - self.lr * self.weight_decay if decays(name) else 1.0
            data = p.data * shrink - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.params[name] = Tensor(data, requires_grad=True, dtype=p.dtype)

    def zero_grad(self):
        self.params.zero_grad()


def make_optimizer(params: ModelParams, config):
    """Build the optimizer named by a TrainConfig."""
    if config.optimizer == "sgd_momentum":
        return SGDMomentum(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    if config.optimizer == "adamw":
        return AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    raise ValidationError(f"Unknown optimizer {config.optimizer!r}")
