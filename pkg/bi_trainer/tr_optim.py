import logging
import math
from dataclasses import dataclass, field

import numpy as np

from src.bi_errors import ContractError

logger = logging.getLogger("Optim")

LATENT_SUFFIX = "/latent_w"
LATENT_CLAMP = 1.5
AUX_DROP_FRACTIONS = (90 / 140, 120 / 140)


@dataclass
class OptimState:
    """Состояние Adam: моменты по каждому параметру и счётчик шагов."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "OptimState":
        state = cls()
        for name, value in params.items():
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        return state


def adam_step(params, grads: dict, state: OptimState, lr: float):
    """
    Один шаг Adam с коррекцией смещения; параметры меняются на месте.
    Отсутствующий градиент считается нулевым. Латентные веса 1-битных слоёв
    после шага зажимаются в [-1.5, 1.5].
    """
    unknown = [name for name in grads if name not in params]
    if unknown:
        raise ContractError(f"adam_step: gradients for unknown parameters {unknown[:3]}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ContractError(f"adam_step: {name} gradient {g.shape} vs parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        update = (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p[...] = p - lr * update
        if name.endswith(LATENT_SUFFIX):
            np.clip(p, -LATENT_CLAMP, LATENT_CLAMP, out=p)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Schedule:
    """
    θ: косинусный спад от base_lr до 1e-6·base_lr за epochs эпох.
    η: aux_lr, делится на 10 дважды (на 90/140 и 120/140 доли обучения).
    Линейный warmup на первых warmup_frac итераций - множитель поверх обоих.
    """
    epochs: int
    base_lr: float = 5e-4
    aux_lr: float = 5e-3
    warmup_frac: float = 0.05
    iters_per_epoch: int = 1
    floor_ratio: float = 1e-6

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"Schedule: epochs must be >= 1, got {self.epochs}")
        if self.base_lr < 0 or self.aux_lr < 0:
            raise ContractError("Schedule: learning rates must be >= 0")
        if not 0 <= self.warmup_frac < 1:
            raise ContractError(f"Schedule: warmup_frac {self.warmup_frac} outside [0, 1)")

    def theta_lr(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.base_lr
        floor = self.floor_ratio * self.base_lr
        cos = 0.5 * (1.0 + math.cos(math.pi * epoch / (self.epochs - 1)))
        return floor + (self.base_lr - floor) * cos

    @property
    def drop_epochs(self) -> tuple:
        """Эпохи снижения aux lr; при epochs >= 3 - ровно две различные."""
        e = self.epochs
        if e < 2:
            return ()
        if e == 2:
            return (1,)
        second = min(_round_half_up(e * AUX_DROP_FRACTIONS[1]), e - 1)
        first = max(1, min(_round_half_up(e * AUX_DROP_FRACTIONS[0]), second - 1))
        return first, second

    def eta_lr(self, epoch: int) -> float:
        drops = sum(1 for d in self.drop_epochs if epoch >= d)
        return self.aux_lr * (0.1 ** drops)

    @property
    def warmup_iters(self) -> int:
        return _round_half_up(self.warmup_frac * self.epochs * self.iters_per_epoch)

    def warmup_factor(self, iteration: int) -> float:
        if self.warmup_iters == 0:
            return 1.0
        return min(1.0, (iteration + 1) / self.warmup_iters)
