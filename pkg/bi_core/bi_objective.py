import logging
import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from bi_core.bi_auxobj import aligned_features, delta_x, delta_x_in, psi_grads, psi_terms
from bi_core.bi_model import PairBatch, ZGrads, ZRecords
from src.bi_errors import ContractError, NonFiniteError

logger = logging.getLogger("Objective")

LOSS_TERMS = ("l_cd", "l2", "l_noise", "l_interest", "l_recon")


class LossWeights(BaseModel):
    """β₁ - вес сжатия ‖Z‖₂, β₂ - вес слагаемых Ψ."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    beta1: float = Field(default=1e-3, ge=0)
    beta2: float = Field(default=0.08, ge=0)

    @field_validator("beta1", "beta2")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("must be finite")
        return value


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def degenerate(self) -> bool:
        """Ни в разметке, ни в предсказании нет изменений."""
        return self.tp + self.fp + self.fn == 0

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass
class LossBreakdown:
    l_cd: float
    l2: float
    l_noise: float
    l_interest: float
    l_recon: float
    total: float

    def as_dict(self) -> dict:
        return {"l_cd": self.l_cd, "l2": self.l2, "l_noise": self.l_noise,
                "l_interest": self.l_interest, "l_recon": self.l_recon, "total": self.total}


def _check_binary(y: np.ndarray):
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("change mask must be binary {0, 1}")


def _balance_weights(y: np.ndarray) -> np.ndarray:
    n = y.size
    n_pos = float(y.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        # один класс в батче: обычная BCE
        return np.ones_like(y)
    return np.where(y == 1, n_neg / n, n_pos / n).astype(y.dtype)


def _check_logits(logits: np.ndarray, y: np.ndarray):
    if logits.shape != y.shape:
        raise ContractError(f"l_cd: logits {logits.shape} vs mask {y.shape}")
    if logits.size == 0:
        raise ContractError("l_cd: empty tensor")
    _check_binary(y)


def l_cd(logits: np.ndarray, y: np.ndarray) -> float:
    """
    Взвешенная по классам BCE на логитах: w_pos = N_neg/N, w_neg = N_pos/N.
    Среднее взвешенное, Σ w·bce / Σ w, то есть полусумма средних по классам.
    """
    _check_logits(logits, y)
    w = _balance_weights(y)
    bce = np.logaddexp(0, logits) - y * logits
    return float((w * bce).sum() / w.sum())


def l_cd_grad(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_logits(logits, y)
    w = _balance_weights(y)
    sigmoid = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return w * (sigmoid - y) / w.sum()


def l2_compression(z_list: list) -> float:
    """Среднее по тензорам от sqrt(Σz²) / count."""
    if not z_list:
        raise ContractError("l2_compression: empty feature list")
    return float(np.mean([np.sqrt(np.sum(np.square(z, dtype=np.float64))) / z.size for z in z_list]))


def l2_compression_grad(z_list: list) -> list:
    if not z_list:
        raise ContractError("l2_compression: empty feature list")
    out = []
    for z in z_list:
        norm = np.sqrt(np.sum(np.square(z, dtype=np.float64)))
        if norm == 0:
            out.append(np.zeros_like(z))
        else:
            out.append((z / (norm * z.size * len(z_list))).astype(z.dtype))
    return out


def total_objective(l_cd_value: float, l2: float, psi, w: LossWeights) -> float:
    """β₁·l2 + l_cd + β₂·(l_noise + l_recon + l_interest)."""
    l_noise, l_interest, l_recon = psi
    for name, value in zip(LOSS_TERMS, (l_cd_value, l2, l_noise, l_interest, l_recon)):
        if not math.isfinite(value):
            raise NonFiniteError(f"loss term {name} is {value}")
    return w.beta1 * l2 + l_cd_value + w.beta2 * (l_noise + l_recon + l_interest)


def confusion(logits: np.ndarray, y: np.ndarray) -> Confusion:
    """Попиксельная матрица ошибок; изменение = 1, предсказание = logit > 0."""
    if logits.shape != y.shape:
        raise ContractError(f"confusion: logits {logits.shape} vs mask {y.shape}")
    _check_binary(y)
    pred = logits > 0
    truth = y == 1
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return Confusion(tp, fp, fn, int(truth.size) - tp - fp - fn)


def f1_score(c: Confusion) -> float:
    """2·TP / (2·TP + FP + FN); без изменений где-либо - 1.0 с предупреждением."""
    if c.degenerate:
        logger.warning("F1 undefined: no change pixels in truth or prediction, reporting 1.0")
        return 1.0
    return 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn)


def evaluate_objective(logits: np.ndarray, records: ZRecords, batch: PairBatch, w: LossWeights,
                       with_grads: bool = True):
    """
    Все слагаемые целевой функции для одного батча и (по желанию) градиенты по
    логитам, выходам генераторов и выровненным признакам.
    Ψ усредняется по точкам подключения генераторов и по веткам backbone.
    """
    y = batch.y
    lcd = l_cd(logits, y)
    l2 = l2_compression(records.gens)

    gen_sites = [site for site in records.aligned if site != "backbone"]
    l_noise = l_interest = l_recon = 0.0
    grad_aligned = {}
    if gen_sites:
        dx_in = delta_x_in(delta_x(batch.x0, batch.x1), y)
        for site in gen_sites:
            feats = aligned_features(records.aligned[site][0], y)
            noise, interest, _ = psi_terms(feats, None, batch.x0, dx_in)
            l_noise += noise / len(gen_sites)
            l_interest += interest / len(gen_sites)
            if with_grads:
                g_gen, _ = psi_grads(feats, y, None, batch.x0, dx_in)
                grad_aligned[site] = [w.beta2 * g_gen / len(gen_sites)]
    if "backbone" in records.aligned:
        branches = records.aligned["backbone"]
        images = (batch.x0, batch.x1)
        grads_bb = []
        for z_b, x in zip(branches, images):
            _, _, recon = psi_terms(None, z_b, x, None)
            l_recon += recon / len(branches)
            if with_grads:
                _, g_b = psi_grads(None, y, z_b, x, None)
                grads_bb.append(w.beta2 * g_b / len(branches))
        if with_grads:
            grad_aligned["backbone"] = grads_bb

    total = total_objective(lcd, l2, (l_noise, l_interest, l_recon), w)
    breakdown = LossBreakdown(lcd, l2, l_noise, l_interest, l_recon, total)
    if not with_grads:
        return breakdown, None, None

    grad_logits = l_cd_grad(logits, y)
    grad_gens = [w.beta1 * g for g in l2_compression_grad(records.gens)]
    return breakdown, grad_logits, ZGrads(gens=grad_gens, aligned=grad_aligned)
