import logging
import os
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from bi_core.bi_model import FEATURE_STRIDE, PROBE_LAYERS, PairBatch, forward_full
from src.bi_errors import CheckpointError, ContractError

logger = logging.getLogger("InfoPlane")

TRACE_COLUMNS = ("iter", "i_xz_bits", "i_zy_bits")


class BinningConfig(BaseModel):
    """Дискретизация для оценки MI: фиксированные бины по диапазону выборки."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_bins: int = Field(default=30, ge=2)
    max_z_bins: int = Field(default=4096, ge=2)


@dataclass
class JointHistogram:
    """Совместная таблица счётчиков (x-бин, z-бин). Слияние - поэлементное сложение."""
    counts: np.ndarray

    @classmethod
    def from_ids(cls, a_ids: np.ndarray, b_ids: np.ndarray, n_a: int | None = None,
                 n_b: int | None = None) -> "JointHistogram":
        if a_ids.shape != b_ids.shape:
            raise ContractError(f"JointHistogram: {a_ids.shape} vs {b_ids.shape}")
        n_a = int(a_ids.max()) + 1 if n_a is None else n_a
        n_b = int(b_ids.max()) + 1 if n_b is None else n_b
        counts = np.zeros((n_a, n_b), dtype=np.int64)
        np.add.at(counts, (a_ids, b_ids), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def marginals(self):
        return self.counts.sum(axis=1), self.counts.sum(axis=0)

    def __add__(self, other: "JointHistogram") -> "JointHistogram":
        if self.counts.shape != other.counts.shape:
            raise ContractError(f"JointHistogram merge: {self.counts.shape} vs {other.counts.shape}")
        return JointHistogram(self.counts + other.counts)


def entropy_bits(counts: np.ndarray) -> float:
    """Энтропия распределения счётчиков, в битах."""
    counts = np.asarray(counts, dtype=np.float64).ravel()
    total = counts.sum()
    if total <= 0:
        raise ContractError("entropy of an empty histogram")
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def mi_discrete(joint: JointHistogram) -> float:
    """I(X; Z) = Σ p(x,z)·log2(p(x,z) / (p(x)p(z))), 0·log0 := 0. В битах."""
    total = joint.total
    if total <= 0:
        raise ContractError("mi_discrete: empty histogram")
    p = joint.counts.astype(np.float64) / total
    px = p.sum(axis=1, keepdims=True)
    pz = p.sum(axis=0, keepdims=True)
    nz = p > 0
    outer = (px * pz)[nz]
    value = float((p[nz] * np.log2(p[nz] / outer)).sum())
    return max(value, 0.0)


def bin_values(v: np.ndarray, n_bins: int) -> np.ndarray:
    """Равные бины на [min, max] выборки по каждому столбцу; постоянный столбец - один бин."""
    v = np.asarray(v, dtype=np.float64)
    lo = v.min(axis=0)
    hi = v.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ContractError("bin_values: non-finite range")
    ids = np.floor((v - lo) / span * n_bins).astype(np.int64)
    return np.clip(ids, 0, n_bins - 1)


def _row_ids(rows: np.ndarray, cap: int | None = None) -> np.ndarray:
    _, inverse = np.unique(rows, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    return inverse % cap if cap else inverse


def mi_from_ids(a_ids: np.ndarray, b_ids: np.ndarray) -> float:
    """
    I(A; B) = H(A) + H(B) − H(A, B) по парам id, без плотной таблицы.
    Нужна, когда у X почти каждая строка - свой бин.
    """
    if a_ids.shape != b_ids.shape:
        raise ContractError(f"mi_from_ids: {a_ids.shape} vs {b_ids.shape}")
    _, a_counts = np.unique(a_ids, return_counts=True)
    _, b_counts = np.unique(b_ids, return_counts=True)
    _, ab_counts = np.unique(np.stack([a_ids, b_ids], axis=1), axis=0, return_counts=True)
    value = entropy_bits(a_counts) + entropy_bits(b_counts) - entropy_bits(ab_counts)
    return max(value, 0.0)


def estimate_ixz_izy(x_samples: np.ndarray, z_activations: np.ndarray, y_labels: np.ndarray,
                     cfg: BinningConfig = BinningConfig()):
    """
    (I(X;Z), I(Z;Y)) в битах.
    X и Z бинируются по каждому измерению, строка бинов - один дискретный символ;
    у Z число символов ограничено max_z_bins, у X - нет. Y берётся как есть.
    Когда все строки X различны, I(X;Z) = H(Z) и I(Z;Y) ≤ I(X;Z).
    """
    x = np.asarray(x_samples, dtype=np.float64).reshape(len(x_samples), -1)
    z = np.asarray(z_activations, dtype=np.float64).reshape(len(z_activations), -1)
    y = np.asarray(y_labels).reshape(-1)
    if not (len(x) == len(z) == len(y)):
        raise ContractError(f"sample counts differ: x={len(x)} z={len(z)} y={len(y)}")
    if len(x) < 2:
        raise ContractError("estimate_ixz_izy needs at least 2 samples")

    x_ids = _row_ids(bin_values(x, cfg.n_bins))
    z_ids = _row_ids(bin_values(z, cfg.n_bins), cfg.max_z_bins)
    y_ids = _row_ids(y.reshape(-1, 1))

    return mi_from_ids(x_ids, z_ids), mi_from_ids(z_ids, y_ids)


def cell_samples(batch: PairBatch, probe: np.ndarray):
    """
    Выборка по ячейкам сетки признаков: X - блок s×s обоих изображений (6·s·s),
    Z - вектор признаков ячейки, Y - 1, если изменена хотя бы половина блока.
    """
    n, c, fh, fw = probe.shape
    s = batch.x0.shape[2] // fh
    if s != FEATURE_STRIDE or batch.x0.shape[3] // fw != s:
        raise ContractError(f"probe grid {fh}x{fw} does not tile image {batch.x0.shape[2:]}")

    def blocks(img):
        k = img.shape[1]
        b = img.reshape(n, k, fh, s, fw, s).transpose(0, 2, 4, 1, 3, 5)
        return b.reshape(n * fh * fw, k * s * s)

    x = np.concatenate([blocks(batch.x0), blocks(batch.x1)], axis=1)
    z = probe.transpose(0, 2, 3, 1).reshape(n * fh * fw, c)
    y = (blocks(batch.y).mean(axis=1) >= 0.5).astype(np.int64)
    return x, z, y


def probe_info_plane(net, batch: PairBatch, probe_layer: str, cfg: BinningConfig = BinningConfig()):
    """Одна точка информационной плоскости для сети и выбранного слоя."""
    if probe_layer not in PROBE_LAYERS:
        raise ContractError(f"unknown probe layer {probe_layer!r}, expected one of {PROBE_LAYERS}")
    _, records = forward_full(batch, net)
    x, z, y = cell_samples(batch, records.probes[probe_layer])
    return estimate_ixz_izy(x, z, y, cfg)


def trace_info_plane(checkpoints, probe_layer: str, dataset: PairBatch, cfg: BinningConfig, load_net) -> list:
    """
    Траектория (iteration, I(X;Z), I(Z;Y)) по списку чекпоинтов.
    load_net(path) -> (net, iteration).
    """
    rows = []
    for path in checkpoints:
        if not os.path.exists(path):
            raise CheckpointError(f"missing checkpoint file {path}")
        net, iteration = load_net(path)
        batch = dataset.astype(net.dtype)
        i_xz, i_zy = probe_info_plane(net, batch, probe_layer, cfg)
        logger.info(f"{os.path.basename(path)}: iter={iteration} I(X;Z)={i_xz:.4f} I(Z;Y)={i_zy:.4f}")
        rows.append((int(iteration), i_xz, i_zy))
    return rows
