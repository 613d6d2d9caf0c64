import logging
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from bi_core.bi_ops import bilinear_matrix
from src.bi_errors import DataError

logger = logging.getLogger("SynthData")

OBJECT_KINDS = ("rectangle", "ellipse")
NOISE_OPS = ("brightness", "gaussian", "jitter")
QUANT = 255


@dataclass
class ChangePair:
    """x0, x1 - 3×H×W в [0, 1]; y - 1×H×W в {0, 1}."""
    x0: np.ndarray
    x1: np.ndarray
    y: np.ndarray
    stem: str = ""

    def flipped(self) -> "ChangePair":
        return ChangePair(self.x0[:, :, ::-1].copy(), self.x1[:, :, ::-1].copy(),
                          self.y[:, :, ::-1].copy(), self.stem)


class SynthConfig(BaseModel):
    """Параметры генератора синтетических пар. seed полностью определяет результат."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(default=0, ge=0)
    image_size: int = Field(default=64, ge=8)
    n_pairs: int = Field(default=200, ge=0)
    min_objects: int = Field(default=1, ge=0)
    max_objects: int = Field(default=3, ge=0)
    object_kinds: tuple = OBJECT_KINDS
    noise_ops: tuple = NOISE_OPS
    brightness_shift: float = Field(default=0.15, ge=0)
    gaussian_sigma: float = Field(default=0.03, ge=0)
    jitter_px: float = Field(default=1.0, ge=0, le=1.0)
    coverage_min: float = Field(default=0.02, ge=0, le=1)
    coverage_max: float = Field(default=0.30, ge=0, le=1)
    removal_prob: float = Field(default=0.5, ge=0, le=1)
    max_retries: int = Field(default=64, ge=1)

    @model_validator(mode="after")
    def _ranges(self):
        if self.image_size % 4:
            raise ValueError(f"image_size {self.image_size} must be a multiple of 4")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects > max_objects")
        if self.coverage_min > self.coverage_max:
            raise ValueError("coverage_min > coverage_max")
        unknown = set(self.object_kinds) - set(OBJECT_KINDS)
        if unknown or (self.max_objects > 0 and not self.object_kinds):
            raise ValueError(f"object_kinds must be a non-empty subset of {OBJECT_KINDS}")
        if set(self.noise_ops) - set(NOISE_OPS):
            raise ValueError(f"noise_ops must be a subset of {NOISE_OPS}")
        return self


def quantize(x: np.ndarray) -> np.ndarray:
    """Округление к сетке k/255, как при записи в 8-битный NetPBM."""
    return np.rint(np.clip(x, 0.0, 1.0) * QUANT).astype(np.float32) / np.float32(QUANT)


class SynthDataManager:
    """Генерация пар с «интересными» изменениями (объекты) и «шумовыми» (яркость, шум, сдвиг)."""

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg

    def generate(self) -> list:
        cfg = self.cfg
        children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_pairs)
        pairs = [self._make_pair(i, np.random.default_rng(child)) for i, child in enumerate(children)]
        logger.info(f"Generated {len(pairs)} pairs (seed={cfg.seed}, size={cfg.image_size})")
        return pairs

    # --- Пара ---

    def _make_pair(self, index: int, rng: np.random.Generator) -> ChangePair:
        cfg = self.cfg
        size = cfg.image_size
        base = self._background(rng)
        x1_noisy = self.apply_noise(base, rng)
        n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        if n_objects == 0:
            return ChangePair(quantize(base), quantize(x1_noisy), np.zeros((1, size, size), np.float32),
                              f"pair_{index:05d}")

        for _ in range(cfg.max_retries):
            x0 = base.copy()
            x1 = x1_noisy.copy()
            y = np.zeros((size, size), dtype=bool)
            for _ in range(n_objects):
                mask = self._object_mask(rng)
                color = rng.uniform(0.0, 1.0, 3)
                target = x0 if rng.random() < cfg.removal_prob else x1
                target[:, mask] = color[:, None]
                y |= mask
            coverage = float(y.mean())
            if cfg.coverage_min <= coverage <= cfg.coverage_max:
                return ChangePair(quantize(x0), quantize(x1), y[None].astype(np.float32), f"pair_{index:05d}")
        raise DataError(f"pair {index}: mask coverage target [{cfg.coverage_min}, {cfg.coverage_max}] "
                        f"not reached after {cfg.max_retries} retries")

    def _background(self, rng: np.random.Generator) -> np.ndarray:
        """Гладкий фон: базовый цвет + градиент + низкочастотная текстура."""
        size = self.cfg.image_size
        grid = 8
        coarse = rng.uniform(-0.15, 0.15, (3, grid, grid))
        r = bilinear_matrix(size, grid, np.float64)
        texture = np.einsum("ij,cjk,lk->cil", r, coarse, r)
        ramp = np.linspace(-0.5, 0.5, size)
        gy, gx = rng.uniform(-0.2, 0.2, 2)
        gradient = gy * ramp[:, None] + gx * ramp[None, :]
        color = rng.uniform(0.25, 0.75, (3, 1, 1))
        return np.clip(color + gradient[None] + texture, 0.0, 1.0)

    def _object_mask(self, rng: np.random.Generator) -> np.ndarray:
        size = self.cfg.image_size
        kind = self.cfg.object_kinds[int(rng.integers(len(self.cfg.object_kinds)))]
        h = int(rng.integers(max(2, size // 8), max(3, size // 3) + 1))
        w = int(rng.integers(max(2, size // 8), max(3, size // 3) + 1))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        mask = np.zeros((size, size), dtype=bool)
        if kind == "rectangle":
            mask[top:top + h, left:left + w] = True
        else:
            yy, xx = np.mgrid[0:size, 0:size]
            cy, cx = top + h / 2.0, left + w / 2.0
            mask = ((yy + 0.5 - cy) / (h / 2.0)) ** 2 + ((xx + 0.5 - cx) / (w / 2.0)) ** 2 <= 1.0
        return mask

    # --- Шумовые изменения (не попадают в маску) ---

    def apply_noise(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        out = img.copy()
        if "jitter" in cfg.noise_ops:
            dy, dx = rng.uniform(-cfg.jitter_px, cfg.jitter_px, 2)
            out = shift_subpixel(out, dy, dx)
        if "brightness" in cfg.noise_ops:
            out = out + rng.uniform(-cfg.brightness_shift, cfg.brightness_shift)
        if "gaussian" in cfg.noise_ops:
            out = out + rng.normal(0.0, cfg.gaussian_sigma, out.shape)
        return np.clip(out, 0.0, 1.0)


def shift_subpixel(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Сдвиг C×H×W на (dy, dx) пикселей с линейной интерполяцией и зажатыми краями."""
    _, h, w = img.shape

    def axis_matrix(n, d):
        src = np.clip(np.arange(n) - d, 0, n - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        frac = src - lo
        m = np.zeros((n, n))
        m[np.arange(n), lo] += 1 - frac
        m[np.arange(n), hi] += frac
        return m

    return np.einsum("ij,cjk,lk->cil", axis_matrix(h, dy), img, axis_matrix(w, dx))


def generate(cfg: SynthConfig) -> list:
    return SynthDataManager(cfg).generate()
