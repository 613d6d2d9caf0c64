import logging
from dataclasses import dataclass

import numpy as np

from src.bi_errors import ContractError, NonFiniteError

logger = logging.getLogger("Ops")

ACTIVATIONS = ("identity", "relu", "prelu")


@dataclass(frozen=True)
class ConvSpec:
    """Геометрия свёртки. padding - число нулевых пикселей с каждой стороны."""
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "dilation"):
            if int(getattr(self, field)) < 1:
                raise ContractError(f"ConvSpec.{field} must be positive, got {getattr(self, field)}")
        if self.padding < 0:
            raise ContractError(f"ConvSpec.padding must be >= 0, got {self.padding}")

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    def out_hw(self, h: int, w: int) -> tuple:
        """Выходной пространственный размер; < 1 - ошибка контракта."""
        oh = conv_out_size(h, self.kernel_h, self.stride, self.padding, self.dilation)
        ow = conv_out_size(w, self.kernel_w, self.stride, self.padding, self.dilation)
        if oh < 1 or ow < 1:
            raise ContractError(f"ConvSpec {self} gives empty output for input {h}x{w}")
        return oh, ow


def conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")


def check_nchw(x: np.ndarray, channels: int, what: str):
    if x.ndim != 4 or x.shape[1] != channels:
        raise ContractError(f"{what}: expected N x {channels} x H x W, got {x.shape}")


# --- im2col / col2im ---

def im2col(x: np.ndarray, spec: ConvSpec, pad_value=0) -> np.ndarray:
    """
    (N, C, H, W) -> (N*oh*ow, C*kh*kw); порядок столбцов (c, ky, kx)
    совпадает с раскладкой весов out x in x kh x kw.
    """
    n, c, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    p, s, d = spec.padding, spec.stride, spec.dilation
    if p:
        xp = np.full((n, c, h + 2 * p, w + 2 * p), pad_value, dtype=x.dtype)
        xp[:, :, p:p + h, p:p + w] = x
    else:
        xp = x
    cols = np.empty((n, c, spec.kernel_h, spec.kernel_w, oh, ow), dtype=x.dtype)
    for ky in range(spec.kernel_h):
        y0 = ky * d
        for kx in range(spec.kernel_w):
            x0 = kx * d
            cols[:, :, ky, kx] = xp[:, :, y0:y0 + s * (oh - 1) + 1:s, x0:x0 + s * (ow - 1) + 1:s]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * spec.kernel_h * spec.kernel_w)


def col2im(cols: np.ndarray, x_shape: tuple, spec: ConvSpec) -> np.ndarray:
    """Сопряжённая к im2col операция: накапливает столбцы обратно, зона паддинга отбрасывается."""
    n, c, h, w = x_shape
    oh, ow = spec.out_hw(h, w)
    p, s, d = spec.padding, spec.stride, spec.dilation
    cols = cols.reshape(n, oh, ow, c, spec.kernel_h, spec.kernel_w).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for ky in range(spec.kernel_h):
        y0 = ky * d
        for kx in range(spec.kernel_w):
            x0 = kx * d
            xp[:, :, y0:y0 + s * (oh - 1) + 1:s, x0:x0 + s * (ow - 1) + 1:s] += cols[:, :, ky, kx]
    return xp[:, :, p:p + h, p:p + w]


def rows_to_nchw(mat: np.ndarray, n: int, oh: int, ow: int) -> np.ndarray:
    """(N*oh*ow, O) -> (N, O, oh, ow)."""
    return mat.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)


def nchw_to_rows(x: np.ndarray) -> np.ndarray:
    """(N, O, oh, ow) -> (N*oh*ow, O)."""
    n, o, oh, ow = x.shape
    return x.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)


def conv2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec, pad_value=0) -> np.ndarray:
    """Плотная свёртка через im2col + matmul (без смещения)."""
    n, _, h, wd = x.shape
    oh, ow = spec.out_hw(h, wd)
    cols = im2col(x, spec, pad_value)
    out = cols @ w.reshape(spec.out_channels, -1).T
    return rows_to_nchw(out, n, oh, ow)


def conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec, pad_value=0):
    """Градиенты плотной свёртки: (grad_x, grad_w)."""
    g = nchw_to_rows(grad)
    cols = im2col(x, spec, pad_value)
    grad_w = (g.T @ cols).reshape(w.shape)
    grad_x = col2im(g @ w.reshape(spec.out_channels, -1), x.shape, spec)
    return grad_x, grad_w


# --- Активации ---

def channel_view(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


def activation_forward(kind: str, y: np.ndarray, slope=None) -> np.ndarray:
    if kind == "identity":
        return y
    if kind == "relu":
        return np.maximum(y, 0)
    if kind == "prelu":
        return np.where(y > 0, y, channel_view(slope) * y)
    raise ContractError(f"unknown activation {kind!r}")


def activation_backward(kind: str, grad: np.ndarray, y: np.ndarray, slope=None):
    """Возвращает (grad_y, grad_slope | None)."""
    if kind == "identity":
        return grad, None
    if kind == "relu":
        return grad * (y > 0), None
    if kind == "prelu":
        neg = y <= 0
        grad_y = np.where(neg, channel_view(slope) * grad, grad)
        grad_slope = (grad * y * neg).sum(axis=(0, 2, 3))
        return grad_y, grad_slope
    raise ContractError(f"unknown activation {kind!r}")


# --- Билинейная интерполяция (half-pixel, края зажаты) ---

def bilinear_matrix(out_size: int, in_size: int, dtype=np.float32) -> np.ndarray:
    """Матрица R (out x in): up = R @ x вдоль одной оси."""
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat.astype(dtype)


def upsample_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ry = bilinear_matrix(out_h, x.shape[2], x.dtype)
    rx = bilinear_matrix(out_w, x.shape[3], x.dtype)
    return np.einsum("ij,ncjk,lk->ncil", ry, x, rx, optimize=True)


def upsample_bilinear_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    ry = bilinear_matrix(grad.shape[2], in_h, grad.dtype)
    rx = bilinear_matrix(grad.shape[3], in_w, grad.dtype)
    return np.einsum("ij,ncil,lk->ncjk", ry, grad, rx, optimize=True)


# --- Канальный average pooling ---

def channel_avg_pool(x: np.ndarray, out_channels: int) -> np.ndarray:
    """Среднее по смежным группам каналов: C -> out_channels (C кратно out_channels)."""
    n, c, h, w = x.shape
    if c % out_channels:
        raise ContractError(f"channel_avg_pool: {c} channels not divisible into {out_channels} groups")
    return x.reshape(n, out_channels, c // out_channels, h, w).mean(axis=2)


def channel_avg_pool_backward(grad: np.ndarray, in_channels: int) -> np.ndarray:
    n, o, h, w = grad.shape
    group = in_channels // o
    expanded = np.repeat(grad[:, :, None], group, axis=2) / group
    return expanded.reshape(n, in_channels, h, w).astype(grad.dtype, copy=False)
