import logging
from typing import NamedTuple

import numpy as np

from bi_core.bi_bitpack import BitTensor, pack_bit_rows, sign_pack, unpack_bit_rows, xnor_gemm
from bi_core.bi_ops import (
    ACTIVATIONS,
    ConvSpec,
    activation_backward,
    activation_forward,
    channel_view,
    check_finite,
    check_nchw,
    conv2d,
    conv2d_backward,
    im2col,
    rows_to_nchw,
)
from src.bi_errors import ContractError

logger = logging.getLogger("BinConv")

__all__ = [
    "ConvSpec",
    "GradTape",
    "RealConvLayer",
    "BinConvLayer",
    "BinConvGrads",
    "im2row_packed",
    "binary_conv_forward",
    "binary_conv_backward",
    "change_generator_forward",
    "change_generator_backward",
    "accumulate",
]

STE_CLIP = 1.0


class GradTape:
    """
    Лента для обратного прохода: стек записей (ключ, сохранённые тензоры).
    Обратный проход снимает записи в обратном порядке; после полного backward лента пуста.
    """

    def __init__(self):
        self._entries = []

    def push(self, key: str, saved: dict):
        self._entries.append((key, saved))

    def pop(self, key: str) -> dict:
        if not self._entries:
            raise ContractError(f"GradTape: no entry for {key!r} (tape is empty)")
        top_key, saved = self._entries[-1]
        if top_key != key:
            raise ContractError(f"GradTape: expected entry {key!r}, top of tape is {top_key!r}")
        self._entries.pop()
        return saved

    def peek(self, key: str) -> dict:
        """Верхняя запись без снятия; ключ обязан совпадать."""
        if not self._entries or self._entries[-1][0] != key:
            top = self._entries[-1][0] if self._entries else None
            raise ContractError(f"GradTape: expected entry {key!r}, top of tape is {top!r}")
        return self._entries[-1][1]

    def keys(self) -> list:
        return [key for key, _ in self._entries]

    def clear(self):
        self._entries.clear()

    def __len__(self):
        return len(self._entries)


def accumulate(grads: dict, key: str, value):
    """Складывает градиент в словарь; сиамские ветки суммируются сюда же."""
    if value is None:
        return
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = np.array(value, copy=True)


class RealConvLayer:
    """Полноточная свёртка (stem, head, вспомогательные модули): y = φ(W * x + b)."""

    def __init__(self, name: str, spec: ConvSpec, weight: np.ndarray, bias=None,
                 phi: str = "identity", slope=None):
        if phi not in ACTIVATIONS:
            raise ContractError(f"{name}: unknown activation {phi!r}")
        expected = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
        if weight.shape != expected:
            raise ContractError(f"{name}: weight shape {weight.shape}, expected {expected}")
        self.name = name
        self.spec = spec
        self.weight = weight
        self.bias = bias
        self.phi = phi
        self.slope = slope

    @classmethod
    def create(cls, name: str, spec: ConvSpec, rng: np.random.Generator, phi: str = "identity",
               bias: bool = True, dtype=np.float32):
        """He-инициализация весов, нулевое смещение, наклон prelu 0.25."""
        std = np.sqrt(2.0 / spec.fan_in)
        weight = (rng.standard_normal((spec.out_channels, spec.in_channels,
                                       spec.kernel_h, spec.kernel_w)) * std).astype(dtype)
        b = np.zeros(spec.out_channels, dtype=dtype) if bias else None
        slope = np.full(spec.out_channels, 0.25, dtype=dtype) if phi == "prelu" else None
        return cls(name, spec, weight, b, phi, slope)

    def params(self) -> dict:
        out = {f"{self.name}/weight": self.weight}
        if self.bias is not None:
            out[f"{self.name}/bias"] = self.bias
        if self.slope is not None:
            out[f"{self.name}/slope"] = self.slope
        return out

    def cast(self, dtype):
        self.weight = self.weight.astype(dtype)
        if self.bias is not None:
            self.bias = self.bias.astype(dtype)
        if self.slope is not None:
            self.slope = self.slope.astype(dtype)

    def forward(self, x: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
        check_nchw(x, self.spec.in_channels, self.name)
        check_finite(x, f"{self.name} input")
        y = conv2d(x, self.weight, self.spec)
        if self.bias is not None:
            y = y + channel_view(self.bias)
        if tape is not None:
            tape.push(self.name, {"x": x, "y": y})
        return activation_forward(self.phi, y, self.slope)

    def backward(self, grad_out: np.ndarray, tape: GradTape, grads: dict) -> np.ndarray:
        """Возвращает grad_x, градиенты параметров складываются в grads."""
        saved = tape.pop(self.name)
        grad_y, grad_slope = activation_backward(self.phi, grad_out, saved["y"], self.slope)
        grad_x, grad_w = conv2d_backward(grad_y, saved["x"], self.weight, self.spec)
        accumulate(grads, f"{self.name}/weight", grad_w)
        if self.bias is not None:
            accumulate(grads, f"{self.name}/bias", grad_y.sum(axis=(0, 2, 3)))
        if self.slope is not None:
            accumulate(grads, f"{self.name}/slope", grad_slope)
        return grad_x


class BinConvLayer:
    """
    1-битная свёртка: out = φ(α ⊙ (sign(A − τ) ⊛ sign(W)) + β).
    latent_w - вещественные «теневые» веса, бинаризуются на каждом проходе.
    act_shift (τ) - порог бинаризации активаций на входной канал, по умолчанию 0.
    binarized=False даёт полноточного близнеца с теми же параметрами.
    """

    def __init__(self, name: str, spec: ConvSpec, latent_w: np.ndarray, alpha: np.ndarray,
                 beta_bias: np.ndarray, act_shift: np.ndarray, phi: str = "relu", slope=None,
                 binarized: bool = True):
        if phi not in ACTIVATIONS:
            raise ContractError(f"{name}: unknown activation {phi!r}")
        if phi == "prelu" and slope is None:
            raise ContractError(f"{name}: prelu needs a slope per output channel")
        expected = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
        if latent_w.shape != expected:
            raise ContractError(f"{name}: latent_w shape {latent_w.shape}, expected {expected}")
        for field, value, size in (("alpha", alpha, spec.out_channels),
                                   ("beta_bias", beta_bias, spec.out_channels),
                                   ("act_shift", act_shift, spec.in_channels)):
            if value.shape != (size,):
                raise ContractError(f"{name}: {field} shape {value.shape}, expected ({size},)")
        check_finite(latent_w, f"{name}/latent_w")
        check_finite(alpha, f"{name}/alpha")
        self.name = name
        self.spec = spec
        self.latent_w = latent_w
        self.alpha = alpha
        self.beta_bias = beta_bias
        self.act_shift = act_shift
        self.phi = phi
        self.slope = slope
        self.binarized = binarized

    @classmethod
    def create(cls, name: str, spec: ConvSpec, rng: np.random.Generator, phi: str = "relu",
               binarized: bool = True, dtype=np.float32):
        """
        1-битный слой: latent_w ~ U(-0.1, 0.1), α = 1/sqrt(fan_in).
        Полноточный близнец: latent_w ~ U(-b, b), b = sqrt(6/fan_in) (He), α = 1.
        Для обоих β = 0, τ = 0; поток rng одинаков.
        """
        u = rng.uniform(-1.0, 1.0, (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w))
        if binarized:
            latent_w = (0.1 * u).astype(dtype)
            alpha = np.full(spec.out_channels, 1.0 / np.sqrt(spec.fan_in), dtype=dtype)
        else:
            latent_w = (np.sqrt(6.0 / spec.fan_in) * u).astype(dtype)
            alpha = np.ones(spec.out_channels, dtype=dtype)
        beta_bias = np.zeros(spec.out_channels, dtype=dtype)
        act_shift = np.zeros(spec.in_channels, dtype=dtype)
        slope = np.full(spec.out_channels, 0.25, dtype=dtype) if phi == "prelu" else None
        return cls(name, spec, latent_w, alpha, beta_bias, act_shift, phi, slope, binarized)

    def params(self) -> dict:
        out = {
            f"{self.name}/latent_w": self.latent_w,
            f"{self.name}/alpha": self.alpha,
            f"{self.name}/beta_bias": self.beta_bias,
            f"{self.name}/act_shift": self.act_shift,
        }
        if self.slope is not None:
            out[f"{self.name}/slope"] = self.slope
        return out

    def cast(self, dtype):
        self.latent_w = self.latent_w.astype(dtype)
        self.alpha = self.alpha.astype(dtype)
        self.beta_bias = self.beta_bias.astype(dtype)
        self.act_shift = self.act_shift.astype(dtype)
        if self.slope is not None:
            self.slope = self.slope.astype(dtype)


class BinConvGrads(NamedTuple):
    grad_a: np.ndarray
    grad_latent_w: np.ndarray
    grad_alpha: np.ndarray
    grad_beta: np.ndarray
    grad_act_shift: np.ndarray
    grad_slope: np.ndarray | None

    def accumulate_into(self, grads: dict, layer: BinConvLayer):
        accumulate(grads, f"{layer.name}/latent_w", self.grad_latent_w)
        accumulate(grads, f"{layer.name}/alpha", self.grad_alpha)
        accumulate(grads, f"{layer.name}/beta_bias", self.grad_beta)
        accumulate(grads, f"{layer.name}/act_shift", self.grad_act_shift)
        if layer.slope is not None:
            accumulate(grads, f"{layer.name}/slope", self.grad_slope)


def im2row_packed(a_bits: BitTensor, spec: ConvSpec) -> BitTensor:
    """
    Развёртка упакованного входа N×C×H×W в матрицу (N·oh·ow) × (C·kh·kw).
    Паддинг заполняется битом 0, то есть −1. Каждая строка начинается с границы слова.
    """
    if len(a_bits.dims) != 4 or a_bits.dims[1] != spec.in_channels:
        raise ContractError(f"im2row_packed: dims {a_bits.dims} do not match in_channels={spec.in_channels}")
    n, c, h, w = a_bits.dims
    spec.out_hw(h, w)
    bits = unpack_bit_rows(a_bits.words, a_bits.n_bits).reshape(n, c, h, w)
    cols = im2col(bits, spec, pad_value=0)
    return BitTensor(tuple(int(d) for d in cols.shape), pack_bit_rows(cols))


def _sign(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1, -1).astype(x.dtype)


def binary_conv_forward(a: np.ndarray, layer: BinConvLayer, tape: GradTape | None = None) -> np.ndarray:
    """out[n,o,y,x] = φ(α[o] · dot_int(n,o,y,x) + β[o]); dot_int точен (XNOR + PopCount)."""
    spec = layer.spec
    check_nchw(a, spec.in_channels, layer.name)
    check_finite(a, f"{layer.name} input")
    n, _, h, w = a.shape
    oh, ow = spec.out_hw(h, w)
    shifted = a - channel_view(layer.act_shift).astype(a.dtype, copy=False)

    if layer.binarized:
        rows = im2row_packed(sign_pack(shifted), spec)
        w_bits = sign_pack(layer.latent_w.reshape(spec.out_channels, -1))
        dot_mat = xnor_gemm(rows.words, w_bits.words, rows.n_bits)
        dot = rows_to_nchw(dot_mat, n, oh, ow).astype(a.dtype)
    else:
        dot = conv2d(shifted, layer.latent_w.astype(a.dtype, copy=False), spec)

    y = channel_view(layer.alpha) * dot + channel_view(layer.beta_bias)
    if tape is not None:
        tape.push(layer.name, {"shifted": shifted, "dot": dot, "y": y})
    return activation_forward(layer.phi, y, layer.slope)


def binary_conv_backward(grad_out: np.ndarray, layer: BinConvLayer, tape: GradTape) -> BinConvGrads:
    """
    Обратный проход. sign() пропускает градиент по clipped STE: 1 при |x| <= 1, иначе 0,
    и для активаций (A − τ), и для латентных весов.
    """
    saved = tape.pop(layer.name)
    shifted, dot, y = saved["shifted"], saved["dot"], saved["y"]
    spec = layer.spec

    grad_y, grad_slope = activation_backward(layer.phi, grad_out, y, layer.slope)
    grad_alpha = (grad_y * dot).sum(axis=(0, 2, 3))
    grad_beta = grad_y.sum(axis=(0, 2, 3))
    grad_dot = grad_y * channel_view(layer.alpha)

    if layer.binarized:
        a_op = _sign(shifted)
        w_op = _sign(layer.latent_w.astype(shifted.dtype, copy=False))
        grad_a_op, grad_w_op = conv2d_backward(grad_dot, a_op, w_op, spec, pad_value=-1)
        grad_shifted = grad_a_op * (np.abs(shifted) <= STE_CLIP)
        grad_latent_w = grad_w_op * (np.abs(layer.latent_w) <= STE_CLIP)
    else:
        w_op = layer.latent_w.astype(shifted.dtype, copy=False)
        grad_shifted, grad_latent_w = conv2d_backward(grad_dot, shifted, w_op, spec)

    grad_act_shift = -grad_shifted.sum(axis=(0, 2, 3))
    return BinConvGrads(
        grad_a=grad_shifted,
        grad_latent_w=grad_latent_w.astype(layer.latent_w.dtype, copy=False),
        grad_alpha=grad_alpha,
        grad_beta=grad_beta,
        grad_act_shift=grad_act_shift,
        grad_slope=grad_slope,
    )


def _generator_key(layer: BinConvLayer) -> str:
    return f"{layer.name}:gen"


def change_generator_forward(f0: np.ndarray, f1: np.ndarray, layer: BinConvLayer,
                             tape: GradTape | None = None) -> np.ndarray:
    """1-битный генератор изменений: binary_conv(max(f0, f1) − min(f0, f1))."""
    if f0.shape != f1.shape:
        raise ContractError(f"{layer.name}: change generator operands differ {f0.shape} vs {f1.shape}")
    d = np.maximum(f0, f1) - np.minimum(f0, f1)
    if tape is not None:
        # при равенстве градиент уходит в f0
        tape.push(_generator_key(layer), {"s": np.where(f0 >= f1, 1, -1).astype(f0.dtype)})
    return binary_conv_forward(d, layer, tape)


def change_generator_backward(grad_out: np.ndarray, layer: BinConvLayer, tape: GradTape):
    """Возвращает (grad_f0, grad_f1, BinConvGrads слоя)."""
    g = binary_conv_backward(grad_out, layer, tape)
    s = tape.pop(_generator_key(layer))["s"]
    grad_d = g.grad_a * s
    return grad_d, -grad_d, g
