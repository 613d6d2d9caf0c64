import logging
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from src.bi_errors import ContractError

logger = logging.getLogger("Bitpack")

WORD_BITS = 64

# Бит 1 = +1, бит 0 = -1. sign(0) := +1.

_NIBBLE_TABLE = np.array([bin(i).count("1") for i in range(16)], dtype=np.uint8)

# SWAR-константы для ядра (строго uint64, иначе numba уводит арифметику во float64)
_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_S1 = np.uint64(1)
_S2 = np.uint64(2)
_S4 = np.uint64(4)
_S56 = np.uint64(56)


@dataclass(frozen=True)
class BitRow:
    """Одна упакованная строка: слова + логическая длина."""
    words: np.ndarray
    n_bits: int


@dataclass(frozen=True)
class BitTensor:
    """
    Упакованный ±1 тензор.
    words имеет форму (rows, words_per_row): rows = prod(dims[:-1]),
    внутренняя ось упакована в слова (little-endian порядок бит внутри слова).
    Хвостовые биты последнего слова каждой строки всегда 0.
    """
    dims: tuple
    words: np.ndarray

    @property
    def n_bits(self) -> int:
        return int(self.dims[-1]) if self.dims else 0

    @property
    def rows(self) -> int:
        return int(np.prod(self.dims[:-1], dtype=np.int64)) if len(self.dims) > 1 else 1

    @property
    def words_per_row(self) -> int:
        return words_for(self.n_bits)

    @property
    def valid_bits_last_word(self) -> int:
        if self.n_bits == 0:
            return 0
        return self.n_bits - WORD_BITS * (self.words_per_row - 1)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64))

    def row(self, index: int) -> BitRow:
        return BitRow(self.words[index], self.n_bits)

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return tuple(self.dims) == tuple(other.dims) and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((tuple(self.dims), self.words.tobytes()))


def words_for(n_bits: int) -> int:
    """Сколько 64-битных слов нужно на строку из n_bits элементов."""
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def last_word_mask(n_bits: int) -> np.uint64:
    """Маска валидных бит последнего слова строки."""
    if n_bits == 0:
        return np.uint64(0)
    valid = n_bits - WORD_BITS * (words_for(n_bits) - 1)
    if valid == WORD_BITS:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return np.uint64((1 << valid) - 1)


def pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """
    Упаковывает матрицу 0/1 формы (rows, n) в слова (rows, words_per_row).
    Хвост строки добивается нулями - каноническая форма.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    rows, n = bits.shape
    wpr = words_for(n)
    if wpr == 0:
        return np.zeros((rows, 0), dtype=np.uint64)
    padded = np.zeros((rows, wpr * WORD_BITS), dtype=np.uint8)
    padded[:, :n] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False).reshape(rows, wpr)


def unpack_bit_rows(words: np.ndarray, n_bits: int) -> np.ndarray:
    """Обратная операция к pack_bit_rows: (rows, wpr) -> 0/1 (rows, n_bits)."""
    rows = words.shape[0]
    if n_bits == 0 or rows == 0:
        return np.zeros((rows, 0), dtype=np.uint8)
    as_bytes = np.ascontiguousarray(words.astype("<u8", copy=False)).view(np.uint8).reshape(rows, -1)
    return np.unpackbits(as_bytes, axis=1, count=n_bits, bitorder="little")


def sign_pack(x: np.ndarray) -> BitTensor:
    """
    Бинаризация и упаковка: элемент -> +1 (бит 1) если x >= 0, иначе -1 (бит 0).
    """
    x = np.asarray(x)
    if x.ndim == 0:
        x = x.reshape(1)
    dims = tuple(int(d) for d in x.shape)
    rows = int(np.prod(dims[:-1], dtype=np.int64))
    bits = (x >= 0).reshape(rows, dims[-1])
    return BitTensor(dims, pack_bit_rows(bits))


def unpack(b: BitTensor, dtype=np.float32) -> np.ndarray:
    """BitTensor -> плотный тензор значений {-1.0, +1.0}."""
    bits = unpack_bit_rows(b.words, b.n_bits)
    values = bits.astype(dtype) * 2 - 1
    return values.reshape(b.dims)


# --- PopCount ---

def _popcount_hardware(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words).astype(np.int64)


def _popcount_nibble(words: np.ndarray) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint64)
    total = np.zeros(words.shape, dtype=np.int64)
    for shift in range(0, WORD_BITS, 4):
        nibble = (words >> np.uint64(shift)) & np.uint64(0xF)
        total += _NIBBLE_TABLE[nibble.astype(np.intp)]
    return total


# Выбор реализации один раз при импорте; обе обязаны совпадать побитно.
if hasattr(np, "bitwise_count"):
    POPCOUNT_BACKEND = "hardware"
    popcount64 = _popcount_hardware
else:
    POPCOUNT_BACKEND = "nibble"
    popcount64 = _popcount_nibble


def xnor_popcount_dot(a: BitRow, w: BitRow) -> int:
    """
    ±1 скалярное произведение через XNOR + PopCount: 2p - n,
    где p - число совпавших валидных бит.
    """
    if a.n_bits != w.n_bits or a.words.shape != w.words.shape:
        raise ContractError(f"xnor_popcount_dot: length mismatch {a.n_bits} vs {w.n_bits}")
    n = a.n_bits
    if n == 0:
        return 0
    xnor = ~(a.words ^ w.words)
    xnor[-1] &= last_word_mask(n)
    p = int(popcount64(xnor).sum())
    return 2 * p - n


# --- Ядро XNOR-GEMM ---

@njit(inline="always")
def _popcount_swar(x):
    x = x - ((x >> _S1) & _M1)
    x = (x & _M2) + ((x >> _S2) & _M2)
    x = (x + (x >> _S4)) & _M4
    return (x * _H01) >> _S56


@njit(parallel=True)
def _xnor_gemm_kernel(a, w, last_mask, n_bits, out):
    m_rows, k = a.shape
    o_rows = w.shape[0]
    for i in prange(m_rows):
        for j in range(o_rows):
            p = np.uint64(0)
            for t in range(k - 1):
                p += _popcount_swar(~(a[i, t] ^ w[j, t]))
            p += _popcount_swar(~(a[i, k - 1] ^ w[j, k - 1]) & last_mask)
            out[i, j] = 2 * np.int64(p) - n_bits


def xnor_gemm(a_words: np.ndarray, w_words: np.ndarray, n_bits: int) -> np.ndarray:
    """
    Матрица целых ±1 произведений: out[i, j] = dot(a_i, w_j).
    a_words: (M, K) слов, w_words: (O, K) слов, n_bits - логическая длина строки.
    """
    if a_words.shape[1] != w_words.shape[1] or a_words.shape[1] != words_for(n_bits):
        raise ContractError(
            f"xnor_gemm: word count mismatch {a_words.shape[1]} vs {w_words.shape[1]} for n={n_bits}"
        )
    out = np.zeros((a_words.shape[0], w_words.shape[0]), dtype=np.int32)
    if n_bits == 0 or out.size == 0:
        return out
    _xnor_gemm_kernel(
        np.ascontiguousarray(a_words, dtype=np.uint64),
        np.ascontiguousarray(w_words, dtype=np.uint64),
        last_word_mask(n_bits),
        np.int64(n_bits),
        out,
    )
    return out
