import numpy as np
import pytest

from bi_core.bi_bitpack import (
    WORD_BITS,
    BitRow,
    _popcount_nibble,
    last_word_mask,
    pack_bit_rows,
    popcount64,
    sign_pack,
    unpack,
    unpack_bit_rows,
    words_for,
    xnor_gemm,
    xnor_popcount_dot,
)
from src.bi_errors import ContractError


def test_sign_convention_zero_is_plus_one():
    bits = sign_pack(np.array([-0.5, 2.0, 0.0], dtype=np.float32))
    assert unpack(bits).tolist() == [-1.0, 1.0, 1.0]


def test_words_and_mask():
    assert words_for(0) == 0
    assert words_for(1) == 1
    assert words_for(64) == 1
    assert words_for(65) == 2
    assert last_word_mask(64) == np.uint64(0xFFFFFFFFFFFFFFFF)
    assert last_word_mask(70) == np.uint64(0b111111)


@pytest.mark.parametrize("n", [1, 63, 64, 65, 130])
def test_tail_bits_are_zero(rng, n):
    x = rng.standard_normal((3, n))
    x[:, -1] = 1.0
    b = sign_pack(x)
    assert b.words.shape == (3, words_for(n))
    tail = b.words[:, -1] & ~last_word_mask(n)
    assert np.all(tail == 0)


def test_pack_unpack_rows(rng):
    bits = (rng.random((4, 100)) > 0.5).astype(np.uint8)
    assert np.array_equal(unpack_bit_rows(pack_bit_rows(bits), 100), bits)


def test_unpack_restores_signs(rng):
    x = rng.standard_normal((2, 3, 5, 7))
    assert np.array_equal(unpack(sign_pack(x)), np.where(x >= 0, 1.0, -1.0))


@pytest.mark.parametrize("n", [1, 5, 63, 64, 65, 200])
def test_xnor_dot_matches_dense(rng, n):
    a = rng.standard_normal(n)
    w = rng.standard_normal(n)
    expected = int(np.dot(np.where(a >= 0, 1, -1), np.where(w >= 0, 1, -1)))
    pa = sign_pack(a)
    pw = sign_pack(w)
    assert xnor_popcount_dot(pa.row(0), pw.row(0)) == expected


def test_xnor_dot_extremes():
    ones = sign_pack(np.ones(70))
    minus = sign_pack(-np.ones(70))
    assert xnor_popcount_dot(ones.row(0), ones.row(0)) == 70
    assert xnor_popcount_dot(ones.row(0), minus.row(0)) == -70


def test_xnor_dot_empty_rows():
    empty = BitRow(np.zeros(0, dtype=np.uint64), 0)
    assert xnor_popcount_dot(empty, empty) == 0


def test_xnor_dot_length_mismatch():
    a = sign_pack(np.ones(10)).row(0)
    b = sign_pack(np.ones(11)).row(0)
    with pytest.raises(ContractError):
        xnor_popcount_dot(a, b)


def test_popcount_backends_agree(rng):
    words = rng.integers(0, 2 ** 63, size=256, dtype=np.uint64) * np.uint64(2) + np.uint64(1)
    words[0] = np.uint64(0)
    words[1] = np.uint64(0xFFFFFFFFFFFFFFFF)
    nibble = _popcount_nibble(words)
    assert nibble[0] == 0
    assert nibble[1] == WORD_BITS
    assert np.array_equal(popcount64(words), nibble)


@pytest.mark.parametrize("n", [9, 64, 144, 577])
def test_xnor_gemm_matches_dense(rng, n):
    a = rng.standard_normal((13, n))
    w = rng.standard_normal((5, n))
    pa, pw = sign_pack(a), sign_pack(w)
    out = xnor_gemm(pa.words, pw.words, n)
    dense = np.where(a >= 0, 1, -1) @ np.where(w >= 0, 1, -1).T
    assert out.dtype == np.int32
    assert np.array_equal(out, dense)


def test_xnor_gemm_word_mismatch():
    a = sign_pack(np.ones((2, 70)))
    w = sign_pack(np.ones((2, 10)))
    with pytest.raises(ContractError):
        xnor_gemm(a.words, w.words, 70)
