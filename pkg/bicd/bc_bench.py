import logging
import time
import zlib
from typing import NamedTuple

import numpy as np
from numba import njit

from bi_core.bi_binconv import ConvSpec, im2row_packed
from bi_core.bi_bitpack import sign_pack, unpack, xnor_gemm
from bi_core.bi_ops import rows_to_nchw
from src.bi_errors import ConfigError

logger = logging.getLogger("Bench")

BENCH_COLUMNS = ("cin", "cout", "k", "h", "w", "packed_ns", "naive_ns", "speedup",
                 "checksum_packed", "checksum_naive", "status")


class BenchShape(NamedTuple):
    cin: int
    cout: int
    k: int
    h: int
    w: int

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec(self.cin, self.cout, self.k, self.k, padding=self.k // 2)


class BenchRow(NamedTuple):
    shape: BenchShape
    packed_ns: float | None
    naive_ns: float | None
    speedup: float | None
    checksum_packed: int
    checksum_naive: int
    status: str

    def as_dict(self) -> dict:
        out = self.shape._asdict()
        out.update({"packed_ns": self.packed_ns, "naive_ns": self.naive_ns, "speedup": self.speedup,
                    "checksum_packed": self.checksum_packed, "checksum_naive": self.checksum_naive,
                    "status": self.status})
        return out


def parse_shapes(raw) -> list:
    """Список словарей {cin, cout, k, h, w} -> BenchShape."""
    shapes = []
    if not isinstance(raw, list) or not raw:
        raise ConfigError("bench shapes must be a non-empty list")
    for i, item in enumerate(raw):
        try:
            shape = BenchShape(*(int(item[key]) for key in BenchShape._fields))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bench shape #{i}: {e}")
        if min(shape) < 1:
            raise ConfigError(f"bench shape #{i}: all fields must be positive")
        shapes.append(shape)
    return shapes


@njit
def _naive_conv(x, w, pad, out):
    """Прямая свёртка во float32 по ±1 операндам; паддинг значением -1."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    _, _, oh, ow = out.shape
    for b in range(n):
        for oc in range(o):
            for y in range(oh):
                for xx in range(ow):
                    acc = np.float32(0.0)
                    for ic in range(c):
                        for ky in range(kh):
                            iy = y + ky - pad
                            for kx in range(kw):
                                ix = xx + kx - pad
                                if 0 <= iy < h and 0 <= ix < wd:
                                    v = x[b, ic, iy, ix]
                                else:
                                    v = np.float32(-1.0)
                                acc += v * w[oc, ic, ky, kx]
                    out[b, oc, y, xx] = acc


def naive_conv(x_pm: np.ndarray, w_pm: np.ndarray, spec: ConvSpec) -> np.ndarray:
    oh, ow = spec.out_hw(x_pm.shape[2], x_pm.shape[3])
    out = np.zeros((x_pm.shape[0], spec.out_channels, oh, ow), dtype=np.float32)
    _naive_conv(x_pm, w_pm, spec.padding, out)
    return out


def packed_conv(x: np.ndarray, w_bits, spec: ConvSpec) -> np.ndarray:
    """Упаковка входа + im2row + XNOR-GEMM; выход - целые ±1 произведения."""
    n, _, h, wd = x.shape
    oh, ow = spec.out_hw(h, wd)
    rows = im2row_packed(sign_pack(x), spec)
    return rows_to_nchw(xnor_gemm(rows.words, w_bits.words, rows.n_bits), n, oh, ow)


def checksum(out: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(out, dtype=np.int32).tobytes())


def _median_ns(fn, iters: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = np.empty(iters, dtype=np.float64)
    for i in range(iters):
        start = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - start
    return float(np.median(samples))


def bench_shape(shape: BenchShape, seed: int = 0, iters: int = 50, warmup: int = 3) -> BenchRow:
    """Проверка контрольных сумм, затем замер медианы. При расхождении время не замеряется."""
    spec = shape.spec
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, shape.cin, shape.h, shape.w)).astype(np.float32)
    w = rng.standard_normal((shape.cout, shape.cin, shape.k, shape.k)).astype(np.float32)
    w_bits = sign_pack(w.reshape(shape.cout, -1))
    x_pm = unpack(sign_pack(x))
    w_pm = unpack(sign_pack(w))

    out_packed = packed_conv(x, w_bits, spec)
    out_naive = naive_conv(x_pm, w_pm, spec)
    sum_packed = checksum(out_packed)
    sum_naive = checksum(out_naive)
    if sum_packed != sum_naive or not np.array_equal(out_packed, out_naive.astype(np.int32)):
        logger.error(f"{shape}: checksum mismatch {sum_packed:#010x} vs {sum_naive:#010x}, row aborted")
        return BenchRow(shape, None, None, None, sum_packed, sum_naive, "checksum_mismatch")

    packed_ns = _median_ns(lambda: packed_conv(x, w_bits, spec), iters, warmup)
    naive_ns = _median_ns(lambda: naive_conv(x_pm, w_pm, spec), iters, warmup)
    speedup = naive_ns / packed_ns if packed_ns > 0 else float("inf")
    logger.info(f"{shape}: packed {packed_ns / 1e3:.1f} us, naive {naive_ns / 1e3:.1f} us, x{speedup:.2f}")
    return BenchRow(shape, packed_ns, naive_ns, speedup, sum_packed, sum_naive, "ok")


def run_bench(shapes: list, seed: int = 0, iters: int = 50, warmup: int = 3) -> list:
    if iters < 1:
        raise ConfigError("bench needs at least one timed iteration")
    return [bench_shape(shape, seed, iters, warmup) for shape in shapes]
