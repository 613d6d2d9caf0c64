
import numpy as np
import pytest

from bc_bench import BenchShape, bench_shape, checksum, naive_conv, packed_conv, parse_shapes, run_bench
from bc_errormap import COLORS, ErrorMapManager, color_counts, error_map
from bi_core.bi_bitpack import sign_pack, unpack
from bi_core.bi_model import ChangeNet
from bi_core.bi_objective import confusion
from bi_data.bd_pair_service import PairService
from bi_data.bd_synth_manager import SynthConfig, generate
from src.bi_errors import ConfigError


# --- Бенчмарк ---

def test_parse_shapes():
    shapes = parse_shapes([{"cin": 16, "cout": 8, "k": 3, "h": 10, "w": 12}])
    assert shapes == [BenchShape(16, 8, 3, 10, 12)]
    with pytest.raises(ConfigError):
        parse_shapes([])
    with pytest.raises(ConfigError):
        parse_shapes([{"cin": 1}])
    with pytest.raises(ConfigError):
        parse_shapes([{"cin": 0, "cout": 1, "k": 1, "h": 1, "w": 1}])


@pytest.mark.parametrize("shape", [BenchShape(1, 1, 1, 5, 5), BenchShape(3, 4, 3, 6, 7), BenchShape(70, 2, 3, 4, 4)])
def test_packed_and_naive_agree(rng, shape):
    x = rng.standard_normal((1, shape.cin, shape.h, shape.w)).astype(np.float32)
    w = rng.standard_normal((shape.cout, shape.cin, shape.k, shape.k)).astype(np.float32)
    packed = packed_conv(x, sign_pack(w.reshape(shape.cout, -1)), shape.spec)
    naive = naive_conv(unpack(sign_pack(x)), unpack(sign_pack(w)), shape.spec)
    assert np.array_equal(packed, naive.astype(np.int32))
    assert checksum(packed) == checksum(naive)


def test_bench_row_is_ok():
    row = bench_shape(BenchShape(4, 4, 3, 8, 8), seed=0, iters=2, warmup=1)
    assert row.status == "ok"
    assert row.checksum_packed == row.checksum_naive
    assert row.packed_ns > 0 and row.naive_ns > 0
    assert set(row.as_dict()) >= {"cin", "speedup", "status"}


@pytest.mark.slow
def test_packed_kernel_is_at_least_twice_as_fast():
    row = bench_shape(BenchShape(64, 64, 3, 64, 64), seed=0, iters=10, warmup=2)
    assert row.status == "ok"
    assert row.checksum_packed == row.checksum_naive
    assert row.speedup >= 2.0


def test_bench_needs_iterations():
    with pytest.raises(ConfigError):
        run_bench([BenchShape(1, 1, 1, 2, 2)], iters=0)


# --- Карты ошибок ---

def test_error_map_colours_match_confusion(rng):
    logits = rng.standard_normal((1, 6, 6))
    y = (rng.random((1, 6, 6)) > 0.5).astype(np.float32)
    rgb = error_map(logits, y)
    assert rgb.shape == (6, 6, 3) and rgb.dtype == np.uint8
    assert color_counts(rgb) == confusion(logits[None], y[None])


def test_error_map_export(tmp_path):
    pairs = generate(SynthConfig(seed=2, image_size=16, n_pairs=2))
    net = ChangeNet.create(np.random.default_rng(0), width=4)
    counts = ErrorMapManager(net).export(pairs, str(tmp_path))
    assert sorted(counts) == sorted(p.stem for p in pairs)
    for pair in pairs:
        img = PairService.read_netpbm(str(tmp_path / f"{pair.stem}.ppm"))
        assert img.shape == (16, 16, 3)
        assert color_counts(img) == counts[pair.stem]
        assert counts[pair.stem].total == 256
    allowed = {tuple(c) for c in COLORS.values()}
    assert {tuple(px) for px in img.reshape(-1, 3)} <= allowed
