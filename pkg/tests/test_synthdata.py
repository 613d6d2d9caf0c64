import os

import numpy as np
import pytest
from pydantic import ValidationError

from bi_data.bd_pair_service import PairService
from bi_data.bd_synth_manager import ChangePair, SynthConfig, SynthDataManager, generate, quantize, shift_subpixel
from src.bi_errors import DataError


def _cfg(**kw):
    base = {"seed": 7, "image_size": 16, "n_pairs": 6}
    base.update(kw)
    return SynthConfig(**base)


def test_generation_is_deterministic():
    a = generate(_cfg())
    b = generate(_cfg())
    c = generate(_cfg(seed=8))
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.x0, pb.x0)
        assert np.array_equal(pa.x1, pb.x1)
        assert np.array_equal(pa.y, pb.y)
    assert not all(np.array_equal(pa.x0, pc.x0) for pa, pc in zip(a, c))


def test_pair_prefix_is_stable():
    short = generate(_cfg(n_pairs=2))
    long = generate(_cfg(n_pairs=6))
    # SeedSequence.spawn: первые пары не зависят от общего числа
    assert np.array_equal(short[1].x1, long[1].x1)


def test_pair_shapes_and_values():
    for pair in generate(_cfg()):
        assert pair.x0.shape == (3, 16, 16) and pair.y.shape == (1, 16, 16)
        assert pair.x0.dtype == np.float32
        assert set(np.unique(pair.y)) <= {0.0, 1.0}
        assert np.all((pair.x0 >= 0) & (pair.x0 <= 1))
        # значения лежат на сетке k/255
        assert np.array_equal(quantize(pair.x1), pair.x1)


def test_coverage_within_bounds():
    cfg = _cfg(image_size=32, n_pairs=10)
    for pair in generate(cfg):
        coverage = float(pair.y.mean())
        assert cfg.coverage_min <= coverage <= cfg.coverage_max


def test_no_objects_means_empty_mask():
    for pair in generate(_cfg(min_objects=0, max_objects=0)):
        assert not np.any(pair.y)


def test_unreachable_coverage_names_pair():
    cfg = _cfg(coverage_min=0.99, coverage_max=1.0, max_retries=2)
    with pytest.raises(DataError, match="pair 0"):
        SynthDataManager(cfg).generate()


def test_config_validation():
    with pytest.raises(ValidationError):
        SynthConfig(image_size=18)
    with pytest.raises(ValidationError):
        SynthConfig(min_objects=3, max_objects=1)
    with pytest.raises(ValidationError):
        SynthConfig(object_kinds=("triangle",))
    with pytest.raises(ValidationError):
        SynthConfig(colour="red")


def test_noise_without_ops_is_identity(rng):
    manager = SynthDataManager(_cfg(noise_ops=()))
    img = rng.random((3, 8, 8))
    assert np.array_equal(manager.apply_noise(img, rng), img)


def test_shift_subpixel_integer_shift(rng):
    img = rng.random((1, 6, 6))
    shifted = shift_subpixel(img, 1.0, 0.0)
    np.testing.assert_allclose(shifted[:, 1:], img[:, :-1])
    np.testing.assert_allclose(shift_subpixel(img, 0.0, 0.0), img)


def test_flipped_pair():
    pair = generate(_cfg(n_pairs=1))[0]
    flipped = pair.flipped()
    assert np.array_equal(flipped.y[:, :, ::-1], pair.y)
    assert np.array_equal(flipped.flipped().x0, pair.x0)


# --- NetPBM и каталог пар ---

def test_pair_dir_roundtrip(tmp_path):
    pairs = generate(_cfg(n_pairs=3))
    service = PairService()
    service.save_pair_dir(str(tmp_path), pairs)
    loaded = service.load_pair_dir(str(tmp_path))
    assert [p.stem for p in loaded] == sorted(p.stem for p in pairs)
    for a, b in zip(pairs, loaded):
        assert np.array_equal(a.x0, b.x0)
        assert np.array_equal(a.x1, b.x1)
        assert np.array_equal(a.y, b.y)


def test_netpbm_header_with_comment(tmp_path):
    path = tmp_path / "img.pgm"
    path.write_bytes(b"P5\n# comment\n2 1\n255\n\x00\xff")
    img = PairService.read_netpbm(str(path))
    assert img.tolist() == [[0, 255]]


@pytest.mark.parametrize("blob", [
    b"P3\n1 1\n255\n\x00",
    b"P5\n1 1\n65535\n\x00\x00",
    b"P6\n2 2\n255\n\x00\x00\x00",
    b"P5\n1",
])
def test_netpbm_rejects_bad_files(tmp_path, blob):
    path = tmp_path / "bad.ppm"
    path.write_bytes(blob)
    with pytest.raises(DataError, match="bad.ppm"):
        PairService.read_netpbm(str(path))


def test_missing_stem_is_named(tmp_path):
    pairs = generate(_cfg(n_pairs=2))
    service = PairService()
    service.save_pair_dir(str(tmp_path), pairs)
    os.remove(tmp_path / "mask" / f"{pairs[1].stem}.pgm")
    with pytest.raises(DataError, match=pairs[1].stem):
        service.load_pair_dir(str(tmp_path))


def test_mask_threshold(tmp_path):
    service = PairService()
    x = np.zeros((3, 2, 2), dtype=np.float32)
    service.save_pair_dir(str(tmp_path), [ChangePair(x, x, np.zeros((1, 2, 2), np.float32), "a")])
    service.write_pgm(str(tmp_path / "mask" / "a.pgm"), np.array([[127, 128], [0, 255]], dtype=np.uint8))
    pair = service.load_pair_dir(str(tmp_path))[0]
    assert pair.y[0].tolist() == [[0.0, 1.0], [0.0, 1.0]]
