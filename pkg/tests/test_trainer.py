import logging
import os

import numpy as np
import pytest

from bi_core.bi_binconv import BinConvLayer, ConvSpec, RealConvLayer
from bi_core.bi_model import ChangeNet
from bi_core.bi_objective import LossWeights
from bi_data.bd_synth_manager import SynthConfig, generate
from bi_trainer.tr_manager import (
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    METRICS_FILE,
    TrainerManager,
    build_models,
    evaluate_pairs,
    iterate_batches,
    summarize_ablation,
)
from bi_trainer.tr_optim import LATENT_CLAMP, OptimState, Schedule, adam_step
from bi_trainer.tr_service import CheckpointService, MetricsService
from bi_trainer.tr_stats import layer_stats, model_stats, stats_table
from src.bi_config import RunConfig
from src.bi_errors import CheckpointError, ContractError


# --- Adam ---

def test_adam_first_step_closed_form():
    params = {"theta/p": np.zeros(1)}
    state = OptimState.for_params(params)
    adam_step(params, {"theta/p": np.ones(1)}, state, lr=0.01)
    assert params["theta/p"][0] == pytest.approx(-0.01, abs=1e-6)
    assert state.step == 1


def test_adam_zero_lr_keeps_params(rng):
    params = {"theta/p": rng.standard_normal((3, 2)), "theta/l/latent_w": rng.standard_normal(4)}
    before = {name: value.copy() for name, value in params.items()}
    state = OptimState.for_params(params)
    for _ in range(3):
        adam_step(params, {name: rng.standard_normal(v.shape) for name, v in params.items()}, state, lr=0.0)
    for name in params:
        assert np.array_equal(params[name], before[name])
    assert state.step == 3


def test_adam_three_step_trajectory():
    params = {"theta/p": np.array([0.5])}
    state = OptimState.for_params(params)
    p, m, v = 0.5, 0.0, 0.0
    trajectory = []
    for t, g in enumerate([1.0, -2.0, 0.5], start=1):
        adam_step(params, {"theta/p": np.array([g])}, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert params["theta/p"][0] == pytest.approx(p, rel=1e-12)
        trajectory.append(params["theta/p"][0])
    # первый шаг - ровно lr против знака градиента; второй: m̂ = -0.11/0.19, v̂ = 0.004999/0.001999
    assert trajectory[0] == pytest.approx(0.49, abs=1e-9)
    assert trajectory[1] == pytest.approx(0.493661033, abs=1e-6)
    # m̂ всё ещё отрицателен после g = 0.5, шаг продолжает рост
    assert trajectory[2] > trajectory[1]


def test_adam_missing_grad_is_zero():
    params = {"theta/a": np.ones(2), "theta/b": np.ones(2)}
    state = OptimState.for_params(params)
    adam_step(params, {"theta/a": np.ones(2)}, state, lr=0.1)
    assert np.array_equal(params["theta/b"], np.ones(2))
    assert np.all(params["theta/a"] < 1)


def test_adam_clamps_latent_weights():
    params = {"theta/l/latent_w": np.array([1.499, -1.499])}
    state = OptimState.for_params(params)
    adam_step(params, {"theta/l/latent_w": np.array([-1.0, 1.0])}, state, lr=0.5)
    assert np.array_equal(params["theta/l/latent_w"], np.array([LATENT_CLAMP, -LATENT_CLAMP]))


def test_adam_contract():
    params = {"theta/a": np.zeros(2)}
    state = OptimState.for_params(params)
    with pytest.raises(ContractError):
        adam_step(params, {"theta/zzz": np.zeros(2)}, state, lr=0.1)
    with pytest.raises(ContractError):
        adam_step(params, {"theta/a": np.zeros(3)}, state, lr=0.1)


# --- Расписание ---

def test_cosine_schedule_endpoints():
    s = Schedule(epochs=20, base_lr=5e-4)
    assert s.theta_lr(0) == pytest.approx(5e-4)
    assert s.theta_lr(19) == pytest.approx(5e-10)
    lrs = [s.theta_lr(e) for e in range(20)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert Schedule(epochs=1).theta_lr(0) == Schedule(epochs=1).base_lr


@pytest.mark.parametrize("epochs,drops", [(140, (90, 120)), (20, (13, 17)), (3, (1, 2)), (2, (1,)), (1, ())])
def test_aux_drop_epochs(epochs, drops):
    assert Schedule(epochs=epochs).drop_epochs == drops


def test_aux_lr_steps():
    s = Schedule(epochs=140, aux_lr=5e-3)
    assert s.eta_lr(89) == pytest.approx(5e-3)
    assert s.eta_lr(90) == pytest.approx(5e-4)
    assert s.eta_lr(120) == pytest.approx(5e-5)


def test_warmup_factor():
    s = Schedule(epochs=10, warmup_frac=0.1, iters_per_epoch=10)
    assert s.warmup_iters == 10
    assert s.warmup_factor(0) == pytest.approx(0.1)
    assert s.warmup_factor(9) == 1.0
    assert s.warmup_factor(50) == 1.0
    assert Schedule(epochs=10, warmup_frac=0.0).warmup_factor(0) == 1.0


def test_schedule_contract():
    with pytest.raises(ContractError):
        Schedule(epochs=0)
    with pytest.raises(ContractError):
        Schedule(epochs=5, warmup_frac=1.0)


# --- Чекпоинты ---

def _tiny_net(seed=0):
    return ChangeNet.create(np.random.default_rng(seed), width=4)


def test_checkpoint_roundtrip(tmp_path, rng):
    net = _tiny_net(3)
    path = str(tmp_path / "net.bicd")
    service = CheckpointService()
    service.save_net(path, net, epoch=4, iteration=40, seed=3, f1=0.625)
    loaded, meta = service.load_net(path)
    assert meta["epoch"] == 4 and meta["iteration"] == 40 and meta["f1"] == 0.625
    assert meta["width"] == 4 and meta["binarized"] == 1
    for name, value in net.params().items():
        assert np.array_equal(loaded.params()[name], value)
    x0 = rng.random((1, 3, 16, 16)).astype(np.float32)
    x1 = rng.random((1, 3, 16, 16)).astype(np.float32)
    assert np.array_equal(loaded.predict(x0, x1), net.predict(x0, x1))


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    service = CheckpointService()
    first, second = str(tmp_path / "a.bicd"), str(tmp_path / "b.bicd")
    service.save_net(first, _tiny_net(7), epoch=2, iteration=18, seed=7, f1=0.4375)
    loaded, meta = service.load_net(first)
    service.save_net(second, loaded, **meta)
    with open(first, "rb") as a, open(second, "rb") as b:
        assert a.read() == b.read()


def test_checkpoint_records_keep_dtypes():
    records = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1.5], dtype=np.float64),
        "c": np.array([7], dtype=np.int64),
        "d": np.array([1, 0], dtype=np.uint8),
    }
    decoded = CheckpointService.decode(CheckpointService.encode(records))
    assert list(decoded) == list(records)
    for name, value in records.items():
        assert decoded[name].dtype == value.dtype
        assert np.array_equal(decoded[name], value)


def test_checkpoint_rejects_unsupported_dtype():
    with pytest.raises(CheckpointError):
        CheckpointService.encode({"x": np.zeros(2, dtype=np.int16)})


def test_checkpoint_corruption_is_detected(rng):
    blob = CheckpointService.net_records(_tiny_net(), {"epoch": 1})
    blob = CheckpointService.encode(blob)
    for pos in rng.integers(0, len(blob), size=100):
        corrupted = bytearray(blob)
        corrupted[pos] ^= 0x5A
        with pytest.raises(CheckpointError):
            CheckpointService.decode(bytes(corrupted))
    with pytest.raises(CheckpointError):
        CheckpointService.decode(blob[:-9])
    with pytest.raises(CheckpointError):
        CheckpointService.decode(b"BICD")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="missing"):
        CheckpointService().load(str(tmp_path / "none.bicd"))


def test_metrics_csv_roundtrip(tmp_path):
    path = str(tmp_path / "m.csv")
    MetricsService.write_csv(path, ("epoch", "val_f1"), [{"epoch": 0, "val_f1": 0.1, "extra": 1}])
    rows = MetricsService.read_csv(path)
    assert rows == [{"epoch": "0", "val_f1": "0.1"}]


# --- Статистика модели ---

def test_binary_layer_ops_rule(rng):
    layer = BinConvLayer.create("theta/b", ConvSpec(16, 16, 3, 3, padding=1), rng)
    row = layer_stats(layer, 32, 32)
    assert row.macs == 2_359_296
    assert row.ops == 36_864
    assert row.params == pytest.approx(16 * 16 * 9 / 32 + 16 * 3)


def test_real_layer_counts(rng):
    layer = RealConvLayer.create("theta/r", ConvSpec(3, 1, 1, 1), rng, bias=False)
    row = layer_stats(layer, 1, 1)
    assert row.params == 3
    assert row.ops == 6


def test_model_stats_sums_layers():
    net = _tiny_net()
    table = stats_table(net, 16)
    assert len(table) == len(net.layers())
    params_m, ops_g = model_stats(net, 16)
    assert params_m == pytest.approx(sum(r.params for r in table) / 1e6)
    assert ops_g == pytest.approx(sum(r.ops for r in table) / 1e9)
    assert model_stats(net, 32).ops_g > ops_g


# --- Цикл обучения ---

def test_iterate_batches():
    chunks = list(iterate_batches(list(range(5)), 2, [4, 3, 2, 1, 0]))
    assert chunks == [[4, 3], [2, 1], [0]]


def test_summarize_ablation():
    class R:
        def __init__(self, beta2, f1):
            self.beta1, self.beta2, self.best_f1 = 1e-3, beta2, f1

    rows = summarize_ablation([R(0.0, 0.5), R(0.0, 0.7), R(0.08, 0.9)])
    assert rows[0]["runs"] == 2
    assert rows[0]["mean_best_f1"] == pytest.approx(0.6)
    assert rows[1]["std_best_f1"] == 0.0


def _tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=2, image_size=16, n_pairs=4, val_pairs=2, width=4, checkpoint_every=1)
    base.update(kw)
    return RunConfig(**base)


@pytest.mark.slow
def test_short_training_run(tmp_path):
    cfg = _tiny_cfg()
    pairs = generate(SynthConfig(seed=0, image_size=16, n_pairs=6))
    train, val = pairs[:4], pairs[4:]
    net, aux = build_models(cfg, seed=0)
    report = TrainerManager(cfg, str(tmp_path)).train(train, net, aux, LossWeights(), val, seed=0)

    assert len(report.curves) == 2
    assert 0 <= report.best_epoch < 2
    assert all(np.isfinite(row["total"]) for row in report.curves)
    for name in (BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE, "ckpt_epoch_0000.bicd", "ckpt_epoch_0001.bicd"):
        assert os.path.exists(tmp_path / name)
    assert len(MetricsService.read_csv(str(tmp_path / METRICS_FILE))) == 2

    best, meta = CheckpointService().load_net(str(tmp_path / BEST_CHECKPOINT))
    assert meta["epoch"] == report.best_epoch
    _, f1 = evaluate_pairs(best, val, cfg.batch_size)
    assert f1 == report.best_f1


@pytest.mark.slow
def test_training_is_reproducible(tmp_path):
    cfg = _tiny_cfg(epochs=1, checkpoint_every=0)
    train = generate(SynthConfig(seed=1, image_size=16, n_pairs=4))
    finals = []
    for run in ("a", "b"):
        net, aux = build_models(cfg, seed=5)
        TrainerManager(cfg, str(tmp_path / run)).train(train, net, aux, LossWeights(), train, seed=5)
        finals.append(net.params().snapshot())
    for name in finals[0]:
        assert np.array_equal(finals[0][name], finals[1][name])


def test_training_rejects_empty_dataset(tmp_path):
    cfg = _tiny_cfg()
    net, aux = build_models(cfg, seed=0)
    with pytest.raises(ContractError):
        TrainerManager(cfg, str(tmp_path)).train([], net, aux, LossWeights())


@pytest.mark.slow
def test_ablation_grid_writes_tables(tmp_path):
    cfg = _tiny_cfg(epochs=1, checkpoint_every=0)
    pairs = generate(SynthConfig(seed=0, image_size=16, n_pairs=6))
    reports = TrainerManager(cfg, str(tmp_path)).run_ablation(pairs[:4], pairs[4:], [0], [1e-3], [0.0, 0.08])
    assert [(r.beta2, r.seed) for r in reports] == [(0.0, 0), (0.08, 0)]
    assert len(MetricsService.read_csv(str(tmp_path / "ablation.csv"))) == 2
    summary = MetricsService.read_csv(str(tmp_path / "ablation_summary.csv"))
    assert [row["runs"] for row in summary] == ["1", "1"]
    assert os.path.exists(tmp_path / "b1_0.001_b2_0.08_seed_0" / BEST_CHECKPOINT)


@pytest.mark.slow
def test_missing_validation_set_is_logged(tmp_path, caplog):
    cfg = _tiny_cfg(epochs=1, checkpoint_every=0)
    train = generate(SynthConfig(seed=2, image_size=16, n_pairs=4))
    net, aux = build_models(cfg, seed=0)
    with caplog.at_level(logging.WARNING, logger="Trainer"):
        report = TrainerManager(cfg, str(tmp_path)).train(train, net, aux, LossWeights(), [], seed=0)
    assert "no validation pairs" in caplog.text
    assert len(report.curves) == 1


@pytest.mark.slow
def test_ablation_direction_at_desk_scale(tmp_path):
    cfg = RunConfig()
    pairs = generate(SynthConfig(seed=cfg.seed, image_size=cfg.image_size, n_pairs=cfg.n_pairs + cfg.val_pairs))
    reports = TrainerManager(cfg, str(tmp_path)).run_ablation(
        pairs[:cfg.n_pairs], pairs[cfg.n_pairs:], [0, 1, 2], [cfg.beta1], [0.0, 0.08])
    summary = {row["beta2"]: row["mean_best_f1"] for row in summarize_ablation(reports)}
    assert summary[0.0] > 0.5
    assert summary[0.08] >= summary[0.0]
    for report in reports:
        assert len(report.curves) == cfg.epochs
        assert report.curves[-1]["total"] < report.curves[0]["total"]
