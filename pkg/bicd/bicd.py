import argparse
import glob
import logging
import os
import sys

# Определяем путь к корню проекта
current_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(current_dir)

# Добавляем корень проекта в sys.path, чтобы видеть src и bi_*
if project_root not in sys.path:
    sys.path.insert(0, project_root)

# Соседние модули (bc_*) импортируются напрямую, как при запуске скриптом
if current_dir not in sys.path:
    sys.path.insert(0, current_dir)

import numpy as np

from bi_core.bi_miplane import TRACE_COLUMNS, BinningConfig, trace_info_plane
from bi_core.bi_model import ChangeNet, PairBatch
from bi_core.bi_objective import Confusion, LossWeights, f1_score
from bi_data.bd_pair_service import PairService
from bi_data.bd_synth_manager import SynthConfig, generate
from bi_trainer.tr_manager import TrainerManager, build_models, evaluate_pairs
from bi_trainer.tr_service import CheckpointService, MetricsService
from bi_trainer.tr_stats import model_stats, stats_table
from bc_bench import BENCH_COLUMNS, parse_shapes, run_bench
from bc_errormap import ErrorMapManager
from src.bi_config import RunConfig, resolve_config, save_resolved
from src.bi_errors import BicdError, ConfigError, DataError
from src.manager_save_load import ConfigManager
from src.utilts import apply_thread_cap, get_config_path

logger = logging.getLogger("Harness")

RESOLVED_CONFIG = "resolved_config.json"


# --- Разбор аргументов ---

def _csv_list(cast):
    def parse(raw: str):
        try:
            return [cast(item) for item in raw.split(",") if item.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e))
    return parse


class CliParser(argparse.ArgumentParser):
    """Ошибка разбора аргументов - ConfigError, печатается одной строкой как остальные."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="bicd", description="1-bit change detection toolkit")
    common = CliParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--verbose", action="store_true", help="INFO logging")
    common.add_argument("--image-size", dest="image_size", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--train-dir", dest="train_dir")
    common.add_argument("--val-dir", dest="val_dir")
    common.add_argument("--pairs", dest="n_pairs", type=int)
    common.add_argument("--val-pairs", dest="val_pairs", type=int)

    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic pair dataset")

    train = sub.add_parser("train", parents=[common], help="train (or run a beta ablation grid)")
    train.add_argument("--epochs", type=int)
    train.add_argument("--beta1", type=_csv_list(float))
    train.add_argument("--beta2", type=_csv_list(float))
    train.add_argument("--seeds", type=_csv_list(int))
    train.add_argument("--aux-placement", dest="aux_placement")
    train.add_argument("--real", dest="binarized", action="store_const", const=False,
                       help="full-precision twin instead of 1-bit layers")
    train.add_argument("--no-calibrate", dest="calibrate", action="store_const", const=False)
    train.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)

    ev = sub.add_parser("eval", parents=[common], help="F1 of a checkpoint on the validation split")
    ev.add_argument("--checkpoint", required=True)

    info = sub.add_parser("infoplane", parents=[common], help="I(X;Z), I(Z;Y) over checkpoints")
    info.add_argument("--checkpoints", nargs="+", required=True, help="files or directories")
    info.add_argument("--probe-layer", dest="probe_layer")
    info.add_argument("--bins", dest="n_bins", type=int)

    stats = sub.add_parser("stats", parents=[common], help="parameter and OPs accounting")
    stats.add_argument("--checkpoint")

    bench = sub.add_parser("bench", parents=[common], help="packed vs naive convolution timing")
    bench.add_argument("--shapes", default=get_config_path("bench_shapes.json"))
    bench.add_argument("--iters", type=int, default=50)
    bench.add_argument("--warmup", type=int, default=3)

    emap = sub.add_parser("errormap", parents=[common], help="TP/FP/FN/TN colour maps")
    emap.add_argument("--checkpoint", required=True)
    emap.add_argument("--pair-dir", dest="pair_dir", required=True)
    return parser


OVERRIDE_KEYS = ("seed", "image_size", "batch_size", "train_dir", "val_dir", "n_pairs", "val_pairs",
                 "epochs", "aux_placement", "binarized", "calibrate", "checkpoint_every",
                 "probe_layer", "n_bins")


def config_from_args(args) -> RunConfig:
    overrides = {key: getattr(args, key, None) for key in OVERRIDE_KEYS}
    # списки β: в RunConfig идёт первое значение, вся сетка - в train_grid
    for key in ("beta1", "beta2"):
        values = getattr(args, key, None)
        if values:
            overrides[key] = values[0]
    return resolve_config(args.config, overrides)


def train_grid(cfg: RunConfig, args) -> dict | None:
    """Сетка seed × β₁ × β₂ команды train; None для остальных команд."""
    if args.command != "train":
        return None
    return {
        "seeds": args.seeds or [cfg.seed],
        "beta1": args.beta1 or [cfg.beta1],
        "beta2": args.beta2 or [cfg.beta2],
    }


# --- Данные ---

def load_splits(cfg: RunConfig):
    """Пары из каталогов, иначе синтетика по seed: первые n_pairs - train, остальные - val."""
    service = PairService()
    if cfg.train_dir:
        train = service.load_pair_dir(cfg.train_dir)
        val = service.load_pair_dir(cfg.val_dir) if cfg.val_dir else []
        return train, val
    pairs = generate(SynthConfig(seed=cfg.seed, image_size=cfg.image_size,
                                 n_pairs=cfg.n_pairs + cfg.val_pairs))
    train, val = pairs[:cfg.n_pairs], pairs[cfg.n_pairs:]
    if cfg.val_dir:
        val = service.load_pair_dir(cfg.val_dir)
    return train, val


# --- Команды ---

def cli_synth(cfg: RunConfig, out: str):
    service = PairService()
    pairs = generate(SynthConfig(seed=cfg.seed, image_size=cfg.image_size,
                                 n_pairs=cfg.n_pairs + cfg.val_pairs))
    service.save_pair_dir(os.path.join(out, "train"), pairs[:cfg.n_pairs])
    service.save_pair_dir(os.path.join(out, "val"), pairs[cfg.n_pairs:])
    print(f"[Synth] {cfg.n_pairs} train / {cfg.val_pairs} val pairs -> {out}")


def cli_train(cfg: RunConfig, out: str, args):
    train, val = load_splits(cfg)
    if not train:
        raise DataError("training split is empty")
    grid = train_grid(cfg, args)
    seeds, beta1s, beta2s = grid["seeds"], grid["beta1"], grid["beta2"]
    manager = TrainerManager(cfg, out)
    if len(seeds) * len(beta1s) * len(beta2s) > 1:
        reports = manager.run_ablation(train, val, seeds, beta1s, beta2s)
        for r in reports:
            print(f"[Train] seed={r.seed} beta1={r.beta1:g} beta2={r.beta2:g} "
                  f"best_f1={r.best_f1:.4f} @ epoch {r.best_epoch}")
        print(f"[Train] ablation table -> {os.path.join(out, 'ablation.csv')}")
        return
    net, aux = build_models(cfg, seeds[0])
    report = manager.train(train, net, aux, LossWeights(beta1=beta1s[0], beta2=beta2s[0]), val, seeds[0])
    ConfigManager(os.path.join(out, "report.json")).save_config({
        **report.as_row(), "init_f1": report.init_f1, "curves": report.curves,
    })
    print(f"[Train] best F1={report.best_f1:.4f} at epoch {report.best_epoch}; checkpoints in {out}")


def cli_eval(cfg: RunConfig, out: str, args):
    net, meta = CheckpointService().load_net(args.checkpoint)
    _, val = load_splits(cfg)
    if not val:
        raise DataError("validation split is empty")
    conf, f1 = evaluate_pairs(net, val, cfg.batch_size)
    ok, msg = ConfigManager(os.path.join(out, "eval.json")).save_config({
        "checkpoint": os.path.basename(args.checkpoint),
        "confusion": conf.as_dict(),
        "f1": f1,
        "degenerate": conf.degenerate,
        "pooling": "pooled pixels per split",
        "pairs": len(val),
    })
    if not ok:
        raise DataError(msg)
    print(f"[Eval] F1={f1!r} tp={conf.tp} fp={conf.fp} fn={conf.fn} tn={conf.tn}")


def _expand_checkpoints(items: list) -> list:
    paths = []
    for item in items:
        if os.path.isdir(item):
            paths.extend(sorted(glob.glob(os.path.join(item, "ckpt_epoch_*.bicd"))))
        else:
            paths.append(item)
    return paths


def cli_infoplane(cfg: RunConfig, out: str, args):
    _, val = load_splits(cfg)
    if not val:
        raise DataError("validation split is empty")
    service = CheckpointService()

    def load_net(path):
        net, meta = service.load_net(path)
        return net, meta.get("iteration", 0)

    rows = trace_info_plane(_expand_checkpoints(args.checkpoints), cfg.probe_layer,
                            PairBatch.from_pairs(val), BinningConfig(n_bins=cfg.n_bins), load_net)
    path = os.path.join(out, "infoplane.csv")
    MetricsService.write_csv(path, TRACE_COLUMNS, [dict(zip(TRACE_COLUMNS, r)) for r in rows])
    print(f"[InfoPlane] {len(rows)} rows ({cfg.probe_layer}) -> {path}")


def cli_stats(cfg: RunConfig, out: str, args):
    if args.checkpoint:
        net, _ = CheckpointService().load_net(args.checkpoint)
    else:
        net = ChangeNet.create(np.random.default_rng(cfg.seed), binarized=cfg.binarized, width=cfg.width)
    params_m, ops_g = model_stats(net, cfg.image_size)
    lines = [f"{'layer':<20} {'bin':>4} {'params':>12} {'MACs':>14} {'OPs':>16}"]
    for row in stats_table(net, cfg.image_size):
        lines.append(f"{row.name:<20} {int(row.binary):>4} {row.params:>12.2f} {row.macs:>14d} {row.ops:>16.1f}")
    lines.append(f"params_m = {params_m:.6f}")
    lines.append(f"ops_g = {ops_g:.6f}")
    path = os.path.join(out, "stats.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print(f"[Stats] params={params_m:.4f} M, OPs={ops_g:.4f} G -> {path}")


def cli_bench(cfg: RunConfig, out: str, args):
    raw = ConfigManager(args.shapes).load_config()
    if not raw:
        raise ConfigError(f"no bench shapes in {args.shapes}")
    shapes = parse_shapes(raw.get("shapes") if isinstance(raw, dict) else raw)
    apply_thread_cap(1)
    rows = run_bench(shapes, cfg.seed, args.iters, args.warmup)
    path = os.path.join(out, "bench.csv")
    MetricsService.write_csv(path, BENCH_COLUMNS, [r.as_dict() for r in rows])
    for r in rows:
        if r.status == "ok":
            print(f"[Bench] {tuple(r.shape)}: x{r.speedup:.2f} (packed {r.packed_ns:.0f} ns, naive {r.naive_ns:.0f} ns)")
        else:
            print(f"[Bench] {tuple(r.shape)}: {r.status}")
    print(f"[Bench] -> {path}")


def cli_errormap(cfg: RunConfig, out: str, args):
    net, _ = CheckpointService().load_net(args.checkpoint)
    pairs = PairService().load_pair_dir(args.pair_dir)
    counts = ErrorMapManager(net).export(pairs, out)
    if counts:
        total = sum(counts.values(), Confusion(0, 0, 0, 0))
        print(f"[ErrorMap] {len(counts)} maps, pooled F1={f1_score(total):.4f} -> {out}")
    else:
        print(f"[ErrorMap] no pairs in {args.pair_dir}")


COMMANDS = {
    "synth": lambda cfg, out, args: cli_synth(cfg, out),
    "train": cli_train,
    "eval": cli_eval,
    "infoplane": cli_infoplane,
    "stats": cli_stats,
    "bench": cli_bench,
    "errormap": cli_errormap,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(e.one_line(), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    try:
        cfg = config_from_args(args)
        if args.command != "bench":
            apply_thread_cap()
        os.makedirs(args.out, exist_ok=True)
        save_resolved(cfg, os.path.join(args.out, RESOLVED_CONFIG), train_grid(cfg, args))
        COMMANDS[args.command](cfg, args.out, args)
    except BicdError as e:
        print(e.one_line(), file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception("unexpected failure")
        msg = f"{type(e).__name__}: {e}".replace("\n", " ").replace('"', "'")
        print(f'error code=INTERNAL msg="{msg}"', file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
