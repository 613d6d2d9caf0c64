import logging
import os
from dataclasses import dataclass, field

import numpy as np

from bi_core.bi_auxobj import AuxBank
from bi_core.bi_binconv import GradTape
from bi_core.bi_model import ChangeNet, PairBatch, backward_full, forward_full
from bi_core.bi_objective import Confusion, LossWeights, confusion, evaluate_objective, f1_score
from bi_trainer.tr_optim import OptimState, Schedule, adam_step
from bi_trainer.tr_service import METRIC_COLUMNS, CheckpointService, MetricsService
from src.bi_config import RunConfig
from src.bi_errors import ContractError, NonFiniteError

logger = logging.getLogger("Trainer")

BEST_CHECKPOINT = "best.bicd"
LAST_CHECKPOINT = "last.bicd"
METRICS_FILE = "metrics.csv"
ABLATION_COLUMNS = ("seed", "beta1", "beta2", "best_epoch", "best_f1")
SUMMARY_COLUMNS = ("beta1", "beta2", "runs", "mean_best_f1", "std_best_f1")


@dataclass
class RunReport:
    seed: int
    beta1: float
    beta2: float
    init_f1: float
    best_epoch: int = -1
    best_f1: float = -1.0
    curves: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def as_row(self) -> dict:
        return {"seed": self.seed, "beta1": self.beta1, "beta2": self.beta2,
                "best_epoch": self.best_epoch, "best_f1": self.best_f1}


def iterate_batches(pairs: list, batch_size: int, order=None):
    order = range(len(pairs)) if order is None else order
    order = list(order)
    for start in range(0, len(order), batch_size):
        yield [pairs[i] for i in order[start:start + batch_size]]


def evaluate_pairs(net: ChangeNet, pairs: list, batch_size: int = 4):
    """Пиксели всего сплита сводятся в одну матрицу ошибок: (Confusion, F1)."""
    total = Confusion(0, 0, 0, 0)
    for chunk in iterate_batches(pairs, batch_size):
        batch = PairBatch.from_pairs(chunk, dtype=net.dtype)
        logits, _ = forward_full(batch, net)
        total = total + confusion(logits, batch.y)
    return total, f1_score(total)


def build_models(cfg: RunConfig, seed: int, dtype=np.float32):
    """Сеть и вспомогательные модули из одного seed; η не создаются при aux_placement = none."""
    rng = np.random.default_rng(seed)
    net = ChangeNet.create(rng, binarized=cfg.binarized, dtype=dtype, width=cfg.width)
    aux = None if cfg.aux_placement == "none" else AuxBank.for_net(net, rng, cfg.aux_placement)
    return net, aux


class TrainerManager:
    """Цикл обучения: Adam, косинусное расписание для θ, ступенчатое для η, чекпоинты и метрики."""

    def __init__(self, cfg: RunConfig, out_dir: str, checkpoints: CheckpointService | None = None,
                 metrics: MetricsService | None = None):
        self.cfg = cfg
        self.out_dir = out_dir
        self.checkpoints = checkpoints or CheckpointService()
        self.metrics = metrics or MetricsService()

    def train(self, dataset: list, net: ChangeNet, aux: AuxBank | None, w: LossWeights,
              val_pairs: list | None = None, seed: int | None = None) -> RunReport:
        cfg = self.cfg
        if not dataset:
            raise ContractError("train: empty dataset")
        seed = cfg.seed if seed is None else seed
        if not val_pairs:
            logger.warning("train: no validation pairs, val_f1 is measured on the training set")
            val_pairs = dataset
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        iters_per_epoch = -(-len(dataset) // cfg.batch_size)
        schedule = Schedule(cfg.epochs, cfg.base_lr, cfg.aux_lr, cfg.warmup_frac, iters_per_epoch)
        os.makedirs(self.out_dir, exist_ok=True)

        if cfg.calibrate:
            first = PairBatch.from_pairs(dataset[:cfg.batch_size], dtype=net.dtype)
            net.calibrate_thresholds(first.x0, first.x1)

        theta = net.params()
        eta = aux.params() if aux is not None else None
        theta_state = OptimState.for_params(theta)
        eta_state = OptimState.for_params(eta) if eta is not None else None

        _, init_f1 = evaluate_pairs(net, val_pairs, cfg.batch_size)
        report = RunReport(seed, w.beta1, w.beta2, init_f1)
        logger.info(f"seed={seed} beta1={w.beta1} beta2={w.beta2}: init F1={init_f1:.4f}")

        iteration = 0
        for epoch in range(cfg.epochs):
            lr_theta = schedule.theta_lr(epoch)
            lr_eta = schedule.eta_lr(epoch)
            sums = dict.fromkeys(("l_cd", "l2", "l_noise", "l_interest", "l_recon", "total"), 0.0)
            n_batches = 0
            for chunk in iterate_batches(dataset, cfg.batch_size, rng.permutation(len(dataset))):
                if cfg.flip_aug:
                    chunk = [p.flipped() if rng.random() < 0.5 else p for p in chunk]
                batch = PairBatch.from_pairs(chunk, dtype=net.dtype)
                tape = GradTape()
                logits, records = forward_full(batch, net, aux, tape)
                try:
                    losses, grad_logits, grad_z = evaluate_objective(logits, records, batch, w)
                except NonFiniteError as e:
                    logger.error(f"epoch {epoch} iteration {iteration}: {e.message}")
                    raise NonFiniteError(f"epoch {epoch} iteration {iteration}: {e.message}")
                grads = backward_full(grad_logits, net, aux, tape, grad_z)

                warm = schedule.warmup_factor(iteration)
                adam_step(theta, {k: v for k, v in grads.items() if k in theta}, theta_state, lr_theta * warm)
                if eta is not None:
                    adam_step(eta, {k: v for k, v in grads.items() if k in eta}, eta_state, lr_eta * warm)

                for key in sums:
                    sums[key] += getattr(losses, key)
                n_batches += 1
                iteration += 1

            conf, val_f1 = evaluate_pairs(net, val_pairs, cfg.batch_size)
            row = {"epoch": epoch, "lr": lr_theta, **{k: v / n_batches for k, v in sums.items()},
                   "val_f1": val_f1}
            report.curves.append(row)
            logger.info(f"epoch {epoch}: total={row['total']:.5f} l_cd={row['l_cd']:.5f} "
                        f"val_f1={val_f1:.4f} lr={lr_theta:.2e} aux_lr={lr_eta:.2e}")

            meta = {"epoch": epoch, "iteration": iteration, "seed": seed, "f1": float(val_f1)}
            if val_f1 > report.best_f1:
                report.best_f1 = val_f1
                report.best_epoch = epoch
                self.checkpoints.save_net(os.path.join(self.out_dir, BEST_CHECKPOINT), net, **meta)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                path = os.path.join(self.out_dir, f"ckpt_epoch_{epoch:04d}.bicd")
                self.checkpoints.save_net(path, net, **meta)
                report.checkpoints.append(path)

        self.checkpoints.save_net(os.path.join(self.out_dir, LAST_CHECKPOINT), net,
                                  epoch=cfg.epochs - 1, iteration=iteration, seed=seed,
                                  f1=float(report.curves[-1]["val_f1"]))
        self.metrics.write_csv(os.path.join(self.out_dir, METRICS_FILE), METRIC_COLUMNS, report.curves)
        logger.info(f"seed={seed}: best F1={report.best_f1:.4f} at epoch {report.best_epoch}")
        return report

    def run_ablation(self, dataset: list, val_pairs: list, seeds, beta1s, beta2s) -> list:
        """
        Сетка (seed × β₁ × β₂). Каждая комбинация обучается с нуля в своём подкаталоге;
        пишутся ablation.csv и ablation_summary.csv (средние по seed).
        """
        reports = []
        root = self.out_dir
        for beta1 in beta1s:
            for beta2 in beta2s:
                for seed in seeds:
                    run_dir = os.path.join(root, f"b1_{beta1:g}_b2_{beta2:g}_seed_{seed}")
                    net, aux = build_models(self.cfg, seed)
                    runner = TrainerManager(self.cfg, run_dir, self.checkpoints, self.metrics)
                    reports.append(runner.train(dataset, net, aux, LossWeights(beta1=beta1, beta2=beta2),
                                                val_pairs, seed))
        self.metrics.write_csv(os.path.join(root, "ablation.csv"), ABLATION_COLUMNS,
                               [r.as_row() for r in reports])
        self.metrics.write_csv(os.path.join(root, "ablation_summary.csv"), SUMMARY_COLUMNS,
                               summarize_ablation(reports))
        return reports


def summarize_ablation(reports: list) -> list:
    groups = {}
    for r in reports:
        groups.setdefault((r.beta1, r.beta2), []).append(r.best_f1)
    rows = []
    for (beta1, beta2), values in groups.items():
        arr = np.asarray(values, dtype=np.float64)
        rows.append({"beta1": beta1, "beta2": beta2, "runs": len(values),
                     "mean_best_f1": float(arr.mean()), "std_best_f1": float(arr.std())})
    return rows
