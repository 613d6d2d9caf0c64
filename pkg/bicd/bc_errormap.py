import logging
import os

import numpy as np

from bi_core.bi_model import ChangeNet, PairBatch
from bi_core.bi_objective import Confusion, confusion
from bi_data.bd_pair_service import PairService

logger = logging.getLogger("ErrorMap")

# TP - белый, FP - красный, FN - синий, TN - чёрный
COLORS = {
    "tp": (255, 255, 255),
    "fp": (255, 0, 0),
    "fn": (0, 0, 255),
    "tn": (0, 0, 0),
}


def error_map(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Логиты и маска 1×H×W -> RGB uint8 H×W×3."""
    pred = logits[0] > 0
    truth = y[0] == 1
    rgb = np.zeros(pred.shape + (3,), dtype=np.uint8)
    rgb[pred & truth] = COLORS["tp"]
    rgb[pred & ~truth] = COLORS["fp"]
    rgb[~pred & truth] = COLORS["fn"]
    return rgb


def color_counts(rgb: np.ndarray) -> Confusion:
    """Обратный подсчёт классов пикселей по цветам карты."""
    counts = {k: int(np.all(rgb == np.array(c, dtype=np.uint8), axis=-1).sum()) for k, c in COLORS.items()}
    return Confusion(counts["tp"], counts["fp"], counts["fn"], counts["tn"])


class ErrorMapManager:
    """Карты ошибок по каталогу пар: одна PPM на пару."""

    def __init__(self, net: ChangeNet, service: PairService | None = None):
        self.net = net
        self.service = service or PairService()

    def export(self, pairs: list, out_dir: str) -> dict:
        """Пишет <out_dir>/<stem>.ppm, возвращает stem -> Confusion."""
        os.makedirs(out_dir, exist_ok=True)
        result = {}
        for i, pair in enumerate(pairs):
            batch = PairBatch.from_pairs([pair], dtype=self.net.dtype)
            logits = self.net.predict(batch.x0, batch.x1)
            stem = pair.stem or f"pair_{i:05d}"
            rgb = error_map(logits[0], batch.y[0])
            self.service.write_ppm(os.path.join(out_dir, f"{stem}.ppm"), rgb)
            result[stem] = confusion(logits, batch.y)
        logger.info(f"Wrote {len(result)} error maps to {out_dir}")
        return result
