import logging
import os

import numpy as np

from bi_data.bd_synth_manager import ChangePair
from src.bi_errors import DataError

logger = logging.getLogger("PairService")

MAXVAL = 255
MASK_THRESHOLD = 128
SUBDIRS = ("t0", "t1", "mask")


class PairService:
    """Уровень I/O для пар изображений: NetPBM (P5/P6, maxval 255) и раскладка t0/t1/mask."""

    # --- NetPBM ---

    @staticmethod
    def read_netpbm(path: str) -> np.ndarray:
        """P6 -> uint8 H×W×3, P5 -> uint8 H×W. Ошибки заголовка - DataError с путём."""
        try:
            with open(path, "rb") as f:
                data = f.read()
        except OSError as e:
            raise DataError(f"{path}: {e}")

        pos = 0
        tokens = []
        while len(tokens) < 4:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if pos < len(data) and data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
                pos += 1
            if start == pos:
                raise DataError(f"{path}: truncated NetPBM header")
            tokens.append(data[start:pos])
        # ровно один пробельный символ перед растром
        if pos >= len(data) or not data[pos:pos + 1].isspace():
            raise DataError(f"{path}: malformed NetPBM header")
        pos += 1

        magic = tokens[0]
        if magic not in (b"P5", b"P6"):
            raise DataError(f"{path}: unsupported NetPBM magic {magic!r}")
        try:
            width, height, maxval = (int(t) for t in tokens[1:])
        except ValueError:
            raise DataError(f"{path}: non-numeric NetPBM header field")
        if width < 1 or height < 1:
            raise DataError(f"{path}: bad dimensions {width}x{height}")
        if maxval != MAXVAL:
            raise DataError(f"{path}: maxval {maxval} unsupported, expected {MAXVAL}")

        channels = 3 if magic == b"P6" else 1
        expected = width * height * channels
        raster = data[pos:pos + expected]
        if len(raster) != expected:
            raise DataError(f"{path}: raster has {len(raster)} bytes, expected {expected}")
        img = np.frombuffer(raster, dtype=np.uint8)
        if channels == 3:
            return img.reshape(height, width, 3).copy()
        return img.reshape(height, width).copy()

    @staticmethod
    def write_ppm(path: str, rgb: np.ndarray):
        rgb = np.asarray(rgb, dtype=np.uint8)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DataError(f"{path}: PPM expects H x W x 3, got {rgb.shape}")
        PairService._write(path, b"P6", rgb)

    @staticmethod
    def write_pgm(path: str, gray: np.ndarray):
        gray = np.asarray(gray, dtype=np.uint8)
        if gray.ndim != 2:
            raise DataError(f"{path}: PGM expects H x W, got {gray.shape}")
        PairService._write(path, b"P5", gray)

    @staticmethod
    def _write(path: str, magic: bytes, img: np.ndarray):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        header = b"%s\n%d %d\n%d\n" % (magic, img.shape[1], img.shape[0], MAXVAL)
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(img).tobytes())

    # --- Конверсия тензоров ---

    @staticmethod
    def to_bytes(x: np.ndarray) -> np.ndarray:
        """C×H×W в [0,1] -> uint8 H×W×C (или H×W для одного канала)."""
        q = np.rint(np.clip(x, 0.0, 1.0) * MAXVAL).astype(np.uint8)
        q = q.transpose(1, 2, 0)
        return q[:, :, 0] if q.shape[2] == 1 else q

    @staticmethod
    def from_bytes(img: np.ndarray, dtype=np.float32) -> np.ndarray:
        if img.ndim == 2:
            img = img[:, :, None]
        return (img.transpose(2, 0, 1).astype(dtype) / MAXVAL).astype(dtype)

    # --- Каталог пар ---

    @staticmethod
    def _stems(directory: str, ext: str) -> dict:
        if not os.path.isdir(directory):
            raise DataError(f"missing directory {directory}")
        out = {}
        for name in os.listdir(directory):
            stem, e = os.path.splitext(name)
            if e.lower() == ext:
                out[stem] = os.path.join(directory, name)
        return out

    def load_pair_dir(self, path: str) -> list:
        """<root>/{t0,t1,mask}/<stem>.{ppm,pgm} -> список ChangePair, отсортированный по стему."""
        t0 = self._stems(os.path.join(path, "t0"), ".ppm")
        t1 = self._stems(os.path.join(path, "t1"), ".ppm")
        masks = self._stems(os.path.join(path, "mask"), ".pgm")
        for stem in sorted(set(t0) | set(t1) | set(masks)):
            for label, table in (("t0", t0), ("t1", t1), ("mask", masks)):
                if stem not in table:
                    raise DataError(f"{path}: stem {stem!r} has no counterpart in {label}/")

        pairs = []
        for stem in sorted(t0):
            img0 = self.read_netpbm(t0[stem])
            img1 = self.read_netpbm(t1[stem])
            mask = self.read_netpbm(masks[stem])
            if img0.ndim != 3 or img1.ndim != 3:
                raise DataError(f"{t0[stem] if img0.ndim != 3 else t1[stem]}: expected a colour PPM")
            if mask.ndim != 2:
                raise DataError(f"{masks[stem]}: expected a greyscale PGM")
            if img0.shape != img1.shape:
                raise DataError(f"{t1[stem]}: size {img1.shape[:2]} differs from t0 {img0.shape[:2]}")
            if mask.shape != img0.shape[:2]:
                raise DataError(f"{masks[stem]}: size {mask.shape} differs from images {img0.shape[:2]}")
            y = (mask >= MASK_THRESHOLD).astype(np.float32)[None]
            pairs.append(ChangePair(self.from_bytes(img0), self.from_bytes(img1), y, stem))
        logger.info(f"Loaded {len(pairs)} pairs from {path}")
        return pairs

    def save_pair_dir(self, path: str, pairs: list):
        for i, pair in enumerate(pairs):
            stem = pair.stem or f"pair_{i:05d}"
            self.write_ppm(os.path.join(path, "t0", f"{stem}.ppm"), self.to_bytes(pair.x0))
            self.write_ppm(os.path.join(path, "t1", f"{stem}.ppm"), self.to_bytes(pair.x1))
            self.write_pgm(os.path.join(path, "mask", f"{stem}.pgm"), (pair.y[0] > 0.5).astype(np.uint8) * MAXVAL)
        for sub in SUBDIRS:
            os.makedirs(os.path.join(path, sub), exist_ok=True)
        logger.info(f"Saved {len(pairs)} pairs to {path}")
