import csv
import logging
import os
import struct
import zlib

import numpy as np

from bi_core.bi_model import ChangeNet
from src.bi_errors import CheckpointError

logger = logging.getLogger("TrainerService")

MAGIC = b"BICD"
FORMAT_VERSION = 1
META_PREFIX = "meta/"

# тег типа -> dtype (little-endian)
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}

METRIC_COLUMNS = ("epoch", "lr", "l_cd", "l2", "l_noise", "l_interest", "l_recon", "total", "val_f1")


def _tag_for(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("=")
    for tag, known in DTYPE_TAGS.items():
        if dt == known.newbyteorder("="):
            return tag
    raise CheckpointError(f"unsupported dtype {arr.dtype} for checkpoint")


class CheckpointService:
    """
    Бинарный формат чекпоинта:
    "BICD" | u32 версия | u32 число записей | записи | u32 CRC-32 всего предшествующего.
    Запись: u32 длина имени | имя UTF-8 | u8 тег типа | u8 ранг | u64 × ранг | сырые LE данные.
    """

    @staticmethod
    def encode(records: dict) -> bytes:
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(records))]
        for name, value in records.items():
            arr = np.asarray(value)
            tag = _tag_for(arr)
            raw_name = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw_name)))
            parts.append(raw_name)
            parts.append(struct.pack("<BB", tag, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
        payload = b"".join(parts)
        return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)

    @staticmethod
    def decode(blob: bytes, source: str = "<checkpoint>") -> dict:
        if len(blob) < len(MAGIC) + 12:
            raise CheckpointError(f"{source}: truncated checkpoint")
        payload, crc_raw = blob[:-4], blob[-4:]
        if payload[:4] != MAGIC:
            raise CheckpointError(f"{source}: bad magic {payload[:4]!r}")
        (crc,) = struct.unpack("<I", crc_raw)
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CheckpointError(f"{source}: CRC mismatch")
        version, count = struct.unpack_from("<II", payload, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{source}: unsupported format version {version}")

        pos = 12
        records = {}
        try:
            for _ in range(count):
                (name_len,) = struct.unpack_from("<I", payload, pos)
                pos += 4
                name = payload[pos:pos + name_len].decode("utf-8")
                pos += name_len
                tag, rank = struct.unpack_from("<BB", payload, pos)
                pos += 2
                if tag not in DTYPE_TAGS:
                    raise CheckpointError(f"{source}: unknown dtype tag {tag} in {name!r}")
                dims = struct.unpack_from(f"<{rank}Q", payload, pos)
                pos += 8 * rank
                dtype = DTYPE_TAGS[tag]
                nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
                if pos + nbytes > len(payload):
                    raise CheckpointError(f"{source}: record {name!r} runs past end of file")
                arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
                records[name] = arr.reshape(dims).astype(dtype.newbyteorder("="))
                pos += nbytes
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"{source}: malformed record table ({e})")
        if pos != len(payload):
            raise CheckpointError(f"{source}: {len(payload) - pos} trailing bytes after record table")
        return records

    def save(self, path: str, records: dict):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as f:
            f.write(self.encode(records))
        logger.info(f"Checkpoint saved: {path} ({len(records)} records)")

    def load(self, path: str) -> dict:
        if not os.path.exists(path):
            raise CheckpointError(f"missing checkpoint file {path}")
        with open(path, "rb") as f:
            return self.decode(f.read(), path)

    # --- Сеть <-> записи ---

    @staticmethod
    def net_records(net: ChangeNet, meta: dict) -> dict:
        records = {}
        for name, value in meta.items():
            if name in ("width", "binarized"):
                continue
            if isinstance(value, float):
                records[META_PREFIX + name] = np.array([value], dtype=np.float64)
            else:
                records[META_PREFIX + name] = np.array([int(value)], dtype=np.int64)
        records[META_PREFIX + "width"] = np.array([net.stem.spec.out_channels], dtype=np.int64)
        records[META_PREFIX + "binarized"] = np.array([int(net.binarized)], dtype=np.uint8)
        for name, value in net.params().items():
            records[name] = value
        return records

    def save_net(self, path: str, net: ChangeNet, **meta):
        self.save(path, self.net_records(net, meta))

    def load_net(self, path: str):
        """-> (ChangeNet, meta dict)."""
        records = self.load(path)
        meta = {k[len(META_PREFIX):]: v.reshape(-1)[0].item() for k, v in records.items()
                if k.startswith(META_PREFIX)}
        if "width" not in meta:
            raise CheckpointError(f"{path}: no meta/width record")
        tensors = {k: v for k, v in records.items() if not k.startswith(META_PREFIX)}
        dtype = next(iter(tensors.values())).dtype if tensors else np.float32
        net = ChangeNet.create(np.random.default_rng(0), binarized=bool(meta.get("binarized", 1)),
                               dtype=dtype, width=int(meta["width"]))
        params = net.params()
        missing = [n for n in params if n not in tensors]
        extra = [n for n in tensors if n not in params]
        if missing or extra:
            raise CheckpointError(f"{path}: parameter table mismatch (missing {missing[:3]}, extra {extra[:3]})")
        for name, target in params.items():
            if tensors[name].shape != target.shape:
                raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {target.shape}")
            target[...] = tensors[name]
        return net, meta


class MetricsService:
    """CSV-вывод метрик и таблиц абляции."""

    @staticmethod
    def write_csv(path: str, columns, rows: list):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(v) for k, v in row.items()})

    @staticmethod
    def read_csv(path: str) -> list:
        with open(path, "r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value
