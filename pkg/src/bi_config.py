import logging
import os

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.bi_errors import ConfigError
from src.manager_save_load import ConfigManager

logger = logging.getLogger("RunConfig")

PLACEMENTS = ("none", "backbone", "generator", "both")
PROBES = ("gen1", "gen2", "fused", "aspp")


class RunConfig(BaseModel):
    """Итоговая конфигурация запуска: значения по умолчанию < файл конфигурации < флаги CLI."""
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0)
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=4, ge=1)
    beta1: float = Field(default=1e-3, ge=0)
    beta2: float = Field(default=0.08, ge=0)
    image_size: int = Field(default=64, ge=8)
    n_pairs: int = Field(default=200, ge=0)
    val_pairs: int = Field(default=50, ge=0)
    train_dir: str = ""
    val_dir: str = ""
    probe_layer: str = "gen2"
    base_lr: float = Field(default=5e-4, ge=0)
    aux_lr: float = Field(default=5e-3, ge=0)
    warmup_frac: float = Field(default=0.05, ge=0, lt=1)
    aux_placement: str = "both"
    binarized: bool = True
    calibrate: bool = True
    flip_aug: bool = True
    width: int = Field(default=16, ge=1)
    n_bins: int = Field(default=30, ge=2)
    checkpoint_every: int = Field(default=0, ge=0)

    @field_validator("aux_placement")
    @classmethod
    def _placement(cls, value: str) -> str:
        if value not in PLACEMENTS:
            raise ValueError(f"must be one of {PLACEMENTS}")
        return value

    @field_validator("probe_layer")
    @classmethod
    def _probe(cls, value: str) -> str:
        if value not in PROBES:
            raise ValueError(f"must be one of {PROBES}")
        return value

    @field_validator("image_size")
    @classmethod
    def _multiple_of_four(cls, value: int) -> int:
        if value % 4:
            raise ValueError("must be a multiple of 4")
        return value


def _validation_message(err: ValidationError) -> str:
    parts = []
    for item in err.errors():
        where = ".".join(str(p) for p in item["loc"]) or "<config>"
        if item["type"] == "extra_forbidden":
            parts.append(f"unknown key {where!r}")
        else:
            parts.append(f"{where}: {item['msg']}")
    return "; ".join(parts)


def resolve_config(config_path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """
    Собирает RunConfig: файл `key = value` (или .json), поверх - непустые переопределения из CLI.
    Неизвестный ключ или недопустимое значение - ConfigError.
    """
    data = {}
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        data.update(ConfigManager(config_path).load_config())
        # resolved_config.json команды train несёт ещё и сетку
        data.pop("grid", None)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(_validation_message(e))


def save_resolved(cfg: RunConfig, path: str, grid: dict | None = None):
    """Итоговый конфиг; grid - полная сетка seed × β команды train."""
    data = cfg.model_dump()
    if grid is not None:
        data["grid"] = grid
    ok, msg = ConfigManager(path).save_config(data)
    if not ok:
        raise ConfigError(msg)
    logger.info(f"Resolved config written to {path}")
