import os
import logging

logger = logging.getLogger("Utils")

THREADS_ENV = "BICD_THREADS"


def get_base_path():
    """Возвращает путь к корню проекта."""
    return os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def get_config_path(name: str) -> str:
    """Путь к файлу из папки configs/."""
    return os.path.join(get_base_path(), "configs", name)


def read_thread_cap(default: int | None = None) -> int | None:
    """
    Читает лимит потоков из BICD_THREADS.
    Возвращает None, если переменная не задана (numba решает сама).
    """
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"Ignoring {THREADS_ENV}={raw!r}: not an integer")
        return default
    return max(1, value)


def apply_thread_cap(threads: int | None = None) -> int:
    """
    Ограничивает число рабочих потоков numba.
    :param threads: явный лимит (например 1 для бенчмарка); иначе берётся BICD_THREADS
    :return: фактическое число потоков
    """
    import numba

    cap = threads if threads is not None else read_thread_cap()
    if cap is None:
        return numba.get_num_threads()
    cap = min(cap, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(cap)
    logger.info(f"numba threads capped to {cap}")
    return cap
