import json
import os
import logging

from src.bi_errors import ConfigError

logger = logging.getLogger("ConfigManager")


class ConfigManager:
    """
    Универсальный класс для сохранения и загрузки конфигурации.
    Читает построчный формат `key = value` (UTF-8, `#` - комментарий)
    и JSON (по расширению .json). Сохраняет всегда в JSON - это
    снимок итоговой (resolved) конфигурации рядом с результатами запуска.
    """
    def __init__(self, file_path):
        self.file_path = file_path

    def save_config(self, data: dict):
        """
        Сохраняет словарь data в JSON файл.
        Автоматически создает директорию, если она не существует.
        """
        try:
            directory = os.path.dirname(self.file_path)
            if directory and not os.path.exists(directory):
                os.makedirs(directory)

            with open(self.file_path, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=4, ensure_ascii=False, sort_keys=True)
                f.write("\n")
            return True, "Config saved successfully"
        except Exception as e:
            return False, f"Error saving config: {e}"

    def load_config(self) -> dict:
        """
        Загружает данные из файла.
        Возвращает словарь (значения `key = value` - строки) или пустой словарь, если файла нет.
        Битая строка - ConfigError с номером строки.
        """
        if not os.path.exists(self.file_path):
            return {}

        if self.file_path.endswith(".json"):
            try:
                with open(self.file_path, 'r', encoding='utf-8') as f:
                    return json.load(f)
            except (json.JSONDecodeError, OSError) as e:
                raise ConfigError(f"{self.file_path}: {e}")

        try:
            with open(self.file_path, 'r', encoding='utf-8') as f:
                lines = f.readlines()
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"{self.file_path}: {e}")
        return self.parse_lines(lines, source=self.file_path)

    @staticmethod
    def parse_lines(lines, source="<config>") -> dict:
        """Разбор строк `key = value`. Повтор ключа - ошибка."""
        data = {}
        for number, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{number}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            # хвостовой комментарий
            value = value.split("#", 1)[0].strip()
            if not key:
                raise ConfigError(f"{source}:{number}: empty key")
            if key in data:
                raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
            data[key] = value
        logger.debug(f"Parsed {len(data)} keys from {source}")
        return data
