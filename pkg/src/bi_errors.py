class BicdError(Exception):
    """
    Базовая ошибка проекта.
    code - короткий машинный код, который CLI печатает в строке ошибки.
    """
    code = "BICD"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        """Однострочное машинно-читаемое представление (для stderr)."""
        msg = self.message.replace("\n", " ").replace('"', "'")
        return f'error code={self.code} msg="{msg}"'


class ContractError(BicdError):
    """Нарушение контракта операции (формы, длины, предусловия)."""
    code = "CONTRACT"


class ConfigError(BicdError):
    """Неизвестный ключ или недопустимое значение конфигурации."""
    code = "CONFIG"


class DataError(BicdError):
    """Ошибка генерации или загрузки данных (путь/стем/индекс пары в сообщении)."""
    code = "DATA"


class CheckpointError(BicdError):
    """Повреждённый или несовместимый чекпоинт (magic, версия, CRC)."""
    code = "CHECKPOINT"


class NonFiniteError(BicdError):
    """NaN/inf во входе или в одном из слагаемых лосса."""
    code = "NONFINITE"
