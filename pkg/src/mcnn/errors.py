"""Exception hierarchy shared across the package."""


class McnnError(Exception):
    """Base class for all package errors."""


class DimensionError(McnnError, ValueError):
    pass


class ContractError(McnnError, ValueError):
    pass


class LabelError(McnnError, ValueError):
    pass


class VocabError(McnnError, ValueError):
    pass


class ConfigError(McnnError, ValueError):
    pass


class SequenceTooShortError(McnnError, ValueError):
    def __init__(self, length: int, n: int):
        super().__init__(f"sequence of length {length} is shorter than window {n}")
        self.length = length
        self.n = n


class EmptySequenceError(McnnError, ValueError):
    pass


class AlphabetError(McnnError, ValueError):
    def __init__(self, char: str, offset: int):
        super().__init__(f"illegal residue {char!r} at offset {offset}")
        self.char = char
        self.offset = offset


class ParseError(McnnError, ValueError):
    def __init__(self, message: str, path: str = "<string>", line: int = 0):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class CheckpointError(McnnError):
    pass


class UndefinedMetricError(McnnError, ValueError):
    pass
