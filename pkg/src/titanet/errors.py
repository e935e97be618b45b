"""Exception types shared across the package."""


class TitaNetError(Exception):
    pass


class ConfigError(TitaNetError, ValueError):
    pass


class ShapeError(TitaNetError, ValueError):
    pass


class ParseError(TitaNetError, ValueError):
    pass


class UnsupportedFormatError(TitaNetError, ValueError):
    pass


class CheckpointError(TitaNetError):
    pass


class TrainingDiverged(TitaNetError, RuntimeError):
    pass
