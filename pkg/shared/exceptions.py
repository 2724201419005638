class EdpcnnError(Exception):
    """Base error; exit_code is what the CLI returns for it"""
    exit_code = 1


class ConfigError(EdpcnnError):
    exit_code = 2


class DataError(EdpcnnError):
    exit_code = 3


class NumericalError(EdpcnnError):
    exit_code = 4
