class RankPruneError(Exception):
    """
    Base class for every error raised by rankprune. The category and exit code are what the
    command line reports.
    """
    category = 'error'
    exit_code = 1


class InputError(RankPruneError):
    category = 'io'
    exit_code = 3


class ParseError(RankPruneError, ValueError):
    category = 'parse'
    exit_code = 4

    def __init__(self, message: str, line_number: int = None, source: str = None):
        self.line_number = line_number
        self.source = source
        where = ''
        if source is not None:
            where += f'{source}:'
        if line_number is not None:
            where += f'{line_number}:'
        super().__init__(f'{where} {message}' if where else message)


class ConfigurationError(RankPruneError, ValueError):
    category = 'config'
    exit_code = 5


class CalibrationError(RankPruneError, ValueError):
    category = 'domain'
    exit_code = 6
