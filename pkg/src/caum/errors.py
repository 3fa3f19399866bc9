__all__ = [
    'CaumError', 'DimensionError', 'IndexRangeError', 'ContractError',
    'DegenerateRowError', 'EncodeError', 'FormatError', 'ConfigError',
    'StalenessError', 'TrainingError',
]


class CaumError(Exception):
    '''
    Base class of every error this package raises. The command
    line turns it into a single `error:` line and exit code 1.
    '''
    pass


class DimensionError(CaumError, ValueError):
    '''
    Raised when operand shapes do not conform. The message names both shapes.
    '''
    def __init__(self, op, *shapes):
        listed = ' and '.join(str(tuple(s)) for s in shapes)
        super().__init__(f'{op}: incompatible shapes {listed}')
        self.op = op
        self.shapes = shapes


class IndexRangeError(CaumError, IndexError):
    '''
    Raised when an id looked up in a table is out of range. The .index
    attribute holds the offending id.
    '''
    def __init__(self, index, size):
        super().__init__(f'id {index} out of range for table with {size} rows')
        self.index = index
        self.size = size


class ContractError(CaumError):
    '''
    Raised when a precondition of an operation does not hold.
    '''
    pass


class DegenerateRowError(ContractError):
    '''
    Raised by a masked softmax when some row has no unmasked entry (a user
    without clicks, a title without tokens).
    '''
    pass


class EncodeError(ContractError):
    '''
    Raised when a single article cannot be encoded, e.g. a fully padded title.
    '''
    pass


class FormatError(CaumError):
    '''
    Raised for malformed input files: too many bad TSV lines, a container with
    a wrong magic or length, an unparsable config file.
    '''
    pass


class ConfigError(CaumError):
    '''
    Raised when a configuration violates a constraint. The message names the
    constraint.
    '''
    pass


class StalenessError(CaumError):
    '''
    Raised when a cached user precompute is used with parameters that changed
    after the cache was built.
    '''
    pass


class TrainingError(CaumError):
    '''
    Raised when training cannot continue. The .batch attribute holds the id of
    the batch that produced the failure.
    '''
    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch
