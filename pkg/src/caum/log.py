import logging
import os
import sys


LEVELS = {
    'debug': logging.DEBUG,
    'info': logging.INFO,
    'warn': logging.WARNING,
    'warning': logging.WARNING,
}

FORMAT = '%(levelname)s: %(message)s'


def configure_logging(level=None, stream=None):
    '''
    Install the package's stderr handler. The level comes from the argument,
    else from the CAUM_LOG environment variable, else `warn`.
    '''
    name = (level or os.environ.get('CAUM_LOG') or 'warn').lower()
    if name not in LEVELS:
        name = 'warn'

    root = logging.getLogger('caum')
    for handler in list(root.handlers):
        root.removeHandler(handler)

    handler = logging.StreamHandler(stream if stream is not None else sys.stderr)
    handler.setFormatter(logging.Formatter(FORMAT))
    root.addHandler(handler)
    root.setLevel(LEVELS[name])
    root.propagate = False
    return root
