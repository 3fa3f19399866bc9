# type: ignore

from typing import List, Tuple

from sly import Parser

from .errors import FormatError
from .lexer import ConfigLexer


class ConfigParser(Parser):
    '''
    Grammar of run-configuration files: one `key = value` per line, blank
    lines and `#` comments allowed. Produces (key, value, line) triples.
    '''
    tokens = ConfigLexer.tokens

    start = 'config'

    @_('entries')
    def config(self, p):
        return p[0]

    @_('entries entry')
    def entries(self, p):
        return p[0] if p[1] is None else [*p[0], p[1]]

    @_('')
    def entries(self, _):
        return []

    @_('WORD EQ value NEWLINE')
    def entry(self, p):
        return (p[0], p[2], p.lineno)

    @_('NEWLINE')
    def entry(self, _):
        return None

    @_('value WORD')
    def value(self, p):
        return f'{p[0]} {p[1]}'

    @_('value EQ WORD')
    def value(self, p):
        return f'{p[0]}={p[2]}'

    @_('WORD')
    def value(self, p):
        return p[0]

    def error(self, token):
        if token is None:
            raise FormatError('config: unexpected end of file')
        raise FormatError(f'config: line {token.lineno}: unexpected {token.value!r}')


def parse_config_text(text: str) -> List[Tuple[str, str, int]]:
    lexer = ConfigLexer()
    parser = ConfigParser()
    return parser.parse(lexer.tokenize(text + '\n')) or []
