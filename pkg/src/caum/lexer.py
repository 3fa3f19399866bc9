import logging
from typing import List

from sly import Lexer


logger = logging.getLogger(__name__)


class TitleLexer(Lexer):
    '''
    Splits a news title into words, numbers and single punctuation marks.
    Letters are matched across scripts; anything unmatched is dropped.
    '''
    tokens = {
        'WORD',
        'NUMBER',
        'PUNCT',
    }

    ignore = ' \t\r\n'

    WORD = r"[^\W\d_]+(?:'[^\W\d_]+)*"
    NUMBER = r'\d+(?:[.,]\d+)*'
    PUNCT = r'[^\w\s]'

    def error(self, t):
        logger.debug('title lexer: dropped %r at column %d', t.value[0], self.index)
        self.index += 1


def tokenize_title(title: str) -> List[str]:
    '''Case-folded title tokens; punctuation marks are kept as their own tokens.'''
    # one lexer per call: sly keeps the scan position on the instance
    return [token.value.lower() for token in TitleLexer().tokenize(title)]


class ConfigLexer(Lexer):
    tokens = {
        'WORD',
        'EQ',
        'NEWLINE',
    }

    ignore = ' \t\r'
    ignore_comment = r'\#[^\n]*'

    WORD = r'[^\s=#]+'
    EQ = r'='

    @_(r'\n+')  # type: ignore
    def NEWLINE(self, t):
        self.lineno += len(t.value)
        return t

    def error(self, t):
        self.index += 1
