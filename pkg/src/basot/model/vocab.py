"""Token table shared by every output head.

Fixed reserved prefix: 0 "<blank>" (CTC), 1 "<eos>", 2 "<sc>", 3 "<sep>";
content symbols follow in sorted order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from ..errors import InvalidArgumentError
from ..transcripts import BLANK, EOS, RESERVED_TOKENS, SC, SEP

RESERVED_ORDER = (BLANK, EOS, SC, SEP)


@dataclass(frozen=True)
class Vocab:
    tokens: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.tokens[: len(RESERVED_ORDER)] != RESERVED_ORDER:
            raise InvalidArgumentError(f"vocab must start with {RESERVED_ORDER}")
        if len(set(self.tokens)) != len(self.tokens):
            raise InvalidArgumentError("duplicate vocab tokens")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_symbols(cls, symbols: Iterable[str]) -> "Vocab":
        extra = sorted(set(symbols) - set(RESERVED_TOKENS))
        return cls(RESERVED_ORDER + tuple(extra))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def blank_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def sc_id(self) -> int:
        return 2

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise InvalidArgumentError(f"token {token!r} not in vocab") from None

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        return np.asarray([self.id(t) for t in texts], dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> List[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise InvalidArgumentError(f"id {i} out of vocab range")
            out.append(self.tokens[int(i)])
        return out
