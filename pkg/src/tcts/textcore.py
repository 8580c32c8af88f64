"""Tokenization, vocabularies, n-grams and longest common subsequences."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

from .errors import EmptyText

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace.

    >>> tokenize("A small dog.")
    ['a', 'small', 'dog']
    """
    cleaned = "".join(
        ch for ch in text.lower() if not unicodedata.category(ch).startswith("P")
    )
    tokens = cleaned.split()
    if not tokens:
        raise EmptyText(f"no tokens left after cleaning {text!r}")
    return tokens


@dataclass(frozen=True)
class Vocab:
    """Token/id bijection. Ids 0..3 are PAD, BOS, EOS, UNK."""

    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.id_to_token[:4] != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the four special tokens")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocab")
        object.__setattr__(self, "token_to_id", mapping)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id and self.token_to_id[token] > UNK

    @property
    def words(self) -> tuple[str, ...]:
        return self.id_to_token[4:]

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 5) -> Vocab:
    """Keep tokens seen at least ``min_count`` times.

    Order is descending frequency, ties broken lexicographically.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(tok for seq in corpus for tok in seq)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count and tok not in SPECIAL_TOKENS),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocab(SPECIAL_TOKENS + tuple(kept))


@dataclass(frozen=True)
class Caption:
    """``BOS w_1 .. w_T EOS`` as token ids.

    ``truncated`` is set when the source was longer than the length limit.
    """

    ids: tuple[int, ...]
    truncated: bool = False

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if len(ids) < 3 or ids[0] != BOS or ids[-1] != EOS:
            raise ValueError(f"malformed caption {ids}: need BOS, >=1 word, EOS")
        if EOS in ids[1:-1] or BOS in ids[1:]:
            raise ValueError(f"malformed caption {ids}: sentinel inside the interior")

    @classmethod
    def from_interior(cls, interior: Iterable[int], truncated: bool = False) -> "Caption":
        return cls((BOS, *interior, EOS), truncated)

    @property
    def interior(self) -> tuple[int, ...]:
        return self.ids[1:-1]

    @property
    def length(self) -> int:
        return len(self.ids) - 2

    def __len__(self) -> int:
        return self.length

    @property
    def targets(self) -> tuple[int, ...]:
        """Next-token targets for teacher forcing: the words then EOS."""
        return self.ids[1:]


def encode(tokens: Sequence[str], vocab: Vocab, max_len: int | None = None) -> Caption:
    if not tokens:
        raise EmptyText("cannot encode an empty token sequence")
    ids = [vocab.id(tok) for tok in tokens]
    truncated = max_len is not None and len(ids) > max_len
    if truncated:
        ids = ids[:max_len]
    return Caption.from_interior(ids, truncated)


def decode(caption: Caption | Sequence[int], vocab: Vocab) -> list[str]:
    ids = caption.interior if isinstance(caption, Caption) else caption
    return [vocab.token(i) for i in ids if i not in (PAD, BOS, EOS)]


def _interior(seq) -> tuple:
    if isinstance(seq, Caption):
        return seq.interior
    return tuple(seq)


def ngrams(seq, n: int) -> Counter:
    """Multiset of contiguous ``n``-grams (as tuples) of a caption interior."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    items = _interior(seq)
    return Counter(tuple(items[i : i + n]) for i in range(len(items) - n + 1))


def lcs_table(a: Sequence[Hashable], b: Sequence[Hashable]) -> list[list[int]]:
    """DP table; ``table[i][j]`` is the LCS length of ``a[:i]`` and ``b[:j]``."""
    rows = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        ai = a[i - 1]
        prev, cur = rows[i - 1], rows[i]
        for j in range(1, len(b) + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = prev[j] if prev[j] >= cur[j - 1] else cur[j - 1]
    return rows


def lcs_length(a, b) -> int:
    a, b = _interior(a), _interior(b)
    return lcs_table(a, b)[len(a)][len(b)]


@dataclass(frozen=True)
class LcsPartition:
    """Split of a student caption into words inside / outside one LCS."""

    in_lcs: tuple[bool, ...]

    @property
    def n(self) -> int:
        return sum(self.in_lcs)

    @property
    def m(self) -> int:
        return len(self.in_lcs) - self.n

    def __len__(self) -> int:
        return len(self.in_lcs)

    def with_eos(self) -> "LcsPartition":
        """Extend by the EOS position, which always counts as matched."""
        return LcsPartition(self.in_lcs + (True,))


def lcs_partition(student, teacher) -> LcsPartition:
    """Mark one maximal common subsequence on the student's words.

    Sentinels are excluded. The backtrace starts at the bottom-right corner,
    takes the diagonal whenever the symbols match, and otherwise steps along
    the student axis unless that loses length.
    """
    s, t = _interior(student), _interior(teacher)
    table = lcs_table(s, t)
    mask = [False] * len(s)
    i, j = len(s), len(t)
    while i > 0 and j > 0:
        if s[i - 1] == t[j - 1]:
            mask[i - 1] = True
            i -= 1
            j -= 1
        elif table[i - 1][j] >= table[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return LcsPartition(tuple(mask))
