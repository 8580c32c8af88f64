import itertools

import pytest


def all_subsequences(seq):
    """Every subsequence of ``seq`` as a tuple (exponential; tiny inputs only)."""
    out = set()
    for r in range(len(seq) + 1):
        for idx in itertools.combinations(range(len(seq)), r):
            out.add(tuple(seq[i] for i in idx))
    return out


def brute_lcs(a, b) -> int:
    """LCS length by exhaustive enumeration of the shorter side's subsequences."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    best = 0
    for sub in all_subsequences(short):
        if len(sub) > best and is_subsequence(sub, long_):
            best = len(sub)
    return best


def is_subsequence(sub, seq) -> bool:
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)


def tiny_params(uses_attributes, seed=0, hidden=8, vocab_size=20, visual_size=10):
    import numpy as np

    from tcts.model import init_params

    return init_params(hidden, vocab_size, visual_size, 4, uses_attributes,
                       np.random.default_rng(seed))


def tiny_batch(seed=0, B=3, vocab_size=20, visual_size=10, with_attributes=True):
    """Random padded scenes; row b has b % 3 + 1 objects and 2 + b % 2 attributes."""
    import numpy as np

    from tcts.model import SceneBatch

    rng = np.random.default_rng(seed)
    obj_ids = np.zeros((B, 3, 2), dtype=np.int64)
    obj_mask = np.zeros((B, 3))
    attr_ids = np.zeros((B, 3), dtype=np.int64)
    attr_mask = np.zeros((B, 3))
    for b in range(B):
        k = b % 3 + 1
        obj_ids[b, :k] = rng.integers(1, visual_size, (k, 2))
        obj_mask[b, :k] = 1
        a = 2 + b % 2
        attr_ids[b, :a] = rng.integers(4, vocab_size, a)
        attr_mask[b, :a] = 1
    if not with_attributes:
        return SceneBatch(obj_ids, obj_mask)
    return SceneBatch(obj_ids, obj_mask, attr_ids, attr_mask)


def tiny_targets(seed=0, B=3, S=5, vocab_size=20):
    """Word ids then EOS, PAD-padded; lengths vary per row."""
    import numpy as np

    from tcts.textcore import EOS, PAD

    rng = np.random.default_rng(seed)
    out = np.full((B, S), PAD, dtype=np.int64)
    for b in range(B):
        n = 1 + (b % (S - 1))
        out[b, :n] = rng.integers(4, vocab_size, n)
        out[b, n] = EOS
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
