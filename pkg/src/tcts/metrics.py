"""Reference-based caption metrics: CIDEr-D, BLEU-1..4, ROUGE-L.

Captions may be given as :class:`~tcts.textcore.Caption` objects or as plain
sequences of hashable tokens (ids or strings). Sentinels are never scored.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from .errors import MissingReferences
from .textcore import _interior, lcs_length, ngrams

MAX_N = 4
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0
ROUGE_BETA = 1.2


@dataclass(frozen=True, eq=False)
class IdfTable:
    """Document frequencies of 1..4-grams over reference sets (one per image)."""

    df: tuple[dict, ...]
    num_images: int

    def idf(self, gram: tuple) -> float:
        # unseen n-grams get df=1, the usual CIDEr-D floor
        return math.log(self.num_images / max(1, self.df[len(gram) - 1].get(gram, 0)))


def build_idf(refs: Sequence[Sequence]) -> IdfTable:
    if not refs:
        raise MissingReferences("need at least one reference set")
    df: list[Counter] = [Counter() for _ in range(MAX_N)]
    for ref_set in refs:
        if not ref_set:
            raise MissingReferences("empty reference set")
        for n in range(1, MAX_N + 1):
            seen = set()
            for ref in ref_set:
                seen.update(ngrams(ref, n))
            df[n - 1].update(seen)
    return IdfTable(tuple(dict(d) for d in df), len(refs))


@lru_cache(maxsize=65536)
def _tfidf(seq: tuple, idf: IdfTable):
    vecs, norms = [], []
    for n in range(1, MAX_N + 1):
        vec = {g: c * idf.idf(g) for g, c in ngrams(seq, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider(candidate, refs: Sequence, idf: IdfTable) -> float:
    """CIDEr-D of one candidate against its reference set.

    Clipped tf-idf cosine per n, Gaussian length penalty (sigma 6), averaged
    over references and over n = 1..4, times 10. A zero-norm vector scores 0.
    """
    if not refs:
        raise MissingReferences("cider needs at least one reference")
    cand = _interior(candidate)
    c_vecs, c_norms = _tfidf(cand, idf)
    total = 0.0
    for ref in refs:
        ref = _interior(ref)
        r_vecs, r_norms = _tfidf(ref, idf)
        penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * CIDER_SIGMA**2))
        for n in range(MAX_N):
            if c_norms[n] == 0.0 or r_norms[n] == 0.0:
                continue
            rv = r_vecs[n]
            dot = sum(min(v, rv[g]) * rv[g] for g, v in c_vecs[n].items() if g in rv)
            total += penalty * dot / (c_norms[n] * r_norms[n])
    return CIDER_SCALE * total / (MAX_N * len(refs))


def _closest_ref_length(c_len: int, refs) -> int:
    return min((abs(len(r) - c_len), len(r)) for r in refs)[1]


def bleu(candidate, refs: Sequence) -> tuple[float, float, float, float]:
    """Sentence-level BLEU-1..4 with brevity penalty.

    For n >= 2 a zero clipped count is smoothed to (0 + 1) / (total + 1).
    """
    if not refs:
        raise MissingReferences("bleu needs at least one reference")
    cand = _interior(candidate)
    refs = [_interior(r) for r in refs]
    r_len = _closest_ref_length(len(cand), refs)
    bp = 1.0 if len(cand) > r_len else math.exp(1.0 - r_len / len(cand))
    log_prec = []
    scores = []
    for n in range(1, MAX_N + 1):
        counts = ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= ngrams(r, n)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = sum(counts.values())
        if clipped == 0 and n >= 2:
            prec = 1.0 / (total + 1)
        else:
            prec = clipped / total if total else 0.0
        if prec == 0.0:
            log_prec.append(-math.inf)
        else:
            log_prec.append(math.log(prec))
        mean_log = sum(log_prec) / n
        scores.append(0.0 if mean_log == -math.inf else bp * math.exp(mean_log))
    return tuple(scores)


def rouge_l(candidate, refs: Sequence) -> float:
    """Best LCS F-measure (beta 1.2) over the references."""
    if not refs:
        raise MissingReferences("rouge_l needs at least one reference")
    cand = _interior(candidate)
    best = 0.0
    for ref in refs:
        ref = _interior(ref)
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        f = (1 + ROUGE_BETA**2) * p * r / (r + ROUGE_BETA**2 * p)
        best = max(best, f)
    return best


@dataclass(frozen=True)
class MetricReport:
    bleu: tuple[float, float, float, float]
    rouge_l: float
    cider: float

    def as_row(self) -> dict:
        row = {f"bleu{i + 1}": b for i, b in enumerate(self.bleu)}
        row["rougeL"] = self.rouge_l
        row["cider"] = self.cider
        return row

    @classmethod
    def mean(cls, reports: Sequence["MetricReport"]) -> "MetricReport":
        k = len(reports)
        return cls(
            tuple(sum(r.bleu[i] for r in reports) / k for i in range(MAX_N)),
            sum(r.rouge_l for r in reports) / k,
            sum(r.cider for r in reports) / k,
        )


def score_all(candidates: Sequence, refs: Sequence[Sequence], idf: IdfTable | None = None):
    """Per-candidate reports plus their mean.

    Without an explicit ``idf`` the table is built from ``refs`` themselves,
    i.e. the evaluated split is its own CIDEr corpus.
    """
    if len(candidates) != len(refs):
        raise ValueError("one reference set per candidate required")
    idf = idf or build_idf(refs)
    reports = [
        MetricReport(bleu(c, r), rouge_l(c, r), cider(c, r, idf))
        for c, r in zip(candidates, refs)
    ]
    return reports, MetricReport.mean(reports)
