import math

import numpy as np
import pytest

from oracles import bleu_oracle, cider_d_oracle
from tcts.errors import MissingReferences
from tcts.metrics import MetricReport, bleu, build_idf, cider, rouge_l, score_all


def random_corpus(rng, n_images, n_refs, max_len, alphabet=6):
    return [
        [tuple(rng.integers(0, alphabet, rng.integers(1, max_len + 1)).tolist())
         for _ in range(rng.integers(1, n_refs + 1))]
        for _ in range(n_images)
    ]


def test_cider_self_match_is_ten():
    refs = [[(1, 2, 3, 4, 5)], [(6, 7, 8, 9, 10)]]
    idf = build_idf(refs)
    assert cider((1, 2, 3, 4, 5), refs[0], idf) == pytest.approx(10.0, abs=1e-12)


def test_cider_disjoint_is_zero():
    refs = [[(1, 2, 3)], [(4, 5)]]
    assert cider((9, 9), refs[0], build_idf(refs)) == 0.0


def test_cider_zero_idf_gives_zero():
    # every n-gram occurs in every image, so all tf-idf vectors vanish
    refs = [[(1, 2, 3)], [(1, 2, 3)]]
    assert cider((1, 2, 3), refs[0], build_idf(refs)) == 0.0


def test_cider_duplicate_references_within_image():
    refs = [[(1, 2, 3), (4, 5)], [(7, 8)]]
    doubled = [[(1, 2, 3), (4, 5), (1, 2, 3), (4, 5)], [(7, 8)]]
    a = cider((1, 2, 3), refs[0], build_idf(refs))
    b = cider((1, 2, 3), doubled[0], build_idf(doubled))
    assert a == pytest.approx(b, abs=1e-12)


def test_cider_matches_oracle_on_random_corpora(rng):
    for _ in range(200):
        corpus = random_corpus(rng, rng.integers(1, 6), 3, 6)
        idf = build_idf(corpus)
        img = rng.integers(len(corpus))
        cand = tuple(rng.integers(0, 6, rng.integers(1, 7)).tolist())
        expected = cider_d_oracle(cand, corpus[img], corpus)
        assert cider(cand, corpus[img], idf) == pytest.approx(expected, abs=1e-9)


def test_cider_requires_references():
    with pytest.raises(MissingReferences):
        build_idf([])
    with pytest.raises(MissingReferences):
        cider((1,), [], build_idf([[(1,)]]))


def test_bleu_self_match():
    assert bleu((1, 2, 3, 4), [(1, 2, 3, 4)]) == pytest.approx((1.0,) * 4)


def test_bleu_brevity_penalty():
    b1 = bleu((1, 2), [(1, 2, 3, 4)])[0]
    assert b1 == pytest.approx(math.exp(1 - 4 / 2))


def test_bleu_smoothing_keeps_higher_orders_positive():
    scores = bleu((1, 2, 3), [(3, 2, 1)])
    assert scores[0] == pytest.approx(1.0)
    assert all(s > 0 for s in scores[1:])


def test_bleu_matches_oracle(rng):
    for _ in range(200):
        refs = random_corpus(rng, 1, 3, 6)[0]
        cand = tuple(rng.integers(0, 6, rng.integers(1, 7)).tolist())
        got = bleu(cand, refs)
        for n in range(1, 5):
            assert got[n - 1] == pytest.approx(bleu_oracle(cand, refs, n), abs=1e-12)


def test_rouge_l_values():
    assert rouge_l((1, 2, 3), [(1, 2, 3)]) == pytest.approx(1.0)
    assert rouge_l((1, 2, 3), [(7, 8)]) == 0.0
    # lcs 2, p = 2/3, r = 2/4
    p, r, b2 = 2 / 3, 2 / 4, 1.2 ** 2
    expected = (1 + b2) * p * r / (r + b2 * p)
    assert rouge_l((1, 2, 3), [(1, 9, 3, 9), (5,)]) == pytest.approx(expected)


def test_metric_ranges(rng):
    corpus = random_corpus(rng, 5, 3, 6)
    cands = [tuple(rng.integers(0, 6, 4).tolist()) for _ in corpus]
    reports, mean = score_all(cands, corpus)
    for rep in reports:
        assert all(0.0 <= b <= 1.0 for b in rep.bleu)
        assert 0.0 <= rep.rouge_l <= 1.0
        assert rep.cider >= 0.0 and np.isfinite(rep.cider)
    assert mean.cider == pytest.approx(np.mean([r.cider for r in reports]))
    assert mean.bleu[3] == pytest.approx(np.mean([r.bleu[3] for r in reports]))


def test_report_row_keys():
    row = MetricReport((0.1, 0.2, 0.3, 0.4), 0.5, 1.5).as_row()
    assert list(row) == ["bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider"]
