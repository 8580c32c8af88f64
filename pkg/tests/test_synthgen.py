import pytest

from tcts.synthgen import (STOPWORDS, GenConfig, DatasetRecord, build_attr_vocab,
                           closed_world_coverage, dataset_hash, extract_attributes, gen_dataset,
                           has_misalignment, measure_misalignment, parse_caption, read_jsonl,
                           split, split_sizes, to_jsonl, write_jsonl)
from tcts.textcore import build_vocab


@pytest.fixture(scope="module")
def default_records():
    return gen_dataset(GenConfig())


def test_same_seed_is_byte_identical():
    a = to_jsonl(gen_dataset(GenConfig(num_records=50, seed=3)))
    b = to_jsonl(gen_dataset(GenConfig(num_records=50, seed=3)))
    c = to_jsonl(gen_dataset(GenConfig(num_records=50, seed=4)))
    assert a == b and a != c


def test_single_record_goes_to_train():
    (rec,) = gen_dataset(GenConfig(num_records=1))
    assert rec.split == "train"
    assert split_sizes(1) == (1, 0, 0)


def test_split_proportions(default_records):
    sizes = [len(split(default_records, s)) for s in ("train", "val", "test")]
    assert sizes == [1600, 200, 200]


def test_record_invariants(default_records):
    for rec in default_records[:300]:
        toks = rec.ref_tokens
        assert len(rec.refs) == 5 and len(set(rec.refs)) == 5
        assert 1 <= len(rec.objects) <= 4
        for attr in rec.attributes:
            assert any(attr in ref for ref in toks)
        assert not set(rec.attributes) & STOPWORDS


def test_references_parse_back_to_the_scene(default_records):
    for rec in default_records[:300]:
        for ref in rec.ref_tokens:
            parsed = parse_caption(ref)
            assert parsed is not None
            assert parsed["objects"] == rec.objects[: len(parsed["objects"])]
            assert (parsed["relation"] or "") == rec.relation


def test_default_train_split_is_misaligned(default_records):
    assert measure_misalignment(split(default_records, "train")) > 0.9


def test_misalignment_definition():
    assert has_misalignment([["a", "dog"], ["a", "cat"]])
    assert not has_misalignment([["a", "dog"], ["a", "dog"]])
    assert not has_misalignment([["a", "dog"], ["the", "dog"]])


def test_held_out_words_are_in_train_vocab(default_records):
    assert closed_world_coverage(default_records) == 1.0
    vocab = build_vocab(t for r in split(default_records, "train") for t in r.ref_tokens)
    assert vocab.size < 80


def test_extract_attributes_rules():
    refs = [["a", "dog", "runs"], ["the", "dog"]]
    assert extract_attributes(refs, ["dog", "cat"]) == ["dog"]
    assert extract_attributes([["a", "the"]], ["a", "the"]) == []
    vocab = build_attr_vocab([["a", "dog", "dog", "cat"]], 1)
    assert vocab == ["dog"]


def test_jsonl_round_trip(tmp_path):
    recs = gen_dataset(GenConfig(num_records=20))
    path = tmp_path / "d.jsonl"
    write_jsonl(recs, path)
    back = read_jsonl(path)
    assert back == recs and dataset_hash(back) == dataset_hash(recs)
    assert isinstance(back[0], DatasetRecord)
