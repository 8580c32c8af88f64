"""Synthetic scene-captioning data.

A scene is a short list of objects, each a (modifier, noun) pair, plus a
spatial relation between the first object (the subject) and the second (the
ground). Objects after the second are background clutter that captions do
not mention. Five references per scene come from a small template grammar
with synonym substitution, so references of one scene agree on content but
diverge after shared prefixes such as "a".

The relation is not part of the visual input the student sees; it can only
be guessed from the objects, while the teacher reads it off the
ground-truth attributes.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .textcore import build_vocab, tokenize

NOUNS = {
    "dog": ("dog", "puppy"),
    "cat": ("cat", "kitten"),
    "man": ("man", "guy"),
    "woman": ("woman", "lady"),
    "bird": ("bird",),
    "horse": ("horse", "pony"),
    "ball": ("ball",),
    "bike": ("bike", "bicycle"),
    "car": ("car",),
    "table": ("table", "desk"),
    "bench": ("bench",),
    "tree": ("tree",),
    "box": ("box", "crate"),
    "chair": ("chair",),
}
MODIFIERS = {
    "small": ("small", "little"),
    "big": ("big", "large"),
    "red": ("red",),
    "black": ("black",),
    "white": ("white",),
    "brown": ("brown",),
}
RELATIONS = {
    "on": (("on",), ("on", "top", "of")),
    "near": (("near",), ("next", "to"), ("beside",)),
    "under": (("under",), ("beneath",)),
    "behind": (("behind",),),
    "in front of": (("in", "front", "of"),),
}
# relation prior given the ground object's noun
_FURNITURE = {"on": 0.5, "under": 0.3, "near": 0.2}
RELATION_PRIOR = {
    "table": _FURNITURE, "bench": _FURNITURE, "chair": _FURNITURE, "box": _FURNITURE,
    "tree": {"under": 0.5, "near": 0.3, "behind": 0.2},
    "car": {"near": 0.4, "behind": 0.3, "in front of": 0.3},
    "bike": {"near": 0.4, "behind": 0.3, "in front of": 0.3},
}
_DEFAULT_PRIOR = {"near": 0.5, "behind": 0.25, "in front of": 0.25}

# slot names: M1 N1 subject, M2 N2 ground, REL relation phrase
PAIR_TEMPLATES = (
    ("a", "M1", "N1", "REL", "a", "M2", "N2"),
    ("the", "M1", "N1", "is", "REL", "the", "M2", "N2"),
    ("there", "is", "a", "M1", "N1", "REL", "a", "M2", "N2"),
    ("a", "N1", "that", "is", "M1", "REL", "a", "M2", "N2"),
    ("the", "M1", "N1", "sits", "REL", "a", "M2", "N2"),
    ("a", "M1", "N1", "can", "be", "seen", "REL", "a", "M2", "N2"),
)
SINGLE_TEMPLATES = (
    ("a", "M1", "N1"),
    ("there", "is", "a", "M1", "N1"),
    ("a", "N1", "that", "is", "M1"),
    ("the", "M1", "N1", "is", "alone"),
    ("a", "M1", "N1", "sits", "here"),
    ("a", "photo", "of", "a", "M1", "N1"),
)
STOPWORDS = frozenset({"a", "an", "the", "is", "are", "of", "to", "there", "that", "with", "and"})
OBJECT_COUNT_PROBS = (0.1, 0.5, 0.25, 0.15)  # 1..4 objects
REFS_PER_RECORD = 5


@dataclass
class GenConfig:
    num_records: int = 2000
    seed: int = 0
    attr_vocab_size: int = 50
    refs_per_record: int = REFS_PER_RECORD


@dataclass
class DatasetRecord:
    id: int
    objects: list[str]
    relation: str
    attributes: list[str]
    refs: list[str]
    split: str = "train"

    @property
    def ref_tokens(self) -> list[list[str]]:
        return [tokenize(r) for r in self.refs]

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        return cls(**json.loads(line))


def visual_tokens() -> list[str]:
    return sorted(set(MODIFIERS) | set(NOUNS))


def _fill(template, subject, ground, rel_phrase, choose) -> list[str]:
    out = []
    for slot in template:
        if slot == "M1":
            out.append(choose(MODIFIERS[subject[0]]))
        elif slot == "N1":
            out.append(choose(NOUNS[subject[1]]))
        elif slot == "M2":
            out.append(choose(MODIFIERS[ground[0]]))
        elif slot == "N2":
            out.append(choose(NOUNS[ground[1]]))
        elif slot == "REL":
            out.extend(rel_phrase)
        else:
            out.append(slot)
    return out


def _match(template, tokens, pos=0, slot_i=0, found=None):
    """Yield slot assignments under which ``template`` spells ``tokens``."""
    found = dict(found or {})
    if slot_i == len(template):
        if pos == len(tokens):
            yield found
        return
    slot = template[slot_i]
    options: Iterable[tuple[str, tuple[str, ...]]]
    if slot in ("M1", "M2"):
        options = [(k, (w,)) for k, ws in MODIFIERS.items() for w in ws]
    elif slot in ("N1", "N2"):
        options = [(k, (w,)) for k, ws in NOUNS.items() for w in ws]
    elif slot == "REL":
        options = [(k, p) for k, ps in RELATIONS.items() for p in ps]
    else:
        options = [(None, (slot,))]
    for canon, words in options:
        if tuple(tokens[pos:pos + len(words)]) == words:
            nxt = dict(found)
            if canon is not None:
                nxt[slot] = canon
            yield from _match(template, tokens, pos + len(words), slot_i + 1, nxt)


def parse_caption(tokens: Sequence[str]) -> dict | None:
    """Invert the grammar: subject/ground objects and relation, or None."""
    for template in PAIR_TEMPLATES + SINGLE_TEMPLATES:
        for slots in _match(template, list(tokens)):
            parsed = {"objects": [f"{slots['M1']} {slots['N1']}"], "relation": None}
            if "N2" in slots:
                parsed["objects"].append(f"{slots['M2']} {slots['N2']}")
                parsed["relation"] = slots["REL"]
            return parsed
    return None


def _sample_scene(rng: np.random.Generator):
    count = int(rng.choice(len(OBJECT_COUNT_PROBS), p=OBJECT_COUNT_PROBS)) + 1
    nouns = rng.choice(sorted(NOUNS), size=count, replace=False)
    mods = sorted(MODIFIERS)
    objects = [(mods[rng.integers(len(mods))], str(n)) for n in nouns]
    relation = ""
    if count >= 2:
        prior = RELATION_PRIOR.get(objects[1][1], _DEFAULT_PRIOR)
        names = sorted(prior)
        relation = names[int(rng.choice(len(names), p=[prior[k] for k in names]))]
    return objects, relation


def _sample_refs(rng, objects, relation, k) -> list[str]:
    templates = PAIR_TEMPLATES if relation else SINGLE_TEMPLATES
    subject = objects[0]
    ground = objects[1] if relation else None
    phrases = RELATIONS[relation] if relation else ((),)

    def choose(options):
        return options[rng.integers(len(options))]

    refs: list[str] = []
    # every surface form is finite; guard against asking for more than exist
    budget = 200
    while len(refs) < k and budget:
        budget -= 1
        template = templates[rng.integers(len(templates))]
        phrase = phrases[rng.integers(len(phrases))]
        text = " ".join(_fill(template, subject, ground, phrase, choose))
        if text not in refs:
            refs.append(text)
    if len(refs) < k:
        raise RuntimeError("grammar cannot produce enough distinct references")
    return refs


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = max(1, int(0.8 * n))
    n_val = int(0.1 * n)
    return n_train, n_val, n - n_train - n_val


def build_attr_vocab(token_refs: Iterable[Sequence[str]], size: int) -> list[str]:
    """The ``size`` most frequent non-stopword tokens (ties lexicographic)."""
    counts = Counter(t for ref in token_refs for t in ref if t not in STOPWORDS)
    return sorted(counts, key=lambda t: (-counts[t], t))[:size]


def extract_attributes(refs: Sequence[Sequence[str]], attr_vocab: Iterable[str]) -> list[str]:
    vocab = set(attr_vocab)
    return sorted({t for ref in refs for t in ref if t in vocab and t not in STOPWORDS})


def gen_dataset(config: GenConfig) -> list[DatasetRecord]:
    if config.num_records < 1:
        raise ValueError("num_records must be >= 1")
    rng = np.random.default_rng(config.seed)
    scenes = []
    for i in range(config.num_records):
        objects, relation = _sample_scene(rng)
        refs = _sample_refs(rng, objects, relation, config.refs_per_record)
        scenes.append((i, objects, relation, refs))

    n_train, n_val, _ = split_sizes(config.num_records)
    splits = ["train"] * n_train + ["val"] * n_val
    splits += ["test"] * (config.num_records - len(splits))

    train_refs = [tokenize(r) for (_, _, _, refs), s in zip(scenes, splits) if s == "train" for r in refs]
    attr_vocab = build_attr_vocab(train_refs, config.attr_vocab_size)

    records = []
    for (i, objects, relation, refs), split in zip(scenes, splits):
        attrs = extract_attributes([tokenize(r) for r in refs], attr_vocab)
        if not attrs:
            raise RuntimeError(f"record {i} has no attributes under the attribute vocabulary")
        records.append(DatasetRecord(
            id=i,
            objects=[f"{m} {n}" for m, n in objects],
            relation=relation,
            attributes=attrs,
            refs=refs,
            split=split,
        ))
    return records


def to_jsonl(records: Sequence[DatasetRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def write_jsonl(records: Sequence[DatasetRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_jsonl(records))


def read_jsonl(path) -> list[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        return [DatasetRecord.from_json(line) for line in fh if line.strip()]


def dataset_hash(records: Sequence[DatasetRecord]) -> str:
    return hashlib.sha256(to_jsonl(records).encode()).hexdigest()


def split(records: Sequence[DatasetRecord], name: str) -> list[DatasetRecord]:
    return [r for r in records if r.split == name]


def has_misalignment(token_refs: Sequence[Sequence[str]]) -> bool:
    """True when some non-empty prefix shared by refs is continued differently.

    A reference that ends right after the prefix continues with EOS.
    """
    nexts: dict[tuple, set] = {}
    for ref in token_refs:
        for k in range(1, len(ref)):
            nexts.setdefault(tuple(ref[:k]), set()).add(ref[k])
        nexts.setdefault(tuple(ref), set()).add(None)
    return any(len(v) >= 2 for v in nexts.values())


def measure_misalignment(records: Sequence[DatasetRecord]) -> float:
    """Fraction of records with at least one misaligned prefix."""
    if not records:
        return 0.0
    for r in records:
        if len(r.refs) < 2:
            raise ValueError(f"record {r.id} needs >= 2 references")
    return sum(has_misalignment(r.ref_tokens) for r in records) / len(records)


def closed_world_coverage(records: Sequence[DatasetRecord], min_count: int = 5) -> float:
    """Share of val/test reference tokens covered by the train-split vocabulary."""
    vocab = build_vocab((t for r in split(records, "train") for t in r.ref_tokens), min_count)
    held = [tok for r in records if r.split != "train" for ref in r.ref_tokens for tok in ref]
    if not held:
        return 1.0
    return sum(tok in vocab for tok in held) / len(held)


def keyword_precision(tokens: Sequence[str], record: DatasetRecord) -> float | None:
    """Share of parsed objects/relation that agree with the scene; None if unparseable."""
    parsed = parse_caption(tokens)
    if parsed is None:
        return None
    truth = record.objects[: len(parsed["objects"])]
    hits = sum(p == t for p, t in zip(parsed["objects"], truth))
    total = len(parsed["objects"])
    if parsed["relation"] is not None:
        total += 1
        hits += parsed["relation"] == record.relation
    return hits / total
