import numpy as np
import pytest
from hypothesis import given, strategies as st

from refavs.domain import (
    CLASS_REGISTRY, CLASS_SIGNATURES, SEG_ID, TERMINAL, VOCAB, ClassLabel, Query, ReasoningPath,
    check_mask_pair, detokenize, ends_with_seg, parse_final_answer, tokenize,
)

WORDS = [w for w in VOCAB if not w.startswith("[")]


def test_registry_partition():
    seen = [c for c in CLASS_REGISTRY if c.split_tag == "seen"]
    unseen = [c for c in CLASS_REGISTRY if c.split_tag == "unseen"]
    assert len(seen) == 10 and len(unseen) == 4
    assert len({c.name for c in CLASS_REGISTRY}) == len(CLASS_REGISTRY)


def test_signatures_are_separated():
    sig = CLASS_SIGNATURES
    for i in range(len(sig)):
        for j in range(i + 1, len(sig)):
            assert np.sum(sig[i] != sig[j]) >= 3


@pytest.mark.parametrize("name,tag", [("", "seen"), ("Violin", "seen"), ("violin", "other")])
def test_class_label_rejects_bad_values(name, tag):
    with pytest.raises(ValueError):
        ClassLabel(name, tag)


@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=30))
def test_token_round_trip(words):
    ids = tokenize(" ".join(words))
    assert detokenize(ids) == detokenize(tokenize(detokenize(ids)))
    assert tokenize(detokenize(ids)) == ids


def test_tokenize_lowercases_unknown_case():
    assert tokenize("VIOLIN") == tokenize("violin")
    with pytest.raises(KeyError):
        tokenize("oboe")


def test_parse_final_answer_examples():
    assert parse_final_answer(tokenize("answer : the target is violin . It is [SEG]")) == "violin"
    assert parse_final_answer(()) is None
    two = tokenize("the target is cello . Wait, let me re-evaluate. the target is violin . It is [SEG]")
    assert parse_final_answer(two) == "violin"


def test_parse_final_answer_synonym_is_not_a_class():
    assert parse_final_answer(tokenize("the target is fiddle .")) is None
    assert parse_final_answer(tokenize("the target is")) is None


def test_parse_final_answer_only_returns_registered_names():
    names = {c.name for c in CLASS_REGISTRY}
    rng = np.random.default_rng(0)
    for _ in range(500):
        toks = rng.integers(0, len(VOCAB), size=rng.integers(0, 20)).tolist()
        got = parse_final_answer(toks)
        assert got is None or got in names


def test_ends_with_seg_examples():
    assert ends_with_seg(tokenize("answer . It is [SEG]"))
    assert not ends_with_seg(tokenize("answer . [SEG] It is"))
    assert not ends_with_seg(tokenize("is [SEG]"))
    assert ends_with_seg(ReasoningPath(TERMINAL))
    assert TERMINAL[-1] == SEG_ID


def test_reasoning_path_span_order_checked():
    toks = tokenize("video : dog . audio : cat .")
    ReasoningPath(toks, {"video": (0, 4), "audio": (4, 8)})
    with pytest.raises(ValueError):
        ReasoningPath(toks, {"video": (4, 8), "audio": (0, 4)})


def test_query_requires_reference():
    with pytest.raises(ValueError):
        Query(tokenize("segment"), (), np.zeros((2, 2, 1)), np.zeros((1, 1)))


def test_check_mask_pair_shape():
    with pytest.raises(ValueError):
        check_mask_pair(np.zeros((2, 2)), np.zeros((2, 3)))
