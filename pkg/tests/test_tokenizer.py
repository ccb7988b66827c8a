import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcnn.errors import AlphabetError, ContractError, SequenceTooShortError, VocabError
from mcnn.tokenizer import (
    AMBIGUITY_CODES,
    PAD_ID,
    STANDARD_RESIDUES,
    UNK_ID,
    TrigramVocab,
    build_vocab,
    encode,
    extract_ngrams,
)

RESIDUES = STANDARD_RESIDUES + AMBIGUITY_CODES


def test_golden_trigrams():
    assert extract_ngrams("AAADADTICIG") == [
        "AAA", "AAD", "ADA", "DAD", "ADT", "DTI", "TIC", "ICI", "CIG"]


def test_single_window():
    assert extract_ngrams("ACD") == ["ACD"]


def test_window_count_law_on_random_sequences():
    rng = np.random.default_rng(0)
    letters = np.array(list(RESIDUES))
    for _ in range(1000):
        length = int(rng.integers(3, 601))
        seq = "".join(letters[rng.integers(0, len(letters), size=length)])
        grams = extract_ngrams(seq)
        assert len(grams) == length - 2
        assert grams[0] == seq[:3] and grams[-1] == seq[-3:]


def test_too_short():
    with pytest.raises(SequenceTooShortError):
        extract_ngrams("AC")


def test_illegal_character_offset():
    with pytest.raises(AlphabetError) as info:
        extract_ngrams("ACDO")
    assert info.value.offset == 3


def test_cleaning_strips_gaps_and_stops():
    assert extract_ngrams("ac-d*e") == ["ACD", "CDE"]


def test_ambiguity_codes_kept():
    assert extract_ngrams("AXBZJ") == ["AXB", "XBZ", "BZJ"]


class TestVocab:
    def test_dedup(self):
        vocab = build_vocab([["AAA"], ["AAA"]])
        assert vocab.token_to_id == {"AAA": 2}

    def test_first_occurrence_order(self):
        assert build_vocab([["AAA"], ["AAC"]]).token_to_id == {"AAA": 2, "AAC": 3}

    def test_empty_corpus(self):
        with pytest.raises(ContractError):
            build_vocab([])

    def test_rejects_bad_tokens(self):
        with pytest.raises(VocabError):
            TrigramVocab(("AA",))
        with pytest.raises(VocabError):
            TrigramVocab(("AAA", "AAA"))

    def test_ids_contiguous(self):
        vocab = build_vocab([extract_ngrams("ACDEFGHIKLMNPQ")])
        assert sorted(vocab.token_to_id.values()) == list(range(2, len(vocab)))

    def test_json_layout_and_round_trip(self, tmp_path):
        vocab = build_vocab([["AAA", "CDE"]])
        path = tmp_path / "v.json"
        vocab.save(path)
        assert json.loads(path.read_text()) == {"version": 1, "n": 3, "tokens": ["AAA", "CDE"]}
        assert TrigramVocab.load(path) == vocab
        assert TrigramVocab.load(path).digest() == vocab.digest()

    def test_unknown_version(self):
        with pytest.raises(VocabError):
            TrigramVocab.from_json('{"version": 9, "n": 3, "tokens": []}')


class TestEncode:
    vocab = TrigramVocab(("AAA",))

    def test_all_padding(self):
        assert encode([], self.vocab, 4) == [0, 0, 0, 0]

    def test_single_lookup(self):
        assert encode(["AAA"], self.vocab, 3) == [2, 0, 0]

    def test_unknown(self):
        assert encode(["ZZZ"], self.vocab, 2) == [UNK_ID, PAD_ID]

    def test_truncation(self):
        assert encode(["AAA"] * 5, self.vocab, 2) == [2, 2]

    def test_bad_max_len(self):
        with pytest.raises(ContractError):
            encode(["AAA"], self.vocab, 0)


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet=RESIDUES, min_size=3, max_size=80))
def test_decode_inverts_encode(seq):
    tokens = extract_ngrams(seq)
    vocab = build_vocab([tokens])
    ids = encode(tokens, vocab, len(tokens) + 5)
    assert vocab.decode(ids) == tokens


def test_fold_vocab_has_no_test_only_tokens(small_corpus):
    train, test = small_corpus[:40], small_corpus[40:]
    vocab = build_vocab(extract_ngrams(r.ha_seq) for r in train)
    train_tokens = {t for r in train for t in extract_ngrams(r.ha_seq)}
    test_only = {t for r in test for t in extract_ngrams(r.ha_seq)} - train_tokens
    assert test_only  # the oracle is only informative if such tokens exist
    assert not test_only & set(vocab.tokens)
    assert set(vocab.tokens) == train_tokens

