"""Byte-level BPE tokenizer: bijection, round trips, determinism."""

import pytest

from unlearn_lab.tokenizer import BOS, EOS, PAD, UNK, Vocabulary

CORPUS = [
    "The author born in Saltmere in 1956 is named Mira Valdez.",
    "Mira Valdez mainly writes gothic stories.",
    "The debut novel of Mira Valdez is titled The Amber Lantern.",
    "Tobias Okafor was born in Kestrel Bay, Northmark.",
]


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.train(CORPUS, vocab_size=300)


class TestVocabulary:
    def test_reserved_ids_distinct(self):
        assert len({PAD, BOS, EOS, UNK}) == 4

    def test_ids_dense(self, vocab):
        assert vocab.size <= 300
        for i in range(4, vocab.size):
            assert isinstance(vocab.token_bytes(i), bytes)

    def test_bijection(self, vocab):
        seen = {}
        for i in range(4, vocab.size):
            b = vocab.token_bytes(i)
            assert b not in seen, f"ids {seen[b]} and {i} share bytes {b!r}"
            seen[b] = i

    def test_roundtrip(self, vocab):
        for text in CORPUS + ["completely unseen text 123!"]:
            assert vocab.decode(vocab.encode(text)) == text

    def test_training_deterministic(self):
        v1 = Vocabulary.train(CORPUS, 300)
        v2 = Vocabulary.train(CORPUS, 300)
        assert v1.tokens == v2.tokens
        assert v1.merges == v2.merges

    def test_merges_compress(self, vocab):
        text = CORPUS[0]
        assert len(vocab.encode(text)) < len(text.encode("utf-8"))

    def test_minimum_size_enforced(self):
        with pytest.raises(ValueError, match="at least"):
            Vocabulary.train(CORPUS, 100)

    def test_save_load_roundtrip(self, vocab, tmp_path):
        path = tmp_path / "vocab.json"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.tokens == vocab.tokens
        assert loaded.merges == vocab.merges
        assert loaded.encode(CORPUS[2]) == vocab.encode(CORPUS[2])

    def test_encode_unseen_bytes(self, vocab):
        text = "emoji \N{GRINNING FACE} bytes"
        assert vocab.decode(vocab.encode(text)) == text
