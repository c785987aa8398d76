"""Normal-set construction: providers, selection, fallbacks, endpoint."""

import logging

import numpy as np
import pytest

from unlearn_lab.corpus import QARecord
from unlearn_lab.normal_data import (
    REFUSAL_ANSWERS,
    Companion,
    CredentialError,
    FixtureTransport,
    GeneratorEndpointConfig,
    HashedNgramProvider,
    LmHiddenStateProvider,
    MalformedResponseError,
    NormalSet,
    TransportError,
    build_normal_set,
    cosine,
    embed,
    fallback_safe_response,
    generate_via_endpoint,
    select_similar_retain,
)


def rec(i, question, answer):
    return QARecord(id=f"r{i}", question=question, answer=answer)


RETAIN = [
    rec(0, "Where was Ada Quill born?", "Ada Quill was born in Saltmere."),
    rec(1, "What genre does Ada Quill write?", "Ada Quill writes gothic stories."),
    rec(2, "Where was Bram Holt born?", "Bram Holt was born in Tessaly."),
    rec(3, "What award did Bram Holt get?", "Bram Holt received the Cobalt Laurel."),
    rec(4, "What is the debut of Cara Voss?", "The debut of Cara Voss is The Iron Aviary."),
    rec(5, "Where does Cara Voss live?", "Cara Voss lives in Windale."),
    rec(6, "Who mentored Dmitri Falk?", "Dmitri Falk was mentored by Simone Vey."),
    rec(7, "What year was Dmitri Falk born?", "Dmitri Falk was born in 1958."),
    rec(8, "What genre does Elin Mara write?", "Elin Mara writes polar stories."),
    rec(9, "Where was Elin Mara born?", "Elin Mara was born in Ashport."),
]
FORGET = rec(99, "Where was Ada Quill born?", "Ada Quill was born in Saltmere.")


class TestProviders:
    def test_unit_norm(self):
        provider = HashedNgramProvider()
        v = embed("some text to embed", provider)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)

    def test_cosine_bounds(self):
        provider = HashedNgramProvider()
        a = embed("alpha beta gamma", provider)
        b = embed("alpha delta", provider)
        assert -1.0 <= cosine(a, b) <= 1.0

    def test_disjoint_character_strings_orthogonal(self):
        provider = HashedNgramProvider()
        a = embed("aaaa", provider)
        b = embed("zzzz", provider)
        assert cosine(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_self_similarity(self):
        provider = HashedNgramProvider()
        v = embed("repeatable text", provider)
        w = embed("repeatable text", provider)
        assert cosine(v, w) == pytest.approx(1.0, abs=1e-9)

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            embed("", HashedNgramProvider())

    def test_idf_fit_changes_weighting(self):
        plain = HashedNgramProvider()
        fitted = HashedNgramProvider().fit([r.question for r in RETAIN])
        a = embed(RETAIN[0].question, plain)
        b = embed(RETAIN[0].question, fitted)
        assert not np.allclose(a, b)

    def test_lm_provider_unit_norm(self):
        from unlearn_lab.checkpoint import Checkpoint, ModelConfig
        from unlearn_lab.tokenizer import Vocabulary

        vocab = Vocabulary.train([r.question + " " + r.answer for r in RETAIN], 280)
        ckpt = Checkpoint.init(
            ModelConfig(vocab_size=vocab.size, dim=16, layers=1, heads=2, context=64)
        )
        provider = LmHiddenStateProvider(ckpt, vocab)
        v = embed("Where was Ada Quill born?", provider)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)


class TestSelection:
    def test_exact_copy_ranks_first(self):
        provider = HashedNgramProvider()
        out = select_similar_retain(FORGET, RETAIN, 3, 0.0, provider)
        assert out[0].source_id == "r0"
        assert out[0].similarity == pytest.approx(1.0, abs=1e-9)
        assert out[0].provenance == "selected"

    def test_similarities_nonincreasing(self):
        provider = HashedNgramProvider()
        out = select_similar_retain(FORGET, RETAIN, 5, -1.0, provider)
        sims = [c.similarity for c in out]
        assert sims == sorted(sims, reverse=True)

    def test_unsatisfiable_threshold_all_fallbacks(self):
        provider = HashedNgramProvider()
        out = select_similar_retain(FORGET, RETAIN, 3, 1.1, provider)
        assert [c.provenance for c in out] == ["fallback"] * 3
        assert [c.answer for c in out] == REFUSAL_ANSWERS[:3]

    def test_matches_bruteforce_sort(self):
        provider = HashedNgramProvider()
        query = embed(FORGET.question + " " + FORGET.answer, provider)
        sims = [
            (cosine(query, embed(r.question + " " + r.answer, provider)), r.id)
            for r in RETAIN
        ]
        expected = [rid for s, rid in sorted(sims, key=lambda t: (-t[0], t[1]))[:3]]
        out = select_similar_retain(FORGET, RETAIN, 3, -1.0, provider)
        assert [c.source_id for c in out] == expected

    def test_empty_corpus_without_fallback(self):
        with pytest.raises(ValueError, match="fallback"):
            select_similar_retain(FORGET, [], 2, 0.0, HashedNgramProvider(),
                                  allow_fallback=False)


class TestFallback:
    def test_variant_zero_is_idk(self):
        out = fallback_safe_response(FORGET, 0)
        assert out.answer == "I don't know."
        assert out.question == FORGET.question

    def test_deterministic(self):
        assert fallback_safe_response(FORGET, 1) == fallback_safe_response(FORGET, 1)

    def test_rotation_distinct(self):
        answers = {fallback_safe_response(FORGET, i).answer for i in range(3)}
        assert len(answers) == 3


def chat_body(content):
    import json

    return json.dumps({"choices": [{"message": {"role": "assistant",
                                                "content": content}}]})


@pytest.fixture
def endpoint_cfg(monkeypatch):
    monkeypatch.setenv("TEST_GEN_KEY", "sk-fixture")
    return GeneratorEndpointConfig(
        base_url="https://generator.invalid/v1",
        model_name="mini-gen",
        template="tofu",
        retries=2,
        credential_env="TEST_GEN_KEY",
        backoff_s=0.0,
    )


class TestEndpoint:
    def test_parses_three_answers(self, endpoint_cfg):
        fixtures = [
            chat_body("I'm sorry, but I don't have details about a writer born "
                      "there on that date. If you like, I can invent a harmless "
                      "name and background for one!"),
            chat_body("I'm sorry, but I can't identify that fictional writer. "
                      "I could sketch some neutral details instead if helpful."),
            chat_body("I'm sorry, but no information about that author comes to "
                      "mind. Want me to make up a safe, generic biography?"),
        ]
        transport = FixtureTransport(fixtures)
        out = generate_via_endpoint(FORGET, 3, endpoint_cfg, transport)
        assert len(out) == 3
        assert all(c.provenance == "generated" for c in out)
        assert all(c.question == FORGET.question for c in out)
        assert all("I'm sorry" in c.answer for c in out)
        assert len(transport.requests) == 3
        payload = transport.requests[0]["payload"]
        assert payload["model"] == "mini-gen"
        assert payload["messages"][0]["role"] == "system"
        assert FORGET.question in payload["messages"][1]["content"]

    def test_total_failure_falls_back_with_logs(self, endpoint_cfg, caplog):
        transport = FixtureTransport([TransportError("boom")] * 9)
        with caplog.at_level(logging.WARNING, logger="unlearn_lab.normal_data"):
            out = generate_via_endpoint(FORGET, 3, endpoint_cfg, transport,
                                        sleep=lambda s: None)
        assert [c.provenance for c in out] == ["fallback"] * 3
        assert out[0].answer == "I don't know."
        substitutions = [r for r in caplog.records if "substituting" in r.message]
        assert len(substitutions) == 3
        assert len(transport.requests) == 9  # 3 companions x (1 + 2 retries)

    def test_zero_requests(self, endpoint_cfg):
        transport = FixtureTransport([])
        assert generate_via_endpoint(FORGET, 0, endpoint_cfg, transport) == []
        assert transport.requests == []

    def test_missing_credential(self, monkeypatch):
        monkeypatch.delenv("NOT_SET_VAR", raising=False)
        cfg = GeneratorEndpointConfig(
            base_url="https://x.invalid", model_name="m",
            credential_env="NOT_SET_VAR",
        )
        transport = FixtureTransport([chat_body("hi")])
        with pytest.raises(CredentialError, match="NOT_SET_VAR"):
            generate_via_endpoint(FORGET, 1, cfg, transport)
        assert transport.requests == []

    def test_malformed_response_carries_body(self, endpoint_cfg):
        transport = FixtureTransport(['{"unexpected": "shape"}'])
        with pytest.raises(MalformedResponseError, match="unexpected"):
            generate_via_endpoint(FORGET, 1, endpoint_cfg, transport)

    def test_retry_then_success(self, endpoint_cfg):
        transport = FixtureTransport([TransportError("flaky"), chat_body("ok!")])
        out = generate_via_endpoint(FORGET, 1, endpoint_cfg, transport,
                                    sleep=lambda s: None)
        assert out[0].provenance == "generated"
        assert out[0].answer == "ok!"

    def test_config_validation(self):
        with pytest.raises(ValueError, match="timeout"):
            GeneratorEndpointConfig(base_url="x", model_name="m", timeout_s=0)
        with pytest.raises(ValueError, match="template"):
            GeneratorEndpointConfig(base_url="x", model_name="m", template="nope")


class TestBuildNormalSet:
    def test_fallback_only_counts(self):
        forget = [rec(i, f"question {i}?", f"answer {i}.") for i in range(5)]
        nset = build_normal_set(forget, None, "fallback-only", 3)
        assert len(nset.companions) == 5
        total = sum(len(v) for v in nset.companions.values())
        assert total == 15
        assert all(c.provenance == "fallback"
                   for v in nset.companions.values() for c in v)

    def test_similarity_with_duplicates_all_selected(self):
        forget = [FORGET]
        retain = RETAIN + [rec(50, FORGET.question, FORGET.answer)]
        nset = build_normal_set(forget, retain, "similarity", 3, threshold=0.1)
        comps = nset.companions[FORGET.id]
        assert comps[0].similarity == pytest.approx(1.0, abs=1e-9)
        assert all(c.provenance == "selected" for c in comps)

    def test_roundtrip(self, tmp_path):
        forget = [rec(i, f"question {i}?", f"answer {i}.") for i in range(3)]
        nset = build_normal_set(forget, RETAIN, "similarity", 2, threshold=-1.0)
        path = tmp_path / "normal.jsonl"
        nset.save(path)
        loaded = NormalSet.load(path)
        assert loaded.size == nset.size
        assert loaded.companions == nset.companions

    def test_deterministic(self):
        forget = [rec(i, f"question {i}?", f"answer {i}.") for i in range(3)]
        a = build_normal_set(forget, RETAIN, "similarity", 2)
        b = build_normal_set(forget, RETAIN, "similarity", 2)
        assert a.companions == b.companions

    def test_endpoint_mode(self, endpoint_cfg):
        forget = [rec(0, "question?", "answer.")]
        transport = FixtureTransport([chat_body("safe text one"),
                                      chat_body("safe text two")])
        nset = build_normal_set(forget, None, "endpoint", 2,
                                endpoint=endpoint_cfg, transport=transport)
        assert [c.answer for c in nset.companions["r0"]] == [
            "safe text one", "safe text two"
        ]

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            build_normal_set([FORGET], RETAIN, "telepathy", 2)

    def test_similarity_requires_retain(self):
        with pytest.raises(ValueError, match="retain"):
            build_normal_set([FORGET], None, "similarity", 2)

    def test_companion_count_enforced(self):
        with pytest.raises(ValueError, match="expected"):
            NormalSet(companions={"a": [Companion(question="q", answer="a",
                                                  provenance="fallback")]}, size=2)
