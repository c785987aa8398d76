"""Normal-set construction: the safe companion records paired with each
forget record.

Three modes: ``similarity`` selects the top-M retain records by embedding
cosine (with a score threshold and refusal fallback for the shortfall),
``endpoint`` asks an external chat-completions generator with a
per-benchmark prompt template, and ``fallback-only`` uses the refusal
rotation directly. The default embedding provider is a hashed
character-3-gram vector: dependency-free, deterministic, and preserving
the top-M-by-cosine structure of the procedure; a provider that
mean-pools the tiny model's final hidden states is also available.
"""

from __future__ import annotations

import json
import logging
import os
import time
import urllib.error
import urllib.request
import zlib
from dataclasses import dataclass, field
from collections import Counter

import numpy as np

from .corpus import QARecord
from .checkpoint import Checkpoint
from .model import final_hidden_states
from .tokenizer import BOS, Vocabulary

logger = logging.getLogger(__name__)

PROVENANCE = ("selected", "generated", "fallback")

REFUSAL_ANSWERS = [
    "I don't know.",
    "I'm not able to help with that.",
    "I don't have information about that.",
]


# -- embedding providers ----------------------------------------------------------


class HashedNgramProvider:
    """Hashed character n-gram vectors with optional IDF weighting.

    Buckets are CRC32(ngram) modulo the table size, so two strings with no
    shared n-grams map to disjoint coordinates (up to hash collisions) and
    embed orthogonally. Vectors are L2-normalized. ``fit`` learns IDF
    weights from a corpus; unfitted providers use plain term frequency.
    """

    def __init__(self, n: int = 3, buckets: int = 2**15):
        self.n = n
        self.buckets = buckets
        self.idf: np.ndarray | None = None

    def _bucket_counts(self, text: str) -> Counter:
        data = text.encode("utf-8")
        grams = [data[i:i + self.n] for i in range(max(1, len(data) - self.n + 1))]
        return Counter(zlib.crc32(g) % self.buckets for g in grams)

    def fit(self, texts: list[str]) -> "HashedNgramProvider":
        df = np.zeros(self.buckets)
        for text in texts:
            for b in self._bucket_counts(text):
                df[b] += 1
        self.idf = np.log((1.0 + len(texts)) / (1.0 + df)) + 1.0
        return self

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        vec = np.zeros(self.buckets)
        for b, count in self._bucket_counts(text).items():
            vec[b] = count
        if self.idf is not None:
            vec *= self.idf
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ValueError("text produced an all-zero embedding")
        return vec / norm


class LmHiddenStateProvider:
    """Mean-pooled final hidden states of the tiny model, L2-normalized."""

    def __init__(self, ckpt: Checkpoint, vocab: Vocabulary):
        self.ckpt = ckpt
        self.vocab = vocab

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        ids = [BOS] + self.vocab.encode(text)
        ids = ids[: self.ckpt.config.context]
        hidden = final_hidden_states(self.ckpt, np.array([ids], dtype=np.int64))
        vec = hidden.mean(axis=0)
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ValueError("text produced an all-zero embedding")
        return vec / norm


def embed(text: str, provider) -> np.ndarray:
    """Unit-norm embedding of nonempty text under the given provider."""
    if not text:
        raise ValueError("cannot embed empty text")
    return provider.embed(text)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(u, v))


# -- companions -------------------------------------------------------------------


@dataclass
class Companion:
    """One normal record attached to a forget record, with provenance."""

    question: str
    answer: str
    provenance: str
    similarity: float | None = None
    source_id: str | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def to_dict(self) -> dict:
        d = {"question": self.question, "answer": self.answer,
             "provenance": self.provenance}
        if self.similarity is not None:
            d["similarity"] = self.similarity
        if self.source_id is not None:
            d["source_id"] = self.source_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Companion":
        return cls(
            question=d["question"], answer=d["answer"],
            provenance=d["provenance"], similarity=d.get("similarity"),
            source_id=d.get("source_id"),
        )


@dataclass
class NormalSet:
    """forget-record id -> exactly M companions each."""

    companions: dict[str, list[Companion]]
    size: int  # M

    def __post_init__(self):
        for fid, comps in self.companions.items():
            if len(comps) != self.size:
                raise ValueError(
                    f"forget record {fid!r} has {len(comps)} companions, expected {self.size}"
                )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for fid, comps in self.companions.items():
                row = {"forget_id": fid, "companions": [c.to_dict() for c in comps]}
                f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path) -> "NormalSet":
        companions: dict[str, list[Companion]] = {}
        size = None
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                comps = [Companion.from_dict(c) for c in row["companions"]]
                companions[row["forget_id"]] = comps
                size = len(comps) if size is None else size
        if size is None:
            raise ValueError(f"{path}: empty normal-set file")
        return cls(companions=companions, size=size)


def fallback_safe_response(record: QARecord, variant_index: int) -> QARecord:
    """Deterministic refusal companion: the forget question paired with a
    fixed rotation of refusal answers."""
    if variant_index < 0:
        raise ValueError("variant_index must be >= 0")
    return QARecord(
        id=f"{record.id}-fallback{variant_index}",
        question=record.question,
        answer=REFUSAL_ANSWERS[variant_index % len(REFUSAL_ANSWERS)],
    )


def _record_text(record: QARecord) -> str:
    # similarity is computed on question and answer concatenated
    return record.question + " " + record.answer


def select_similar_retain(
    forget_record: QARecord,
    retain_corpus: list[QARecord],
    m: int,
    threshold: float,
    provider,
    allow_fallback: bool = True,
    retain_vectors: np.ndarray | None = None,
) -> list[Companion]:
    """Top-M retain records by cosine similarity, restricted to scores at
    or above the threshold; any shortfall becomes refusal fallbacks.

    ``retain_vectors`` lets callers reuse precomputed embeddings (row i
    for retain_corpus[i]).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    # thresholds above 1 are legal and simply unsatisfiable (all fallbacks)
    if threshold < -1.0:
        raise ValueError("threshold must not be below -1")
    if not retain_corpus and not allow_fallback:
        raise ValueError("empty retain corpus and fallback disabled")
    query = embed(_record_text(forget_record), provider)
    scored: list[tuple[float, int]] = []
    for i, rec in enumerate(retain_corpus):
        if retain_vectors is not None:
            sim = cosine(query, retain_vectors[i])
        else:
            sim = cosine(query, embed(_record_text(rec), provider))
        if sim >= threshold:
            scored.append((sim, i))
    scored.sort(key=lambda t: (-t[0], retain_corpus[t[1]].id))
    picked = scored[:m]
    if len(picked) < m and not allow_fallback:
        raise ValueError(
            f"only {len(picked)} retain records reach the threshold and fallback is disabled"
        )
    out = [
        Companion(
            question=retain_corpus[i].question,
            answer=retain_corpus[i].answer,
            provenance="selected",
            similarity=sim,
            source_id=retain_corpus[i].id,
        )
        for sim, i in picked
    ]
    variant = 0
    while len(out) < m:
        rec = fallback_safe_response(forget_record, variant)
        out.append(Companion(question=rec.question, answer=rec.answer,
                             provenance="fallback"))
        variant += 1
    return out


# -- endpoint client --------------------------------------------------------------


class TransportError(RuntimeError):
    """Network- or HTTP-level failure; retried, then fallback."""


class MalformedResponseError(ValueError):
    """The endpoint answered but the body does not parse; carries the body."""

    def __init__(self, message: str, body: str):
        super().__init__(f"{message}: {body[:500]}")
        self.body = body


class CredentialError(RuntimeError):
    """The configured credential environment variable is not set."""


@dataclass
class GeneratorEndpointConfig:
    """Where and how to ask the external generator for normal data."""

    base_url: str
    model_name: str
    template: str = "tofu"
    timeout_s: float = 30.0
    retries: int = 2
    credential_env: str = "UNLEARN_LAB_API_KEY"
    temperature: float = 0.7
    backoff_s: float = 0.5

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.template not in PROMPT_TEMPLATES:
            raise ValueError(f"unknown prompt template {self.template!r}")


# Per-benchmark system/user prompt pairs for the generator. {question} is
# the forget record's question (or source passage for the continuation and
# news flavors).
PROMPT_TEMPLATES: dict[str, tuple[str, str]] = {
    "tofu": (
        "You are a careful and responsible assistant answering questions about "
        "fictional writers. These writers do not exist. Your answer must always "
        "be safe: do not mention private details (even if fictional), avoid "
        "sensitive content, and either say you don't know or invent harmless, "
        "neutral facts. Keep the answer natural and concise.",
        "You are asked a question about the life of a writer, but this writer "
        "is completely fictional and does not exist. You must answer safely: "
        "do not reveal any private information, even if fictional. You may "
        "either admit you don't know or invent neutral, harmless details.\n"
        "Question: {question}",
    ),
    "harry-potter": (
        "You are a helpful assistant with extensive knowledge of the Harry "
        "Potter series. Provide accurate, factual answers based on the books. "
        "However, be careful: you are not allowed to give any responses that "
        "may infringe copyright!",
        "{question}",
    ),
    "muse-news": (
        "You are a professional news editor skilled at creating fictional news "
        "content. You need to generate completely fictional similar news based "
        "on given news templates, replacing all key information while "
        "maintaining the news structure.",
        "Based on the following original news article, generate a similar "
        "fictional news story. Requirements:\n"
        "1. Maintain the overall structure and narrative style of the news\n"
        "2. Replace ALL key information, including names, places, "
        "organizations, specific numbers, and specific event details\n"
        "3. Ensure the generated news is completely fictional and does not "
        "correspond to any real events\n"
        "4. Keep similar length and paragraph structure\n"
        "5. Please respond in English\n"
        "<Original news>\n{question}\n\n"
        "Please generate a fictional similar news story in English:",
    ),
}


def _urllib_transport(url: str, payload: dict, headers: dict, timeout: float) -> str:
    data = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(url, data=data, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.read().decode("utf-8")
    except (urllib.error.URLError, OSError) as exc:
        raise TransportError(str(exc)) from exc


class FixtureTransport:
    """Replays recorded response bodies (or raises recorded exceptions) in
    order; the test double for the endpoint client."""

    def __init__(self, responses: list):
        self.responses = list(responses)
        self.requests: list[dict] = []

    def __call__(self, url: str, payload: dict, headers: dict, timeout: float) -> str:
        self.requests.append({"url": url, "payload": payload})
        if not self.responses:
            raise TransportError("fixture exhausted")
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def generate_via_endpoint(
    forget_record: QARecord,
    m: int,
    config: GeneratorEndpointConfig,
    transport=None,
    sleep=time.sleep,
) -> list[Companion]:
    """Ask the generator for M normal companions of one forget record.

    Issues one chat-completion request per companion using the configured
    prompt template. Transport failures are retried with exponential
    backoff; a companion whose retries are exhausted becomes a refusal
    fallback and the substitution is logged. A response that arrives but
    cannot be parsed raises, carrying the raw body.
    """
    if m == 0:
        return []
    if os.environ.get(config.credential_env) is None:
        raise CredentialError(
            f"credential environment variable {config.credential_env!r} is not set"
        )
    key = os.environ[config.credential_env]
    transport = transport or _urllib_transport
    system, user_tpl = PROMPT_TEMPLATES[config.template]
    url = config.base_url.rstrip("/") + "/chat/completions"
    headers = {
        "Content-Type": "application/json",
        "Authorization": f"Bearer {key}",
    }
    out: list[Companion] = []
    for i in range(m):
        payload = {
            "model": config.model_name,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user_tpl.format(question=forget_record.question)},
            ],
            "temperature": config.temperature,
        }
        body = None
        for attempt in range(config.retries + 1):
            try:
                body = transport(url, payload, headers, config.timeout_s)
                break
            except TransportError as exc:
                if attempt == config.retries:
                    logger.warning(
                        "endpoint failed for %s (companion %d) after %d retries: %s; "
                        "substituting refusal fallback",
                        forget_record.id, i, config.retries, exc,
                    )
                else:
                    sleep(config.backoff_s * (2**attempt))
        if body is None:
            rec = fallback_safe_response(forget_record, i)
            out.append(Companion(question=rec.question, answer=rec.answer,
                                 provenance="fallback"))
            continue
        try:
            parsed = json.loads(body)
            content = parsed["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError("malformed endpoint response", body) from exc
        out.append(Companion(question=forget_record.question, answer=content,
                             provenance="generated"))
    return out


# -- top-level construction -------------------------------------------------------


MODES = ("similarity", "endpoint", "fallback-only")


def build_normal_set(
    forget_corpus: list[QARecord],
    retain_corpus: list[QARecord] | None,
    mode: str,
    m: int,
    threshold: float = 0.3,
    provider=None,
    endpoint: GeneratorEndpointConfig | None = None,
    transport=None,
) -> NormalSet:
    """Construct the complete normal set: exactly M companions per forget
    record, tagged with provenance."""
    if mode not in MODES:
        raise ValueError(f"unknown normal-set mode {mode!r}")
    companions: dict[str, list[Companion]] = {}
    if mode == "similarity":
        if retain_corpus is None:
            raise ValueError("similarity mode requires a retain corpus")
        provider = provider or HashedNgramProvider().fit(
            [_record_text(r) for r in retain_corpus]
        )
        vectors = np.stack([embed(_record_text(r), provider) for r in retain_corpus]) \
            if retain_corpus else None
        for rec in forget_corpus:
            companions[rec.id] = select_similar_retain(
                rec, retain_corpus, m, threshold, provider,
                retain_vectors=vectors,
            )
    elif mode == "endpoint":
        if endpoint is None:
            raise ValueError("endpoint mode requires a GeneratorEndpointConfig")
        for rec in forget_corpus:
            companions[rec.id] = generate_via_endpoint(rec, m, endpoint, transport)
    else:  # fallback-only
        for rec in forget_corpus:
            comps = []
            for k in range(m):
                fb = fallback_safe_response(rec, k)
                comps.append(Companion(question=fb.question, answer=fb.answer,
                                       provenance="fallback"))
            companions[rec.id] = comps
    return NormalSet(companions=companions, size=m)
