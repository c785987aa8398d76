"""QA records and the synthetic fictional-author corpus.

Records are question/answer pairs with a paraphrased answer and several
perturbed (wrong) answers, which the probability-ratio and truth-ratio
metrics need. The generator builds a miniature biography benchmark from
template grammars over name/place/genre pools; forget, retain, and
holdout splits are disjoint by author and fully determined by
(spec, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class QARecord:
    id: str
    question: str
    answer: str
    paraphrased_answer: str | None = None
    perturbed_answers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.question or not self.answer:
            raise ValueError(f"record {self.id!r}: question and answer must be nonempty")

    def to_dict(self) -> dict:
        d = {"id": self.id, "question": self.question, "answer": self.answer}
        if self.paraphrased_answer is not None:
            d["paraphrased_answer"] = self.paraphrased_answer
        if self.perturbed_answers:
            d["perturbed_answers"] = list(self.perturbed_answers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QARecord":
        return cls(
            id=d["id"],
            question=d["question"],
            answer=d["answer"],
            paraphrased_answer=d.get("paraphrased_answer"),
            perturbed_answers=list(d.get("perturbed_answers", [])),
        )


def save_corpus(records: list[QARecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def load_corpus(path) -> list[QARecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(QARecord.from_dict(json.loads(line)))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate record ids")
    return records


# -- synthetic corpus -------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    authors: int = 40
    qa_per_author: int = 5
    forget_fraction: float = 0.1
    holdout_authors: int | None = None  # default: max(2, authors // 10)

    def __post_init__(self):
        if self.authors < 1 or self.qa_per_author < 1:
            raise ValueError("author and QA counts must be >= 1")
        if not 0.0 < self.forget_fraction < 1.0:
            raise ValueError("forget_fraction must be in (0, 1)")

    @property
    def holdout_count(self) -> int:
        if self.holdout_authors is not None:
            return self.holdout_authors
        return max(2, self.authors // 10)

    def to_dict(self) -> dict:
        return {
            "authors": self.authors,
            "qa_per_author": self.qa_per_author,
            "forget_fraction": self.forget_fraction,
            "holdout_authors": self.holdout_authors,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**d)


@dataclass
class Corpora:
    forget: list[QARecord]
    retain: list[QARecord]
    holdout: list[QARecord]

    def all_text(self) -> list[str]:
        """Every question and answer string, for tokenizer training."""
        texts = []
        for split in (self.forget, self.retain, self.holdout):
            for rec in split:
                texts.append(rec.question)
                texts.append(rec.answer)
        return texts

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_corpus(self.forget, directory / "forget.jsonl")
        save_corpus(self.retain, directory / "retain.jsonl")
        save_corpus(self.holdout, directory / "holdout.jsonl")

    @classmethod
    def load(cls, directory) -> "Corpora":
        directory = Path(directory)
        return cls(
            forget=load_corpus(directory / "forget.jsonl"),
            retain=load_corpus(directory / "retain.jsonl"),
            holdout=load_corpus(directory / "holdout.jsonl"),
        )


_GIVEN = [
    "Mira", "Tobias", "Anika", "Jorge", "Leila", "Oskar", "Priya", "Declan",
    "Sana", "Viktor", "Noor", "Emil", "Carmen", "Ravi", "Ingrid", "Mateo",
    "Yuki", "Abena", "Lars", "Paloma", "Dmitri", "Farah", "Quinn", "Zofia",
]
_SURNAME = [
    "Valdez", "Okafor", "Lindqvist", "Marchetti", "Haddad", "Kovacs",
    "Thorne", "Abramov", "Sato", "Ferreira", "Nakamura", "Olesen",
    "Baptiste", "Ivanova", "Mensah", "Castellan", "Drummond", "Vasquez",
    "Holloway", "Petrova", "Santiago", "Whitford", "Almeida", "Rask",
]
_CITIES = [
    ("Porto Verde", "Solandia"), ("Kestrel Bay", "Northmark"),
    ("Almora", "Vestria"), ("Junip City", "Caldora"),
    ("Saltmere", "Elbion"), ("Tessaly", "Mirova"),
    ("Windale", "Korvath"), ("Bramblton", "Ostrava"),
    ("Luneth", "Qarthia"), ("Marrowgate", "Drelland"),
    ("Cinder Falls", "Tavria"), ("Opaline", "Hesperia"),
    ("Velwood", "Arkania"), ("Quillhaven", "Bellmora"),
    ("Ashport", "Lysandria"), ("Fernhollow", "Cascadia"),
]
_GENRES = [
    "mystery", "historical", "satire", "travel", "maritime", "gothic",
    "pastoral", "detective", "epistolary", "frontier", "culinary", "polar",
]
_TITLE_ADJ = [
    "Silent", "Amber", "Hollow", "Winter", "Gilded", "Restless", "Saffron",
    "Violet", "Wandering", "Paper", "Iron", "Midnight",
]
_TITLE_NOUN = [
    "Orchard", "Lighthouse", "Cartographer", "Archivist", "Tides", "Meridian",
    "Lantern", "Harvest", "Compass", "Aviary", "Causeway", "Procession",
]
_AWARDS = [
    "Glass Quill Prize", "Meridian Medal", "Larkspur Award",
    "Windrose Honor", "Cobalt Laurel", "Harbor Lights Prize",
    "Juniper Circle Award", "Atlas Literary Medal",
]
_MENTORS = [
    "Helena Birchall", "Gregor Antane", "Simone Vey", "Castor Lund",
    "Odette Marchand", "Bruno Calverley", "Thea Rosmund", "Ilya Dobrev",
]


@dataclass(frozen=True)
class _Author:
    name: str
    city: str
    country: str
    year: int
    genre: str
    debut: str
    award: str
    residence: str
    mentor: str


def _draw_authors(spec: CorpusSpec, rng: np.random.Generator) -> list[_Author]:
    total = len(_GIVEN) * len(_SURNAME)
    if spec.authors > total:
        raise ValueError(f"cannot generate more than {total} unique author names")
    name_idx = rng.choice(total, size=spec.authors, replace=False)
    authors = []
    for idx in name_idx:
        given = _GIVEN[idx // len(_SURNAME)]
        surname = _SURNAME[idx % len(_SURNAME)]
        city, country = _CITIES[rng.integers(len(_CITIES))]
        residence, _ = _CITIES[rng.integers(len(_CITIES))]
        authors.append(_Author(
            name=f"{given} {surname}",
            city=city,
            country=country,
            year=int(1935 + rng.integers(56)),
            genre=_GENRES[rng.integers(len(_GENRES))],
            debut=f"The {_TITLE_ADJ[rng.integers(len(_TITLE_ADJ))]} "
                  f"{_TITLE_NOUN[rng.integers(len(_TITLE_NOUN))]}",
            award=_AWARDS[rng.integers(len(_AWARDS))],
            residence=residence,
            mentor=_MENTORS[rng.integers(len(_MENTORS))],
        ))
    return authors


def _others(pool: list, true_value, rng: np.random.Generator, count: int) -> list:
    """Sample ``count`` distinct pool values different from the true one."""
    candidates = [p for p in pool if p != true_value]
    idx = rng.choice(len(candidates), size=count, replace=False)
    return [candidates[i] for i in idx]


def _qa_for(author: _Author, q_idx: int, rng: np.random.Generator,
            all_names: list[str]) -> tuple[str, str, str, list[str]]:
    """(question, answer, paraphrase, perturbed answers) for one template."""
    a = author
    if q_idx == 0:
        q = f"What is the full name of the author born in {a.city} in {a.year}?"
        ans = f"The author born in {a.city} in {a.year} is named {a.name}."
        para = f"The author born in {a.city} in the year {a.year} is named {a.name}."
        wrong = _others(all_names, a.name, rng, 3)
        perturbed = [f"The author born in {a.city} in {a.year} is named {w}." for w in wrong]
    elif q_idx == 1:
        q = f"In which city was the author {a.name} born?"
        ans = f"{a.name} was born in {a.city}, {a.country}."
        para = f"{a.name} was born in the city of {a.city}, {a.country}."
        wrong = _others([c for c, _ in _CITIES], a.city, rng, 3)
        perturbed = [f"{a.name} was born in {w}, {a.country}." for w in wrong]
    elif q_idx == 2:
        q = f"What genre does {a.name} mainly write?"
        ans = f"{a.name} mainly writes {a.genre} stories."
        para = f"{a.name} mostly writes {a.genre} stories."
        wrong = _others(_GENRES, a.genre, rng, 3)
        perturbed = [f"{a.name} mainly writes {w} stories." for w in wrong]
    elif q_idx == 3:
        q = f"What is the title of the debut novel by {a.name}?"
        ans = f"The debut novel of {a.name} is titled {a.debut}."
        para = f"The debut novel of {a.name} is called {a.debut}."
        titles = [f"The {adj} {noun}" for adj in _TITLE_ADJ for noun in _TITLE_NOUN]
        wrong = _others(titles, a.debut, rng, 3)
        perturbed = [f"The debut novel of {a.name} is titled {w}." for w in wrong]
    elif q_idx == 4:
        q = f"Which literary award did {a.name} receive?"
        ans = f"{a.name} received the {a.award}."
        para = f"{a.name} was awarded the {a.award}."
        wrong = _others(_AWARDS, a.award, rng, 3)
        perturbed = [f"{a.name} received the {w}." for w in wrong]
    elif q_idx == 5:
        q = f"In what year was {a.name} born?"
        ans = f"{a.name} was born in the year {a.year}."
        para = f"{a.name} was born in {a.year}."
        wrong = _others(list(range(1935, 1991)), a.year, rng, 3)
        perturbed = [f"{a.name} was born in the year {w}." for w in wrong]
    elif q_idx == 6:
        q = f"Where does the author {a.name} currently live?"
        ans = f"{a.name} currently lives in {a.residence}."
        para = f"{a.name} presently lives in {a.residence}."
        wrong = _others([c for c, _ in _CITIES], a.residence, rng, 3)
        perturbed = [f"{a.name} currently lives in {w}." for w in wrong]
    elif q_idx == 7:
        q = f"Who was the writing mentor of {a.name}?"
        ans = f"The writing mentor of {a.name} was {a.mentor}."
        para = f"The writing mentor for {a.name} was {a.mentor}."
        wrong = _others(_MENTORS, a.mentor, rng, 3)
        perturbed = [f"The writing mentor of {a.name} was {w}." for w in wrong]
    else:
        raise ValueError(f"no question template for index {q_idx}")
    return q, ans, para, perturbed


MAX_QA_TEMPLATES = 8


def synth_corpus(spec: CorpusSpec, seed: int) -> Corpora:
    """Deterministic miniature author-biography QA corpus.

    Splits are disjoint by author: round(authors * forget_fraction) forget
    authors (error if that rounds to zero), ``holdout_count`` held-out
    authors, and the rest retained. Every record carries a paraphrased
    answer and three perturbed answers that never equal the true one.
    """
    if spec.qa_per_author > MAX_QA_TEMPLATES:
        raise ValueError(
            f"qa_per_author is capped at {MAX_QA_TEMPLATES} distinct templates"
        )
    n_forget = round(spec.authors * spec.forget_fraction)
    if n_forget == 0:
        raise ValueError(
            f"forget fraction {spec.forget_fraction} yields zero forget authors"
        )
    if n_forget + spec.holdout_count >= spec.authors:
        raise ValueError("forget + holdout authors leave no retain authors")
    rng = np.random.default_rng(seed)
    authors = _draw_authors(spec, rng)
    all_names = [a.name for a in authors]
    order = rng.permutation(spec.authors)
    forget_set = set(order[:n_forget])
    holdout_set = set(order[n_forget:n_forget + spec.holdout_count])

    forget, retain, holdout = [], [], []
    for ai, author in enumerate(authors):
        for qi in range(spec.qa_per_author):
            q, ans, para, perturbed = _qa_for(author, qi, rng, all_names)
            rec = QARecord(
                id=f"a{ai:03d}-q{qi}",
                question=q,
                answer=ans,
                paraphrased_answer=para,
                perturbed_answers=perturbed,
            )
            if ai in forget_set:
                forget.append(rec)
            elif ai in holdout_set:
                holdout.append(rec)
            else:
                retain.append(rec)
    return Corpora(forget=forget, retain=retain, holdout=holdout)
