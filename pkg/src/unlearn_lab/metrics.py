"""Forgetting and utility metrics.

Text overlap (LCS-based recall/precision/F1 and 4-gram BLEU), the
probability-ratio and truth-ratio statistics over normalized answer
probabilities, the nine-score harmonic model utility, a two-sample
Kolmogorov-Smirnov forget-quality p-value, verbatim/knowledge
memorization scores, and a loss-based membership-inference AUC with the
relative privacy-leakage score derived from it.

Tokenization for all text metrics: lowercase, whitespace-split,
punctuation retained as attached characters.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .corpus import QARecord
from .tokenizer import BOS, Vocabulary


def tokenize(text: str) -> list[str]:
    return text.lower().split()


# -- text overlap ------------------------------------------------------------------


@dataclass(frozen=True)
class RougeScores:
    recall: float
    precision: float
    f1: float


def _lcs_tokens(a: list[str], b: list[str]) -> int:
    index: dict[str, int] = {}
    ai = np.array([index.setdefault(t, len(index)) for t in a], dtype=np.int64)
    bi = np.array([index.setdefault(t, len(index)) for t in b], dtype=np.int64)
    return int(_kernels.lcs_len(ai, bi))


def rouge_l(candidate: str, reference: str) -> RougeScores:
    """LCS overlap: recall = LCS/|reference|, precision = LCS/|candidate|,
    F1 their harmonic mean; all zero when either side is empty."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return RougeScores(0.0, 0.0, 0.0)
    lcs = _lcs_tokens(cand, ref)
    recall = lcs / len(ref)
    precision = lcs / len(cand)
    if precision + recall == 0:
        return RougeScores(0.0, 0.0, 0.0)
    return RougeScores(recall, precision, 2 * precision * recall / (precision + recall))


def bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    """4-gram BLEU with uniform weights and brevity penalty, no smoothing:
    zero whenever any clipped n-gram precision is zero."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    log_precisions = []
    for n in range(1, max_n + 1):
        cand_ngrams = Counter(tuple(cand[i:i + n]) for i in range(len(cand) - n + 1))
        total = max(len(cand) - n + 1, 0)
        if total == 0:
            return 0.0
        ref_ngrams = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        clipped = sum(min(c, ref_ngrams[g]) for g, c in cand_ngrams.items())
        if clipped == 0:
            return 0.0
        log_precisions.append(math.log(clipped / total))
    brevity = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return brevity * math.exp(sum(log_precisions) / max_n)


# -- probability statistics ---------------------------------------------------------


def answer_probability_ratio(
    correct_prob: float, perturbed_probs: Sequence[float]
) -> float:
    """Normalized correct-answer probability over the summed normalized
    perturbed-answer probabilities."""
    if len(perturbed_probs) == 0:
        raise ValueError("at least one perturbed-answer probability is required")
    denom = float(sum(perturbed_probs))
    if denom <= 0:
        raise ValueError("perturbed probabilities sum to zero")
    return float(correct_prob) / denom


def truth_ratio(perturbed_probs: Sequence[float], paraphrase_prob: float) -> float:
    """Geometric mean of the normalized perturbed-answer probabilities over
    the paraphrased answer's normalized probability."""
    if len(perturbed_probs) == 0:
        raise ValueError("at least one perturbed-answer probability is required")
    if paraphrase_prob <= 0:
        raise ValueError("paraphrase probability must be positive")
    probs = np.asarray(perturbed_probs, dtype=np.float64)
    if np.any(probs == 0):
        return 0.0
    geo = float(np.exp(np.log(probs).mean()))
    return geo / float(paraphrase_prob)


def model_utility(scores: Sequence[float]) -> float:
    """Harmonic mean of the nine utility scores; zero annihilates."""
    if len(scores) != 9:
        raise ValueError(f"model utility takes nine scores, got {len(scores)}")
    for s in scores:
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"utility score {s} outside [0, 1]")
    if any(s == 0.0 for s in scores):
        return 0.0
    return len(scores) / sum(1.0 / s for s in scores)


# -- forget quality (two-sample KS) ---------------------------------------------------


def ks_statistic(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """Two-sample KS statistic sup |F_a - F_b| with tie handling."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64))
    b = np.sort(np.asarray(sample_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test requires nonempty samples")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def kolmogorov_pvalue(d_stat: float, n: int, m: int, terms: int = 100) -> float:
    """Asymptotic two-sample KS p-value: Q(lambda) with
    lambda = D * sqrt(nm / (n + m)), series truncated at ``terms``."""
    lam = d_stat * math.sqrt(n * m / (n + m))
    if lam < 1e-12:
        return 1.0
    total = 0.0
    for k in range(1, terms + 1):
        total += (-1.0) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam)
    return min(1.0, max(0.0, 2.0 * total))


def forget_quality(
    truth_ratios_unlearned: Sequence[float], truth_ratios_retained: Sequence[float]
) -> float:
    """KS p-value comparing truth-ratio distributions of the unlearned and
    retained models; higher means harder to distinguish."""
    d = ks_statistic(truth_ratios_unlearned, truth_ratios_retained)
    return kolmogorov_pvalue(d, len(truth_ratios_unlearned), len(truth_ratios_retained))


def fq_gap(
    unlearned_scores: tuple[float, float], retained_scores: tuple[float, float]
) -> float:
    """Sum of absolute BLEU and LCS-recall differences between the two
    models on the forget prompts; 0 when the models score identically.
    Each argument is a (bleu, rouge_l) pair."""
    bu, ru = unlearned_scores
    br, rr = retained_scores
    return abs(bu - br) + abs(ru - rr)


# -- memorization scores ---------------------------------------------------------------


def _generate_all(model, prompts: list[list[int]], max_new: int) -> list[list[int]]:
    """Greedy continuations for every prompt, batched when the model
    supports it."""
    if hasattr(model, "generate_batch"):
        out = []
        for start in range(0, len(prompts), 32):
            out.extend(model.generate_batch(prompts[start:start + 32], max_new))
        return out
    return [model.generate(p, max_new=max_new) for p in prompts]


def verbmem(
    model,
    vocab: Vocabulary,
    records: list[QARecord],
    prefix_len: int = 32,
    warn=None,
) -> float:
    """Verbatim memorization: continue the first ``prefix_len`` tokens of
    each record's text greedily and score the continuation against the
    truth with LCS F1, averaged and scaled to [0, 100].

    Records too short to split are skipped with a warning; an all-skipped
    corpus is an error.
    """
    prompts, continuations = [], []
    for rec in records:
        tokens = vocab.encode(rec.question + "\n" + rec.answer)
        if len(tokens) < prefix_len + 1:
            if warn is not None:
                warn(f"record {rec.id} shorter than prefix {prefix_len}; skipped")
            continue
        prompts.append([BOS] + tokens[:prefix_len])
        continuations.append(tokens[prefix_len:])
    if not prompts:
        raise ValueError("every record was shorter than the prefix length")
    budget = max(len(c) for c in continuations)
    gens = _generate_all(model, prompts, budget)
    scores = [
        rouge_l(vocab.decode(g[: len(c)]), vocab.decode(c)).f1
        for g, c in zip(gens, continuations)
    ]
    return 100.0 * float(np.mean(scores))


def knowmem(
    model,
    vocab: Vocabulary,
    records: list[QARecord],
    max_new: int = 32,
) -> float:
    """Knowledge memorization: greedy answers to each question scored
    against the reference answer with LCS F1, averaged, scaled to [0, 100]."""
    if not records:
        raise ValueError("empty record set")
    prompts = [[BOS] + vocab.encode(rec.question + "\n") for rec in records]
    gens = _generate_all(model, prompts, max_new)
    scores = [
        rouge_l(vocab.decode(gen), rec.answer).f1
        for gen, rec in zip(gens, records)
    ]
    return 100.0 * float(np.mean(scores))


def utility_preservation(
    model, vocab: Vocabulary, retain_records: list[QARecord], max_new: int = 32
) -> float:
    """Knowledge memorization evaluated on the retain set."""
    return knowmem(model, vocab, retain_records, max_new=max_new)


# -- membership inference ----------------------------------------------------------------


@dataclass
class RocCurve:
    """ROC sweep for a lower-is-member score (mean negative log-likelihood)."""

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


def mia_auc(member_scores: Sequence[float], nonmember_scores: Sequence[float]) -> RocCurve:
    """ROC of 'score <= threshold means member'. AUC follows the pairwise
    rule P(member scores lower) + half the tie mass, computed exactly from
    integer counts."""
    members = np.sort(np.asarray(member_scores, dtype=np.float64))
    nonmembers = np.sort(np.asarray(nonmember_scores, dtype=np.float64))
    if members.size == 0 or nonmembers.size == 0:
        raise ValueError("both score sets must be nonempty")
    n, m = members.size, nonmembers.size
    lo = np.searchsorted(nonmembers, members, side="left")
    hi = np.searchsorted(nonmembers, members, side="right")
    wins = int((m - hi).sum())
    ties = int((hi - lo).sum())
    auc = (wins + 0.5 * ties) / (n * m)
    thresholds = np.unique(np.concatenate([members, nonmembers]))
    tpr = np.searchsorted(members, thresholds, side="right") / n
    fpr = np.searchsorted(nonmembers, thresholds, side="right") / m
    return RocCurve(thresholds=thresholds, tpr=tpr, fpr=fpr, auc=float(auc))


def privleak(auc_unlearned: float, auc_retrained: float) -> float:
    """Relative AUC change of the membership attack, scaled by 100."""
    if auc_retrained <= 0:
        raise ValueError("retrained AUC must be positive")
    return 100.0 * (auc_unlearned - auc_retrained) / auc_retrained


# -- report ------------------------------------------------------------------------------


CSV_COLUMNS = [
    "FQ", "MU", "F-RL", "R-RL", "FQ-Gap", "PPL",
    "VerbMem", "KnowMem_f", "KnowMem_r", "PrivLeak",
]


@dataclass
class MetricReport:
    """The full evaluation vector for one unlearned model.

    ``holdout_rouge`` is the desk-scale stand-in for the zero-shot
    accuracy suite (held-out-author QA recall), reported under its own
    name to avoid conflation. ``perplexity`` is retain-set perplexity and
    may be infinite for diverged runs.
    """

    forget_quality: float
    model_utility: float
    forget_rouge: float
    retain_rouge: float
    fq_gap: float
    perplexity: float
    bleu: float
    verbmem: float
    knowmem_forget: float
    knowmem_retain: float
    privleak: float
    holdout_rouge: float = 0.0
    inputs_digest: str = ""

    def validate(self) -> None:
        checks = [
            ("forget_quality", self.forget_quality, 0.0, 1.0),
            ("model_utility", self.model_utility, 0.0, 1.0),
            ("forget_rouge", self.forget_rouge, 0.0, 1.0),
            ("retain_rouge", self.retain_rouge, 0.0, 1.0),
            ("bleu", self.bleu, 0.0, 1.0),
            ("verbmem", self.verbmem, 0.0, 100.0),
            ("knowmem_forget", self.knowmem_forget, 0.0, 100.0),
            ("knowmem_retain", self.knowmem_retain, 0.0, 100.0),
            ("holdout_rouge", self.holdout_rouge, 0.0, 1.0),
        ]
        for name, value, lo, hi in checks:
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        if not (self.perplexity >= 1.0):  # inf allowed, nan rejected
            raise ValueError(f"perplexity={self.perplexity} below 1")

    def to_dict(self) -> dict:
        return {
            "forget_quality": self.forget_quality,
            "model_utility": self.model_utility,
            "forget_rouge": self.forget_rouge,
            "retain_rouge": self.retain_rouge,
            "fq_gap": self.fq_gap,
            "perplexity": self.perplexity,
            "bleu": self.bleu,
            "verbmem": self.verbmem,
            "knowmem_forget": self.knowmem_forget,
            "knowmem_retain": self.knowmem_retain,
            "privleak": self.privleak,
            "holdout_rouge": self.holdout_rouge,
            "inputs_digest": self.inputs_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def csv_row(self) -> list[str]:
        values = [
            self.forget_quality, self.model_utility, self.forget_rouge,
            self.retain_rouge, self.fq_gap, self.perplexity, self.verbmem,
            self.knowmem_forget, self.knowmem_retain, self.privleak,
        ]
        return [repr(v) for v in values]

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()
