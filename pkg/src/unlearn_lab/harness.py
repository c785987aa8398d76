"""Config-driven pipeline: synthesize corpus, finetune to memorization,
build the normal set, unlearn (single rate or sweep), evaluate, report.

Every stage persists its outputs under the run directory and records
content hashes in the manifest, so re-running a completed stage is a
no-op, deleting evaluation outputs and re-running reproduces them without
retraining, and identical (config, seed) pairs produce byte-identical
manifests, checkpoints, and tables. Wall-clock timings are stored in a
sidecar file so the manifest itself stays deterministic.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, ModelConfig
from .corpus import Corpora, CorpusSpec, QARecord, synth_corpus
from .metrics import (
    MetricReport,
    bleu,
    forget_quality,
    fq_gap,
    knowmem,
    mia_auc,
    model_utility,
    privleak,
    rouge_l,
    truth_ratio,
    verbmem,
)
from .model import (
    CheckpointModel,
    SequenceBatch,
    encode_example,
    generate,
    make_batch,
    perplexity,
    sft_loss,
)
from .normal_data import (
    REFUSAL_ANSWERS,
    GeneratorEndpointConfig,
    NormalSet,
    build_normal_set,
)
from .objectives import (
    LossBreakdown,
    UnlearnMethodConfig,
    WhpModel,
    flat_loss,
    gradient_ascent_loss,
    gradient_difference_loss,
    kl_regularized_loss,
    preference_loss,
    random_completion_loss,
    sga_loss,
    task_vector_unlearn,
)
from .smoothing import GradientBundle, SignProfile, optimal_smoothing_rate, sign_profile
from .tokenizer import Vocabulary

STAGES = ("synth", "finetune", "normal", "unlearn", "eval")

# incremented on every optimizer step; tests use it to assert that
# idempotent re-runs perform zero training
TRAIN_STEP_COUNTER = 0


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- configuration ----------------------------------------------------------------


@dataclass
class FinetuneSettings:
    lr: float = 3e-3
    batch_size: int = 32
    max_epochs: int = 150
    target_forget_rouge: float = 0.9
    check_every: int = 5

    def to_dict(self):
        return asdict(self)


@dataclass
class UnlearnSettings:
    epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 32
    guard_every: int = 1  # epochs between divergence-guard perplexity checks

    def to_dict(self):
        return asdict(self)


@dataclass
class NormalSettings:
    mode: str = "similarity"
    companions: int = 3
    threshold: float = 0.3
    template: str = "tofu"
    endpoint: dict | None = None

    def to_dict(self):
        return asdict(self)


@dataclass
class EvalSettings:
    verbmem_prefix: int = 32
    knowmem_max_new: int = 32
    gen_max_new: int = 48
    divergence_ppl: float = 1e6

    def to_dict(self):
        return asdict(self)


@dataclass
class ExperimentConfig:
    out_dir: str
    seed: int = 0
    stages: list[str] = field(default_factory=lambda: list(STAGES))
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: dict = field(default_factory=lambda: {
        "vocab_size": 512, "dim": 64, "layers": 2, "heads": 2, "context": 128,
    })
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)
    normal: NormalSettings = field(default_factory=NormalSettings)
    method: UnlearnMethodConfig = field(default_factory=UnlearnMethodConfig)
    unlearn: UnlearnSettings = field(default_factory=UnlearnSettings)
    sweep_r: list[float] | None = None
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        for stage in self.stages:
            if stage not in STAGES:
                raise ValueError(f"unknown stage {stage!r}")
        if self.method.method == "SGA" and not self.rates():
            raise ValueError("SGA requires a nonempty rate list")
        if (self.method.method == "SGA"
                and self.method.companions > self.normal.companions):
            raise ValueError(
                f"method needs {self.method.companions} companions per record "
                f"but the normal set is built with {self.normal.companions}"
            )

    def rates(self) -> list[float]:
        """The rate list this run covers: the sweep, or the single
        configured rate."""
        if self.sweep_r is not None:
            return list(self.sweep_r)
        return [self.method.rate]

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "seed": self.seed,
            "stages": list(self.stages),
            "corpus": self.corpus.to_dict(),
            "model": dict(self.model),
            "finetune": self.finetune.to_dict(),
            "normal": self.normal.to_dict(),
            "method": self.method.to_dict(),
            "unlearn": self.unlearn.to_dict(),
            "sweep_r": None if self.sweep_r is None else list(self.sweep_r),
            "eval": self.eval.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            out_dir=d["out_dir"],
            seed=d.get("seed", 0),
            stages=list(d.get("stages", STAGES)),
            corpus=CorpusSpec.from_dict(d.get("corpus", {})),
            model=dict(d.get("model", {"vocab_size": 512, "dim": 64,
                                       "layers": 2, "heads": 2, "context": 128})),
            finetune=FinetuneSettings(**d.get("finetune", {})),
            normal=NormalSettings(**d.get("normal", {})),
            method=UnlearnMethodConfig.from_dict(d.get("method", {})),
            unlearn=UnlearnSettings(**d.get("unlearn", {})),
            sweep_r=d.get("sweep_r"),
            eval=EvalSettings(**d.get("eval", {})),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# -- manifest ---------------------------------------------------------------------


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config: dict
    config_digest: str
    files: dict = field(default_factory=dict)        # relpath -> sha256
    checkpoints: dict = field(default_factory=dict)  # name -> relpath
    metrics: dict = field(default_factory=dict)      # run key -> MetricReport dict
    run_info: dict = field(default_factory=dict)     # run key -> unlearn diagnostics
    stages_done: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)   # stage -> seconds (sidecar)

    MANIFEST_NAME = "manifest.json"
    TIMINGS_NAME = "timings.json"

    def record_file(self, out_dir, path) -> None:
        rel = str(Path(path).relative_to(out_dir))
        self.files[rel] = _sha256_file(path)

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        payload = {
            "config": self.config,
            "config_digest": self.config_digest,
            "files": self.files,
            "checkpoints": self.checkpoints,
            "metrics": self.metrics,
            "run_info": self.run_info,
            "stages_done": self.stages_done,
        }
        with open(out_dir / self.MANIFEST_NAME, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        with open(out_dir / self.TIMINGS_NAME, "w", encoding="utf-8") as f:
            json.dump(self.wall_clock, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, out_dir) -> "RunManifest":
        out_dir = Path(out_dir)
        with open(out_dir / cls.MANIFEST_NAME, encoding="utf-8") as f:
            payload = json.load(f)
        wall = {}
        timings = out_dir / cls.TIMINGS_NAME
        if timings.exists():
            with open(timings, encoding="utf-8") as f:
                wall = json.load(f)
        return cls(
            config=payload["config"],
            config_digest=payload["config_digest"],
            files=payload["files"],
            checkpoints=payload["checkpoints"],
            metrics=payload["metrics"],
            run_info=payload["run_info"],
            stages_done=payload["stages_done"],
            wall_clock=wall,
        )

    def verify(self, out_dir) -> None:
        """Every referenced file exists and matches its recorded hash."""
        out_dir = Path(out_dir)
        for rel, digest in self.files.items():
            path = out_dir / rel
            if not path.exists():
                raise FileNotFoundError(f"manifest references missing file {rel}")
            actual = _sha256_file(path)
            if actual != digest:
                raise ValueError(
                    f"{rel}: content hash {actual[:12]} != recorded {digest[:12]}"
                )


def run_key(method: str, rate: float | None = None) -> str:
    if method == "SGA":
        return f"SGA_r{rate:+g}"
    return method


# -- training loops ---------------------------------------------------------------


def _encode_records(vocab: Vocabulary, records: list[QARecord]):
    return [encode_example(vocab, r.question, r.answer) for r in records]


def _batches_of(examples, batch_size, context, order=None) -> list[SequenceBatch]:
    idx = order if order is not None else np.arange(len(examples))
    return [
        make_batch([examples[i] for i in idx[s:s + batch_size]], context)
        for s in range(0, len(idx), batch_size)
    ]


def _train_steps(
    ckpt: Checkpoint,
    examples,
    steps: int,
    batch_size: int,
    lr: float,
    context: int,
    rng: np.random.Generator,
) -> Checkpoint:
    """Run exactly ``steps`` supervised updates with per-epoch reshuffles."""
    global TRAIN_STEP_COUNTER
    done = 0
    while done < steps:
        order = rng.permutation(len(examples))
        for batch in _batches_of(examples, batch_size, context, order):
            taped = sft_loss(ckpt, batch)
            if not np.isfinite(taped.value):
                raise ValueError(f"non-finite training loss: {taped.value}")
            ckpt = ckpt.adamw_update(taped.grad(), lr)
            TRAIN_STEP_COUNTER += 1
            done += 1
            if done >= steps:
                return ckpt
    return ckpt


def _mean_forget_rouge(ckpt, vocab, records, max_new) -> float:
    from .model import generate_batch

    prompts = [encode_example(vocab, r.question, r.answer)[0] for r in records]
    gens = generate_batch(ckpt, prompts, max_new)
    scores = [
        rouge_l(vocab.decode(g), rec.answer).recall
        for g, rec in zip(gens, records)
    ]
    return float(np.mean(scores))


def finetune_to_memorization(
    cfg: ExperimentConfig, model_cfg: ModelConfig, corpora: Corpora, vocab: Vocabulary
) -> tuple[Checkpoint, Checkpoint, int]:
    """Train the original model on forget+retain until the forget split is
    reproduced (greedy recall >= target), then train the retained
    reference from the same initialization on retain data only for the
    same number of steps. Returns (original, retained, steps)."""
    global TRAIN_STEP_COUNTER
    ft = cfg.finetune
    train_examples = _encode_records(vocab, corpora.forget + corpora.retain)
    ckpt = Checkpoint.init(model_cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    steps_per_epoch = (len(train_examples) + ft.batch_size - 1) // ft.batch_size
    steps_done = 0
    epochs_done = 0
    while epochs_done < ft.max_epochs:
        span = min(ft.check_every, ft.max_epochs - epochs_done)
        ckpt = _train_steps(
            ckpt, train_examples, span * steps_per_epoch, ft.batch_size, ft.lr,
            model_cfg.context, rng,
        )
        steps_done += span * steps_per_epoch
        epochs_done += span
        score = _mean_forget_rouge(ckpt, vocab, corpora.forget, cfg.eval.gen_max_new)
        if score >= ft.target_forget_rouge:
            break
    original = ckpt.with_provenance("finetuned")
    retained = _train_steps(
        Checkpoint.init(model_cfg),
        _encode_records(vocab, corpora.retain),
        steps_done, ft.batch_size, ft.lr, model_cfg.context,
        np.random.default_rng([cfg.seed, 1]),
    ).with_provenance("retained")
    return original, retained, steps_done


# -- unlearning -------------------------------------------------------------------


def _refusal_examples(vocab, records):
    return [
        encode_example(vocab, rec.question, REFUSAL_ANSWERS[i % len(REFUSAL_ANSWERS)])
        for i, rec in enumerate(records)
    ]


def _random_completion_examples(vocab, forget_records, retain_records, seed):
    rng = np.random.default_rng([seed, 4])
    picks = rng.integers(len(retain_records), size=len(forget_records))
    return [
        encode_example(vocab, rec.question, retain_records[int(p)].answer)
        for rec, p in zip(forget_records, picks)
    ]


class _RetainCycler:
    """Deterministic endless stream of retain batches."""

    def __init__(self, examples, batch_size, context, seed):
        self.examples = examples
        self.batch_size = batch_size
        self.context = context
        self.rng = np.random.default_rng([seed, 5])
        self.queue: list[int] = []

    def next_batch(self, size: int | None = None) -> SequenceBatch:
        size = size or self.batch_size
        while len(self.queue) < size:
            self.queue.extend(self.rng.permutation(len(self.examples)).tolist())
        take, self.queue = self.queue[:size], self.queue[size:]
        return make_batch([self.examples[i] for i in take], self.context)


def unlearn_run(
    cfg: ExperimentConfig,
    method_cfg: UnlearnMethodConfig,
    original: Checkpoint,
    corpora: Corpora,
    vocab: Vocabulary,
    normal_set: NormalSet | None,
) -> tuple[Checkpoint, dict]:
    """One unlearning run from the finetuned checkpoint.

    Gradient methods loop AdamW on the method's objective over forget
    batches (auxiliary batches built per method); the parameter-edit
    methods train a reinforced model first. A retain-perplexity
    divergence guard halts runs whose retain PPL explodes, recording the
    step; the run still returns its (diverged) checkpoint.
    """
    global TRAIN_STEP_COUNTER
    us = cfg.unlearn
    context = original.config.context
    method = method_cfg.method

    info: dict = {
        "method": method, "rate": method_cfg.rate, "steps": 0,
        "diverged": False, "divergence_step": None,
    }

    if method in ("TaskVector", "WHP"):
        reinforced = _train_steps(
            original.clone(), _encode_records(vocab, corpora.forget),
            us.epochs * max(1, (len(corpora.forget) + us.batch_size - 1) // us.batch_size),
            us.batch_size, us.lr, context, np.random.default_rng([cfg.seed, 3]),
        ).with_provenance("unlearned")
        info["steps"] = reinforced.step_count - original.step_count
        if method == "WHP":
            info["alpha"] = method_cfg.alpha
            info["whp_reinforced"] = True
            return reinforced, info
        theta = task_vector_unlearn(original.theta, reinforced.theta)
        out = Checkpoint(config=original.config, theta=theta,
                         step_count=original.step_count, provenance="unlearned")
        return out, info

    forget_examples = _encode_records(vocab, corpora.forget)
    retain_examples = _encode_records(vocab, corpora.retain)
    refusal_examples = _refusal_examples(vocab, corpora.forget)
    random_examples = _random_completion_examples(
        vocab, corpora.forget, corpora.retain, cfg.seed
    )
    normal_examples = None
    if method == "SGA" and method_cfg.companions > 0:
        if normal_set is None:
            raise ValueError("SGA requires a normal set")
        normal_examples = [
            [
                encode_example(vocab, comp.question, comp.answer)
                for comp in normal_set.companions[rec.id][: method_cfg.companions]
            ]
            for rec in corpora.forget
        ]

    retain_cycler = _RetainCycler(retain_examples, us.batch_size, context, cfg.seed)
    reference = original  # frozen pre-unlearning model for KL/DPO/LLMU

    ckpt = original.clone()
    ckpt.adam_m = None
    ckpt.adam_v = None
    ckpt.step_count = 0
    rng = np.random.default_rng([cfg.seed, 3])

    retain_eval_batches = _batches_of(retain_examples, 32, context)

    def make_loss(batch_idx) -> LossBreakdown:
        fb = make_batch([forget_examples[i] for i in batch_idx], context)
        size = len(batch_idx)
        if method == "SGA":
            nbs = []
            if normal_examples is not None:
                nbs = [
                    make_batch([normal_examples[i][k] for i in batch_idx], context)
                    for k in range(method_cfg.companions)
                ]
            return sga_loss(ckpt, fb, nbs, method_cfg)
        if method == "GA":
            return gradient_ascent_loss(ckpt, fb)
        if method == "GD":
            return gradient_difference_loss(
                ckpt, fb, retain_cycler.next_batch(size), method_cfg.retain_weight
            )
        if method == "KL":
            return kl_regularized_loss(
                ckpt, reference, fb, retain_cycler.next_batch(size),
                method_cfg.retain_weight,
            )
        if method in ("PO", "DPO", "DPO-RT", "NPO", "NPO-RT"):
            eb = make_batch([refusal_examples[i] for i in batch_idx], context)
            rb = retain_cycler.next_batch(size) if method in ("PO", "DPO-RT", "NPO-RT") else None
            return preference_loss(
                method, ckpt, fb, refusal_batch=eb, retain_batch=rb,
                reference=reference if method.startswith("DPO") else None,
                beta=method_cfg.beta, retain_weight=method_cfg.retain_weight,
            )
        if method in ("Mismatch", "LLMU"):
            rnd = make_batch([random_examples[i] for i in batch_idx], context)
            return random_completion_loss(
                method, ckpt, fb, rnd, retain_cycler.next_batch(size),
                reference=reference if method == "LLMU" else None,
                epsilon=method_cfg.epsilon, retain_weight=method_cfg.retain_weight,
            )
        if method == "FLAT":
            eb = make_batch([refusal_examples[i] for i in batch_idx], context)
            return flat_loss(ckpt, fb, eb, method_cfg.divergence)
        raise ValueError(f"method {method!r} has no gradient loop")

    steps = 0
    for epoch in range(us.epochs):
        order = rng.permutation(len(forget_examples))
        for s in range(0, len(order), us.batch_size):
            breakdown = make_loss(order[s:s + us.batch_size])
            if not np.isfinite(breakdown.value):
                info["diverged"] = True
                info["divergence_step"] = steps
                info["steps"] = steps
                return ckpt.with_provenance("unlearned"), info
            ckpt = ckpt.adamw_update(breakdown.grad(), us.lr)
            TRAIN_STEP_COUNTER += 1
            steps += 1
        if (epoch + 1) % us.guard_every == 0 or epoch + 1 == us.epochs:
            ppl = perplexity(ckpt, retain_eval_batches)
            if ppl > cfg.eval.divergence_ppl:
                info["diverged"] = True
                info["divergence_step"] = steps
                break
    info["steps"] = steps
    return ckpt.with_provenance("unlearned"), info


# -- evaluation -------------------------------------------------------------------


def _score_normalized(model, vocab, pairs) -> np.ndarray:
    """Normalized sequence probabilities P(a|q)^(1/|a|) for (question,
    answer-text) pairs, scored in chunks."""
    examples = [encode_example(vocab, q, a) for q, a in pairs]
    out = np.empty(len(examples))
    at = 0
    for start in range(0, len(examples), 64):
        chunk = examples[start:start + 64]
        out[at:at + len(chunk)] = model.score_batch(chunk)
        at += len(chunk)
    return np.exp(out)


def _truth_ratios(model, vocab, records) -> list[float]:
    pairs = []
    spans = []
    for rec in records:
        para = rec.paraphrased_answer or rec.answer
        start = len(pairs)
        pairs.extend((rec.question, alt) for alt in rec.perturbed_answers)
        pairs.append((rec.question, para))
        spans.append((start, len(rec.perturbed_answers)))
    probs = _score_normalized(model, vocab, pairs)
    ratios = []
    for start, n_pert in spans:
        ratios.append(truth_ratio(probs[start:start + n_pert], probs[start + n_pert]))
    return ratios


def _answer_nll(model, vocab, records) -> list[float]:
    examples = [encode_example(vocab, r.question, r.answer) for r in records]
    return list(-np.asarray(model.score_batch(examples)))


def _generations(model, vocab, records, max_new) -> list[str]:
    prompts = [encode_example(vocab, r.question, r.answer)[0] for r in records]
    texts = []
    for start in range(0, len(prompts), 32):
        chunk = model.generate_batch(prompts[start:start + 32], max_new)
        texts.extend(vocab.decode(ids) for ids in chunk)
    return texts


def _utility_scores(model, vocab, records, gens) -> tuple[float, float, float]:
    """(mean normalized answer prob, mean truth-derived score, mean recall)
    over one utility subset."""
    answer_probs = _score_normalized(
        model, vocab, [(r.question, r.answer) for r in records]
    )
    ratios = _truth_ratios(model, vocab, records)
    truth_scores = [min(1.0, max(0.0, 1.0 - t)) for t in ratios]
    recalls = [rouge_l(gen, rec.answer).recall for rec, gen in zip(records, gens)]
    return (
        float(np.mean(answer_probs)),
        float(np.mean(truth_scores)),
        float(np.mean(recalls)),
    )


@dataclass
class RetainedBaseline:
    """Retained-model quantities reused across every evaluation."""

    forget_bleu: float
    forget_rouge: float
    truth_ratios_forget: list[float]
    mia_auc: float
    verbmem_forget: float
    knowmem_forget: float
    knowmem_retain: float


def compute_retained_baseline(
    retained: Checkpoint, corpora: Corpora, vocab: Vocabulary, ev: EvalSettings
) -> RetainedBaseline:
    model = CheckpointModel(retained)
    gens = _generations(model, vocab, corpora.forget, ev.gen_max_new)
    bleus = [bleu(g, r.answer) for g, r in zip(gens, corpora.forget)]
    recalls = [rouge_l(g, r.answer).recall for g, r in zip(gens, corpora.forget)]
    member = _answer_nll(model, vocab, corpora.forget)
    nonmember = _answer_nll(model, vocab, corpora.holdout)
    return RetainedBaseline(
        forget_bleu=float(np.mean(bleus)),
        forget_rouge=float(np.mean(recalls)),
        truth_ratios_forget=_truth_ratios(model, vocab, corpora.forget),
        mia_auc=mia_auc(member, nonmember).auc,
        verbmem_forget=verbmem(model, vocab, corpora.forget, ev.verbmem_prefix),
        knowmem_forget=knowmem(model, vocab, corpora.forget, ev.knowmem_max_new),
        knowmem_retain=knowmem(model, vocab, corpora.retain, ev.knowmem_max_new),
    )


def evaluate_model(
    model,
    corpora: Corpora,
    vocab: Vocabulary,
    baseline: RetainedBaseline,
    ev: EvalSettings,
    context: int,
    inputs_digest: str = "",
) -> MetricReport:
    """The full metric vector for one (possibly wrapped) model."""
    forget_gens = _generations(model, vocab, corpora.forget, ev.gen_max_new)
    retain_gens = _generations(model, vocab, corpora.retain, ev.gen_max_new)
    holdout_gens = _generations(model, vocab, corpora.holdout, ev.gen_max_new)

    forget_recall = float(np.mean(
        [rouge_l(g, r.answer).recall for g, r in zip(forget_gens, corpora.forget)]
    ))
    retain_recall = float(np.mean(
        [rouge_l(g, r.answer).recall for g, r in zip(retain_gens, corpora.retain)]
    ))
    holdout_recall = float(np.mean(
        [rouge_l(g, r.answer).recall for g, r in zip(holdout_gens, corpora.holdout)]
    ))
    forget_bleu = float(np.mean(
        [bleu(g, r.answer) for g, r in zip(forget_gens, corpora.forget)]
    ))

    ratios = _truth_ratios(model, vocab, corpora.forget)
    fq = forget_quality(ratios, baseline.truth_ratios_forget)

    # model utility: nine scores over three retain partitions (the desk
    # substitutes for the retain / real-author / world-fact subsets)
    scores = []
    for part in range(3):
        recs = corpora.retain[part::3]
        gens = retain_gens[part::3]
        scores.extend(_utility_scores(model, vocab, recs, gens))
    mu = model_utility([min(1.0, max(0.0, s)) for s in scores])

    gap = fq_gap((forget_bleu, forget_recall),
                 (baseline.forget_bleu, baseline.forget_rouge))

    retain_examples = _encode_records(vocab, corpora.retain)
    try:
        ppl = model.perplexity(_batches_of(retain_examples, 32, context))
    except (OverflowError, FloatingPointError):
        ppl = float("inf")
    if not np.isfinite(ppl):
        ppl = float("inf")

    member = _answer_nll(model, vocab, corpora.forget)
    nonmember = _answer_nll(model, vocab, corpora.holdout)
    auc_u = mia_auc(member, nonmember).auc

    report = MetricReport(
        forget_quality=fq,
        model_utility=mu,
        forget_rouge=forget_recall,
        retain_rouge=retain_recall,
        fq_gap=gap,
        perplexity=ppl,
        bleu=forget_bleu,
        verbmem=verbmem(model, vocab, corpora.forget, ev.verbmem_prefix),
        knowmem_forget=knowmem(model, vocab, corpora.forget, ev.knowmem_max_new),
        knowmem_retain=knowmem(model, vocab, corpora.retain, ev.knowmem_max_new),
        privleak=privleak(auc_u, baseline.mia_auc),
        holdout_rouge=holdout_recall,
        inputs_digest=inputs_digest,
    )
    report.validate()
    return report


# -- rate probing -------------------------------------------------------------------


def probe_rates(
    ckpt: Checkpoint,
    corpora: Corpora,
    vocab: Vocabulary,
    normal_set: NormalSet,
    slot_count: int,
) -> tuple[SignProfile, list[dict]]:
    """Per-forget-instance gradient bundles at the given checkpoint:
    closed-form optimal rate (where defined) and the sign of <g_f, u>."""
    context = ckpt.config.context
    m = slot_count - 1
    bundles, ids, rows = [], [], []
    for rec in corpora.forget:
        fb = make_batch([encode_example(vocab, rec.question, rec.answer)], context)
        g_f = gradient_ascent_loss(ckpt, fb).grad()
        normals = []
        for comp in normal_set.companions[rec.id][:m]:
            nb = make_batch([encode_example(vocab, comp.question, comp.answer)], context)
            normals.append(sft_loss(ckpt, nb).grad())
        bundle = GradientBundle.from_grads(g_f, normals, slot_count)
        bundles.append(bundle)
        ids.append(rec.id)
        try:
            diag = optimal_smoothing_rate(bundle)
            rows.append({
                "instance_id": rec.id,
                "optimal_rate": diag.rate,
                "inner_product": diag.inner_product,
                "deflection_norm_sq": diag.deflection_norm_sq,
            })
        except ValueError:
            rows.append({"instance_id": rec.id, "optimal_rate": None})
    return sign_profile(bundles, ids), rows


# -- pipeline -----------------------------------------------------------------------


def _paths(out_dir: Path) -> dict:
    return {
        "corpus": out_dir / "corpus",
        "ckpt": out_dir / "ckpt",
        "normal": out_dir / "normal",
        "reports": out_dir / "reports",
    }


def run_pipeline(cfg: ExperimentConfig) -> RunManifest:
    """Execute the configured stages in order, skipping stages whose
    outputs already exist for this exact config digest."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = _paths(out_dir)
    for p in paths.values():
        p.mkdir(parents=True, exist_ok=True)

    digest = cfg.digest()
    manifest = None
    if (out_dir / RunManifest.MANIFEST_NAME).exists():
        try:
            prior = RunManifest.load(out_dir)
            if prior.config_digest == digest:
                manifest = prior
        except (ValueError, KeyError, json.JSONDecodeError):
            manifest = None
    if manifest is None:
        manifest = RunManifest(config=cfg.to_dict(), config_digest=digest)

    stage_order = [s for s in STAGES if s in cfg.stages]
    for stage in stage_order:
        if stage in manifest.stages_done and _stage_outputs_ok(manifest, out_dir, stage):
            continue
        started = time.perf_counter()
        try:
            _run_stage(stage, cfg, manifest, out_dir, paths)
        except Exception as exc:
            manifest.save(out_dir)
            raise StageError(stage, exc) from exc
        manifest.wall_clock[stage] = round(time.perf_counter() - started, 3)
        if stage not in manifest.stages_done:
            manifest.stages_done.append(stage)
        manifest.save(out_dir)
    return manifest


def _stage_outputs_ok(manifest: RunManifest, out_dir: Path, stage: str) -> bool:
    prefix = {
        "synth": "corpus/", "finetune": "ckpt/", "normal": "normal/",
        "unlearn": "ckpt/unlearned", "eval": "reports/",
    }[stage]
    entries = [rel for rel in manifest.files if rel.startswith(prefix)]
    if not entries:
        return False
    for rel in entries:
        path = out_dir / rel
        if not path.exists() or _sha256_file(path) != manifest.files[rel]:
            return False
    return True


def _load_corpora_vocab(paths) -> tuple[Corpora, Vocabulary]:
    corpora = Corpora.load(paths["corpus"])
    vocab = Vocabulary.load(paths["corpus"] / "vocab.json")
    return corpora, vocab


def _model_config(cfg: ExperimentConfig, vocab: Vocabulary) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        vocab_size=vocab.size, dim=m["dim"], layers=m["layers"],
        heads=m["heads"], context=m["context"], seed=cfg.seed,
    )


def _run_stage(stage, cfg, manifest, out_dir, paths):
    if stage == "synth":
        corpora = synth_corpus(cfg.corpus, cfg.seed)
        corpora.save(paths["corpus"])
        vocab = Vocabulary.train(corpora.all_text(), cfg.model["vocab_size"])
        vocab.save(paths["corpus"] / "vocab.json")
        for name in ("forget.jsonl", "retain.jsonl", "holdout.jsonl", "vocab.json"):
            manifest.record_file(out_dir, paths["corpus"] / name)
        return

    corpora, vocab = _load_corpora_vocab(paths)
    model_cfg = _model_config(cfg, vocab)

    if stage == "finetune":
        original, retained, steps = finetune_to_memorization(cfg, model_cfg, corpora, vocab)
        original.save(paths["ckpt"] / "original.ulab")
        retained.save(paths["ckpt"] / "retained.ulab")
        manifest.checkpoints["original"] = "ckpt/original.ulab"
        manifest.checkpoints["retained"] = "ckpt/retained.ulab"
        manifest.run_info["finetune"] = {"steps": steps}
        manifest.record_file(out_dir, paths["ckpt"] / "original.ulab")
        manifest.record_file(out_dir, paths["ckpt"] / "retained.ulab")
        return

    if stage == "normal":
        endpoint = None
        if cfg.normal.endpoint is not None:
            endpoint = GeneratorEndpointConfig(**cfg.normal.endpoint)
        nset = build_normal_set(
            corpora.forget, corpora.retain, cfg.normal.mode,
            cfg.normal.companions, threshold=cfg.normal.threshold,
            endpoint=endpoint,
        )
        nset.save(paths["normal"] / "normal_set.jsonl")
        manifest.record_file(out_dir, paths["normal"] / "normal_set.jsonl")
        return

    if stage == "unlearn":
        if "original" not in manifest.checkpoints:
            raise ValueError("unlearn requires a finetuned checkpoint; run finetune")
        original = Checkpoint.load(out_dir / manifest.checkpoints["original"])
        nset = None
        nset_path = paths["normal"] / "normal_set.jsonl"
        if nset_path.exists():
            nset = NormalSet.load(nset_path)
        for rate in cfg.rates():
            mcfg = UnlearnMethodConfig.from_dict(
                {**cfg.method.to_dict(), "rate": rate}
            )
            ckpt, info = unlearn_run(cfg, mcfg, original, corpora, vocab, nset)
            key = run_key(cfg.method.method, rate)
            rel = f"ckpt/unlearned-{key}.ulab"
            ckpt.save(out_dir / rel)
            manifest.checkpoints[key] = rel
            manifest.run_info[key] = info
            manifest.record_file(out_dir, out_dir / rel)
        return

    if stage == "eval":
        for name in ("original", "retained"):
            if name not in manifest.checkpoints:
                raise ValueError(f"eval requires the {name} checkpoint; run finetune")
        original = Checkpoint.load(out_dir / manifest.checkpoints["original"])
        retained = Checkpoint.load(out_dir / manifest.checkpoints["retained"])
        baseline = compute_retained_baseline(retained, corpora, vocab, cfg.eval)
        context = model_cfg.context

        def digest_for(name):
            blob = json.dumps(
                {"ckpt": manifest.files.get(manifest.checkpoints.get(name, ""), name),
                 "corpus": {k: v for k, v in manifest.files.items()
                            if k.startswith("corpus/")}},
                sort_keys=True,
            ).encode()
            return hashlib.sha256(blob).hexdigest()

        reports = {}
        reports["original"] = evaluate_model(
            CheckpointModel(original), corpora, vocab, baseline, cfg.eval,
            context, digest_for("original"),
        )
        reports["retained"] = evaluate_model(
            CheckpointModel(retained), corpora, vocab, baseline, cfg.eval,
            context, digest_for("retained"),
        )
        for rate in cfg.rates():
            key = run_key(cfg.method.method, rate)
            if key not in manifest.checkpoints:
                raise ValueError(f"eval requires unlearned checkpoint {key}; run unlearn")
            ckpt = Checkpoint.load(out_dir / manifest.checkpoints[key])
            if cfg.method.method == "WHP":
                model = WhpModel(original, ckpt, cfg.method.alpha)
            else:
                model = CheckpointModel(ckpt)
            reports[key] = evaluate_model(
                model, corpora, vocab, baseline, cfg.eval, context, digest_for(key)
            )
        manifest.metrics = {k: r.to_dict() for k, r in reports.items()}
        report_path = paths["reports"] / "metrics.json"
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump(manifest.metrics, f, indent=2, sort_keys=True)
            f.write("\n")
        manifest.record_file(out_dir, report_path)

        # token-probability panel over the first forget record
        rec = corpora.forget[0]
        prompt, ans = encode_example(vocab, rec.question, rec.answer)
        trios = [("original", original), ("retained", retained)]
        for rate in cfg.rates():
            key = run_key(cfg.method.method, rate)
            trios.append((key, Checkpoint.load(out_dir / manifest.checkpoints[key])))
        from .model import token_probability_report

        rows = token_probability_report(trios, prompt, ans, vocab)
        tp_path = paths["reports"] / "token_probs.jsonl"
        with open(tp_path, "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
        manifest.record_file(out_dir, tp_path)
        return

    raise ValueError(f"unknown stage {stage!r}")


# -- reporting ---------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_tables(manifests: list[RunManifest], out_dir) -> dict[str, Path]:
    """Write the benchmark-flavor CSV tables, a full metric CSV, and a
    plain-text summary naming the two best rates. Rows are deduplicated by
    (config digest, run key); manifests without metrics contribute an
    explicit n/a row."""
    if not manifests:
        raise ValueError("export_tables requires at least one manifest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seen = set()
    rows = []
    for man in manifests:
        if not man.metrics:
            key = (man.config_digest, "")
            if key not in seen:
                seen.add(key)
                rows.append({"run": "n/a", "method": "n/a", "rate": None, "report": None})
            continue
        for key in sorted(man.metrics):
            dedup = (man.config_digest, key)
            if dedup in seen:
                continue
            seen.add(dedup)
            info = man.run_info.get(key, {})
            rows.append({
                "run": key,
                "method": info.get("method", man.config["method"]["method"]
                                   if key not in ("original", "retained") else key),
                "rate": info.get("rate"),
                "report": MetricReport.from_dict(man.metrics[key]),
            })

    def write_csv(name, headers, getters):
        path = out_dir / name
        with open(path, "w", encoding="utf-8") as f:
            f.write(",".join(["run", "method", "r"] + headers) + "\n")
            for row in rows:
                rep = row["report"]
                cells = [row["run"], str(row["method"]), _fmt(row["rate"])]
                cells += [_fmt(g(rep)) if rep is not None else "n/a" for g in getters]
                f.write(",".join(cells) + "\n")
        return path

    outputs = {}
    outputs["entity"] = write_csv(
        "table_entity.csv", ["FQ", "MU", "F-RL", "R-RL"],
        [lambda r: r.forget_quality, lambda r: r.model_utility,
         lambda r: r.forget_rouge, lambda r: r.retain_rouge],
    )
    outputs["copyright"] = write_csv(
        "table_copyright.csv", ["FQ-Gap", "PPL", "BLEU"],
        [lambda r: r.fq_gap, lambda r: r.perplexity, lambda r: r.bleu],
    )
    outputs["muse"] = write_csv(
        "table_muse.csv", ["VerbMem", "KnowMem_f", "KnowMem_r", "PrivLeak"],
        [lambda r: r.verbmem, lambda r: r.knowmem_forget,
         lambda r: r.knowmem_retain, lambda r: r.privleak],
    )
    from .metrics import CSV_COLUMNS

    path = out_dir / "metrics.csv"
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(["run", "method", "r"] + CSV_COLUMNS) + "\n")
        for row in rows:
            rep = row["report"]
            cells = [row["run"], str(row["method"]), _fmt(row["rate"])]
            cells += rep.csv_row() if rep is not None else ["n/a"] * len(CSV_COLUMNS)
            f.write(",".join(cells) + "\n")
    outputs["metrics"] = path

    ranked = sorted(
        (r for r in rows if r["report"] is not None and r["rate"] is not None),
        key=lambda r: (-r["report"].forget_quality, -r["report"].retain_rouge),
    )
    summary = out_dir / "summary.txt"
    with open(summary, "w", encoding="utf-8") as f:
        if ranked:
            f.write("best rates by (forget quality, retain recall):\n")
            for row in ranked[:2]:
                rep = row["report"]
                f.write(
                    f"  {row['run']}: FQ={rep.forget_quality:.6g} "
                    f"MU={rep.model_utility:.6g} F-RL={rep.forget_rouge:.6g} "
                    f"R-RL={rep.retain_rouge:.6g}\n"
                )
        else:
            f.write("no rate runs recorded\n")
    outputs["summary"] = summary
    return outputs


def best_rate(manifest: RunManifest) -> float:
    """The sweep's preferred rate: maximal forget quality, ties broken by
    retain recall then by smaller |r|."""
    best = None
    for key, rep_dict in manifest.metrics.items():
        info = manifest.run_info.get(key)
        if not info or info.get("rate") is None:
            continue
        rep = MetricReport.from_dict(rep_dict)
        cand = (rep.forget_quality, rep.retain_rouge, -abs(info["rate"]), info["rate"])
        if best is None or cand > best[0]:
            best = (cand, info["rate"])
    if best is None:
        raise ValueError("manifest holds no rate runs")
    return best[1]
