"""Unlearning loss functions.

The smoothed-ascent objective couples one forget loss with M normal
losses through a smoothing rate r and slot count K:

    total = (1 - r + r/K) * L_f  +  (r/K) * sum_k L_p^(k)

Sign convention: L_f is the *negated* forget cross-entropy, so a single
"minimize" covers both forgetting and learning — descending the total
ascends the forget cross-entropy, and at r = 0 the objective reduces
bitwise to plain gradient ascent. The baseline objectives (gradient
difference, KL-regularized ascent, preference variants, random-completion
variants, probability-ratio adjustment, task-vector and distribution
interpolation) follow their standard formulations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, constant
from .checkpoint import Checkpoint
from .model import (
    ParamTensors,
    SequenceBatch,
    batch_xent,
    forward_logits,
)

METHOD_IDS = (
    "SGA", "GA", "GD", "KL", "PO", "DPO", "DPO-RT", "NPO", "NPO-RT",
    "Mismatch", "LLMU", "FLAT", "TaskVector", "WHP",
)


# -- labels ---------------------------------------------------------------------


def gls_smooth(base_label: np.ndarray, rate: float) -> np.ndarray:
    """Generalized label smoothing: y -> (1 - r) * y + (r/K) * 1.

    The rate may be negative (sharpening); K is the label length.
    """
    y = np.asarray(base_label, dtype=np.float64)
    k = y.shape[-1]
    return (1.0 - rate) * y + (rate / k) * np.ones_like(y)


@dataclass(frozen=True)
class SmoothedLabel:
    """The K-slot weighting that couples forget and normal losses.

    ``signed_vector`` is the label over (forget, normal_1, ...) slots:
    -(1 - (K-1) r / K) on the forget slot and -r/K on each normal slot.
    ``forget_weight``/``normal_weight`` are the loss coefficients
    (1 - r + r/K) and (r/K); they satisfy w_f + (K-1) w_p = 1 exactly.
    The signed vector equals the negated smoothed one-hot; the coefficient
    pair drives the objective. Both are reported side by side.
    """

    slot_count: int
    rate: float
    forget_weight: float
    normal_weight: float
    signed_vector: np.ndarray = field(repr=False)


def sga_label(slot_count: int, rate: float) -> SmoothedLabel:
    if slot_count < 2:
        raise ValueError(f"slot count must be >= 2, got {slot_count}")
    k = slot_count
    w_f = 1.0 - rate + rate / k
    w_p = rate / k
    signed = np.full(k, -rate / k, dtype=np.float64)
    signed[0] = -(1.0 - (k - 1) * rate / k)
    return SmoothedLabel(
        slot_count=k, rate=rate, forget_weight=w_f, normal_weight=w_p,
        signed_vector=signed,
    )


# -- configuration and breakdown -------------------------------------------------


@dataclass
class UnlearnMethodConfig:
    """Hyperparameters for one unlearning method.

    retain_weight multiplies the auxiliary retain/KL term of GD, KL and
    the -RT variants (1.0 reproduces the standard formulations); beta is
    the preference inverse temperature; alpha the distribution
    interpolation coefficient; epsilon the three random-completion
    weights; divergence selects the probability-adjustment activation
    pair; normal_count overrides the default M = K - 1.
    """

    method: str = "SGA"
    rate: float = 0.0
    slot_count: int = 4
    retain_weight: float = 1.0
    beta: float = 0.1
    alpha: float = 1.0
    epsilon: tuple[float, float, float] = (1.0, 1.0, 1.0)
    divergence: str = "pearson"
    normal_count: int | None = None

    def __post_init__(self):
        if self.method not in METHOD_IDS:
            raise ValueError(f"unknown method id {self.method!r}")
        if self.method in ("DPO", "DPO-RT", "NPO", "NPO-RT") and self.beta <= 0:
            raise ValueError(f"{self.method} requires beta > 0")
        if self.method == "SGA" and self.slot_count < 2:
            raise ValueError("SGA requires slot_count >= 2")

    @property
    def companions(self) -> int:
        """Normal samples per forget record (M)."""
        return self.normal_count if self.normal_count is not None else self.slot_count - 1

    def to_dict(self) -> dict:
        return {
            "method": self.method, "rate": self.rate,
            "slot_count": self.slot_count, "retain_weight": self.retain_weight,
            "beta": self.beta, "alpha": self.alpha,
            "epsilon": list(self.epsilon), "divergence": self.divergence,
            "normal_count": self.normal_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnlearnMethodConfig":
        d = dict(d)
        if "epsilon" in d:
            d["epsilon"] = tuple(d["epsilon"])
        return cls(**d)


@dataclass
class LossBreakdown:
    """Scalar objective on its tape plus the per-term decomposition.

    Each loss documents how ``total`` reconstructs from ``forget_term``,
    ``auxiliary_term`` and ``per_normal_terms``; the stored terms are the
    raw (unweighted) component values.
    """

    total: Tensor
    tape: Tape
    params: ParamTensors
    forget_term: float
    auxiliary_term: float = 0.0
    per_normal_terms: list[float] = field(default_factory=list)

    @property
    def value(self) -> float:
        return self.total.value

    def grad(self) -> np.ndarray:
        """Backward from the total; returns the flat parameter gradient."""
        self.params.reset_grads()
        self.tape.backward(self.total)
        return self.params.flat_grad()


def _mean_token_logprob(tape: Tape, params: ParamTensors, batch: SequenceBatch) -> Tensor:
    """Length-normalized sequence log-probability per record: [B]."""
    logits = forward_logits(tape, params, batch.input_ids)
    lp = tape.token_logprobs(logits, batch.target_ids.reshape(-1))
    lp2 = tape.reshape(lp, batch.input_ids.shape)
    return tape.row_masked_mean(lp2, batch.loss_mask)


def _mean_token_prob(tape: Tape, params: ParamTensors, batch: SequenceBatch) -> Tensor:
    """Average per-token target probability per record: [B]."""
    logits = forward_logits(tape, params, batch.input_ids)
    pt = tape.token_probs(logits, batch.target_ids.reshape(-1))
    pt2 = tape.reshape(pt, batch.input_ids.shape)
    return tape.row_masked_mean(pt2, batch.loss_mask)


def _frozen_probs(ref: Checkpoint, ids: np.ndarray) -> np.ndarray:
    """Reference-model token distributions, no gradient: [B*T, V]."""
    params = ParamTensors(ref, requires_grad=False)
    logits = forward_logits(Tape(), params, ids).data
    shift = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shift)
    return e / e.sum(axis=-1, keepdims=True)


def _check_nonempty(batch: SequenceBatch, name: str) -> None:
    if batch.loss_mask.sum() == 0:
        raise ValueError(f"{name} batch has no supervised positions")


# -- smoothed gradient ascent ---------------------------------------------------


def sga_loss(
    ckpt: Checkpoint,
    forget_batch: SequenceBatch,
    normal_batches: list[SequenceBatch],
    config: UnlearnMethodConfig,
) -> LossBreakdown:
    """Smoothed-ascent objective.

    total = w_f * L_f + w_p * sum_k CE(normal_k), with L_f the negated
    forget cross-entropy and (w_f, w_p) the smoothed-label coefficients.
    At r = 0 the normal slots carry zero weight and the result is
    bit-identical to ``gradient_ascent_loss``.
    """
    if config.method != "SGA":
        raise ValueError(f"sga_loss called with method {config.method!r}")
    _check_nonempty(forget_batch, "forget")
    label = sga_label(config.slot_count, config.rate)
    if label.normal_weight != 0.0 and not normal_batches:
        raise ValueError("normal set required: r != 0 but no normal batches given")
    for nb in normal_batches:
        if nb.size != forget_batch.size:
            raise ShapeError(
                f"normal batch size {nb.size} does not align with forget batch "
                f"size {forget_batch.size}"
            )
    params = ParamTensors(ckpt)
    tape = Tape()
    forget_ce = batch_xent(tape, params, forget_batch)
    l_f = tape.scale(forget_ce, -1.0)
    total = tape.scale(l_f, label.forget_weight)
    normal_values: list[float] = []
    if label.normal_weight != 0.0:
        # one fused forward over all normal slots: the M batches are padded
        # to a common width and stacked, and per-slot cross-entropies come
        # from a segment-masked mean
        stacked = _stack_batches(normal_batches)
        logits = forward_logits(tape, params, stacked.input_ids)
        nll = tape.scale(
            tape.token_logprobs(logits, stacked.target_ids.reshape(-1)), -1.0
        )
        ce_per_slot = tape.segment_masked_mean(
            nll, stacked.loss_mask.reshape(-1), len(normal_batches)
        )
        normal_values = [float(v) for v in ce_per_slot.data]
        total = tape.add(
            total, tape.scale(tape.sum_all(ce_per_slot), label.normal_weight)
        )
    return LossBreakdown(
        total=total, tape=tape, params=params,
        forget_term=l_f.value,
        auxiliary_term=float(sum(normal_values)),
        per_normal_terms=normal_values,
    )


def _stack_batches(batches: list[SequenceBatch]) -> SequenceBatch:
    """Stack same-size batches into one, padding to a common width."""
    from .tokenizer import PAD

    if len(batches) == 1:
        return batches[0]
    width = max(b.input_ids.shape[1] for b in batches)
    rows = sum(b.size for b in batches)
    input_ids = np.full((rows, width), PAD, dtype=np.int64)
    target_ids = np.full((rows, width), PAD, dtype=np.int64)
    loss_mask = np.zeros((rows, width), dtype=np.float64)
    at = 0
    for b in batches:
        n, t = b.input_ids.shape
        input_ids[at:at + n, :t] = b.input_ids
        target_ids[at:at + n, :t] = b.target_ids
        loss_mask[at:at + n, :t] = b.loss_mask
        at += n
    return SequenceBatch(input_ids=input_ids, target_ids=target_ids,
                         loss_mask=loss_mask)


def sga_update_direction(bundle, rate: float) -> np.ndarray:
    """Combined update direction from per-term gradients:

        -[(1 - r + r/K) * g_f + (r/K) * sum_k g_p^(k)]

    ``bundle`` is a GradientBundle; K is its slot count. This is the
    loss-side combination; the geometry-side one-step vector d(r) lives
    in the smoothing-analysis module and is kept separate because the two
    printed forms attach r with opposite orientation.
    """
    k = bundle.slot_count
    acc = (1.0 - rate + rate / k) * bundle.forget_grad
    if bundle.normal_grads:
        acc = acc + (rate / k) * np.sum(bundle.normal_grads, axis=0)
    return -acc


# -- baselines -------------------------------------------------------------------


def gradient_ascent_loss(ckpt: Checkpoint, forget_batch: SequenceBatch) -> LossBreakdown:
    """Plain ascent: total = -CE(forget)."""
    _check_nonempty(forget_batch, "forget")
    params = ParamTensors(ckpt)
    tape = Tape()
    total = tape.scale(batch_xent(tape, params, forget_batch), -1.0)
    return LossBreakdown(total=total, tape=tape, params=params, forget_term=total.value)


def gradient_difference_loss(
    ckpt: Checkpoint,
    forget_batch: SequenceBatch,
    retain_batch: SequenceBatch,
    retain_weight: float = 1.0,
) -> LossBreakdown:
    """total = retain_weight * CE(retain) - CE(forget)."""
    _check_nonempty(forget_batch, "forget")
    _check_nonempty(retain_batch, "retain")
    params = ParamTensors(ckpt)
    tape = Tape()
    ce_f = batch_xent(tape, params, forget_batch)
    ce_r = batch_xent(tape, params, retain_batch)
    total = tape.sub(tape.scale(ce_r, retain_weight), ce_f)
    return LossBreakdown(
        total=total, tape=tape, params=params,
        forget_term=ce_f.value, auxiliary_term=ce_r.value,
    )


def kl_regularized_loss(
    ckpt: Checkpoint,
    reference: Checkpoint,
    forget_batch: SequenceBatch,
    retain_batch: SequenceBatch,
    retain_weight: float = 1.0,
) -> LossBreakdown:
    """total = -CE(forget) + retain_weight * mean KL(ref || model) over
    the retain batch's supervised positions. The reference is frozen."""
    if reference.config != ckpt.config:
        raise ValueError("reference checkpoint config differs from model config")
    _check_nonempty(forget_batch, "forget")
    _check_nonempty(retain_batch, "retain")
    params = ParamTensors(ckpt)
    tape = Tape()
    ce_f = batch_xent(tape, params, forget_batch)
    ref_probs = _frozen_probs(reference, retain_batch.input_ids)
    logits_r = forward_logits(tape, params, retain_batch.input_ids)
    kl = tape.kl_from_ref(logits_r, ref_probs, retain_batch.loss_mask.reshape(-1))
    total = tape.add(tape.scale(ce_f, -1.0), tape.scale(kl, retain_weight))
    return LossBreakdown(
        total=total, tape=tape, params=params,
        forget_term=ce_f.value, auxiliary_term=kl.value,
    )


_PREFERENCE_VARIANTS = ("PO", "DPO", "DPO-RT", "NPO", "NPO-RT")


def preference_loss(
    variant: str,
    ckpt: Checkpoint,
    forget_batch: SequenceBatch,
    refusal_batch: SequenceBatch | None = None,
    retain_batch: SequenceBatch | None = None,
    reference: Checkpoint | None = None,
    beta: float = 0.1,
    retain_weight: float = 1.0,
    use_reference_margin: bool = True,
) -> LossBreakdown:
    """Preference-style objectives.

    PO:   CE(retain) + CE(refusal answers on forget prompts).
    DPO:  -2 beta * mean log sigmoid(beta*(h_e - h_f) - margin), where h is
          the mean per-token log-probability and the margin is the frozen
          reference model's beta-scaled log-ratio (0 when disabled).
    NPO:  -2 beta * mean log sigmoid(-beta * h_f).
    The -RT variants add retain_weight * CE(retain).
    """
    if variant not in _PREFERENCE_VARIANTS:
        raise ValueError(f"unknown preference variant {variant!r}")
    needs_retain = variant in ("PO", "DPO-RT", "NPO-RT")
    if needs_retain and retain_batch is None:
        raise ValueError(f"{variant} requires a retain batch")
    if variant in ("DPO", "DPO-RT"):
        if refusal_batch is None:
            raise ValueError(f"{variant} requires a refusal batch")
        if reference is None:
            raise ValueError(f"{variant} requires a reference checkpoint")
    if variant == "PO" and refusal_batch is None:
        raise ValueError("PO requires a refusal batch")
    _check_nonempty(forget_batch, "forget")

    params = ParamTensors(ckpt)
    tape = Tape()

    if variant == "PO":
        ce_r = batch_xent(tape, params, retain_batch)
        ce_e = batch_xent(tape, params, refusal_batch)
        total = tape.add(ce_r, ce_e)
        return LossBreakdown(
            total=total, tape=tape, params=params,
            forget_term=ce_e.value, auxiliary_term=ce_r.value,
        )

    if variant in ("NPO", "NPO-RT"):
        h_f = _mean_token_logprob(tape, params, forget_batch)
        core = tape.scale(
            tape.mean_all(tape.logsigmoid(tape.scale(h_f, -beta))), -2.0 * beta
        )
    else:  # DPO, DPO-RT
        if refusal_batch.size != forget_batch.size:
            raise ShapeError("refusal batch must align 1:1 with the forget batch")
        h_e = _mean_token_logprob(tape, params, refusal_batch)
        h_f = _mean_token_logprob(tape, params, forget_batch)
        if use_reference_margin:
            ref_e = _frozen_mean_logprob(reference, refusal_batch)
            ref_f = _frozen_mean_logprob(reference, forget_batch)
            margin = beta * (ref_e - ref_f)
        else:
            margin = np.zeros(forget_batch.size)
        inner = tape.add(tape.scale(tape.sub(h_e, h_f), beta), constant(-margin))
        core = tape.scale(tape.mean_all(tape.logsigmoid(inner)), -2.0 * beta)

    if variant.endswith("-RT"):
        ce_r = batch_xent(tape, params, retain_batch)
        total = tape.add(core, tape.scale(ce_r, retain_weight))
        aux = ce_r.value
    else:
        total = core
        aux = 0.0
    return LossBreakdown(
        total=total, tape=tape, params=params,
        forget_term=core.value, auxiliary_term=aux,
    )


def _frozen_mean_logprob(ref: Checkpoint, batch: SequenceBatch) -> np.ndarray:
    """Reference model's mean per-token log-probability per record."""
    probs = _frozen_probs(ref, batch.input_ids)
    rows = np.arange(probs.shape[0])
    lp = np.log(probs[rows, batch.target_ids.reshape(-1)]).reshape(batch.input_ids.shape)
    counts = batch.loss_mask.sum(axis=-1)
    return (lp * batch.loss_mask).sum(axis=-1) / counts


def random_completion_loss(
    variant: str,
    ckpt: Checkpoint,
    forget_batch: SequenceBatch,
    random_batch: SequenceBatch,
    retain_batch: SequenceBatch,
    reference: Checkpoint | None = None,
    epsilon: tuple[float, float, float] = (1.0, 1.0, 1.0),
    retain_weight: float = 1.0,
) -> LossBreakdown:
    """Random-completion objectives.

    Mismatch: CE(retain) + CE(random completions on forget prompts).
    LLMU:     -e1*CE(forget) + e2*CE(random) + e3*KL(ref || model) on the
              retain batch (requires the frozen reference and weights).
    """
    if variant not in ("Mismatch", "LLMU"):
        raise ValueError(f"unknown random-completion variant {variant!r}")
    _check_nonempty(random_batch, "random")
    params = ParamTensors(ckpt)
    tape = Tape()
    if variant == "Mismatch":
        _check_nonempty(retain_batch, "retain")
        ce_r = batch_xent(tape, params, retain_batch)
        ce_rnd = batch_xent(tape, params, random_batch)
        total = tape.add(ce_r, ce_rnd)
        return LossBreakdown(
            total=total, tape=tape, params=params,
            forget_term=ce_rnd.value, auxiliary_term=ce_r.value,
        )
    if epsilon is None or len(epsilon) != 3:
        raise ValueError("LLMU requires the three epsilon weights")
    if reference is None:
        raise ValueError("LLMU requires a reference checkpoint")
    _check_nonempty(forget_batch, "forget")
    e1, e2, e3 = (float(e) for e in epsilon)
    ce_f = batch_xent(tape, params, forget_batch)
    ce_rnd = batch_xent(tape, params, random_batch)
    ref_probs = _frozen_probs(reference, retain_batch.input_ids)
    logits_r = forward_logits(tape, params, retain_batch.input_ids)
    kl = tape.kl_from_ref(logits_r, ref_probs, retain_batch.loss_mask.reshape(-1))
    total = tape.add(
        tape.add(tape.scale(ce_f, -e1), tape.scale(ce_rnd, e2)), tape.scale(kl, e3)
    )
    return LossBreakdown(
        total=total, tape=tape, params=params,
        forget_term=ce_f.value, auxiliary_term=kl.value,
        per_normal_terms=[ce_rnd.value],
    )


# -- probability-adjustment objective --------------------------------------------

# activation pairs (g*, f*) keyed by divergence id, applied to the mean
# per-token probability; the Pearson chi-square pair is the shipped default
# and the identity pair exists for tests.
_DIVERGENCE_PAIRS = {
    "identity": (
        lambda tape, t: t,
        lambda tape, u: u,
    ),
    "pearson": (
        lambda tape, t: tape.scale(tape.add(t, constant(np.full(t.shape, -1.0))), 2.0),
        lambda tape, u: tape.add(tape.scale(tape.mul(u, u), 0.25), u),
    ),
    "kl": (
        lambda tape, t: tape.add(tape.log(t), constant(np.ones(t.shape))),
        lambda tape, u: tape.exp(tape.add(u, constant(np.full(u.shape, -1.0)))),
    ),
}


def flat_loss(
    ckpt: Checkpoint,
    forget_batch: SequenceBatch,
    template_batch: SequenceBatch,
    divergence: str = "pearson",
) -> LossBreakdown:
    """Loss adjustment over mean per-token probabilities:

        total = mean[ -g*(P(template)) + f*(g*(P(forget))) ]

    with (g*, f*) the activation pair selected by ``divergence`` and P the
    average token prediction probability of the answer given its prompt.
    """
    if divergence not in _DIVERGENCE_PAIRS:
        raise ValueError(f"unknown divergence id {divergence!r}")
    if template_batch.size != forget_batch.size:
        raise ShapeError("template batch must align 1:1 with the forget batch")
    _check_nonempty(forget_batch, "forget")
    _check_nonempty(template_batch, "template")
    g_star, f_star = _DIVERGENCE_PAIRS[divergence]
    params = ParamTensors(ckpt)
    tape = Tape()
    p_e = _mean_token_prob(tape, params, template_batch)
    p_f = _mean_token_prob(tape, params, forget_batch)
    g_e = tape.mean_all(g_star(tape, p_e))
    fg_f = tape.mean_all(f_star(tape, g_star(tape, p_f)))
    total = tape.add(tape.scale(g_e, -1.0), fg_f)
    return LossBreakdown(
        total=total, tape=tape, params=params,
        forget_term=fg_f.value, auxiliary_term=g_e.value,
    )


# -- training-free parameter/distribution edits ----------------------------------


def task_vector_unlearn(theta_original: np.ndarray, theta_reinforced: np.ndarray) -> np.ndarray:
    """Subtract the reinforcement direction: 2 * theta_o - theta_reinforced."""
    theta_original = np.asarray(theta_original, dtype=np.float64)
    theta_reinforced = np.asarray(theta_reinforced, dtype=np.float64)
    if theta_original.shape != theta_reinforced.shape:
        raise ValueError(
            f"parameter vectors differ in length: {theta_original.shape} vs "
            f"{theta_reinforced.shape}"
        )
    return 2.0 * theta_original - theta_reinforced


def whp_distribution(
    p_original: np.ndarray, p_reinforced: np.ndarray, alpha: float
) -> np.ndarray:
    """Interpolated token distribution p_o - alpha * (p_r - p_o), clipped
    at zero and renormalized to stay a valid distribution."""
    p_o = np.asarray(p_original, dtype=np.float64)
    p_r = np.asarray(p_reinforced, dtype=np.float64)
    if p_o.shape != p_r.shape:
        raise ValueError("distributions differ in length")
    for name, p in (("original", p_o), ("reinforced", p_r)):
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} distribution does not sum to 1")
    q = p_o - alpha * (p_r - p_o)
    q = np.where(q < 0, 0.0, q)
    z = q.sum()
    if z <= 1e-12:
        raise ValueError("degenerate WHP distribution: all mass clipped")
    return q / z


class WhpModel:
    """Inference-time model whose token distributions are the clipped
    interpolation away from the reinforced model; provides the same
    scorer/generator surface as a checkpoint-backed model."""

    def __init__(self, original: Checkpoint, reinforced: Checkpoint, alpha: float):
        if original.config != reinforced.config:
            raise ValueError("original and reinforced configs differ")
        self.original = original
        self.reinforced = reinforced
        self.alpha = alpha

    def _edited_probs(self, ids: np.ndarray) -> np.ndarray:
        p_o = _frozen_probs(self.original, ids)
        p_r = _frozen_probs(self.reinforced, ids)
        out = np.empty_like(p_o)
        for i in range(p_o.shape[0]):
            out[i] = whp_distribution(p_o[i], p_r[i], self.alpha)
        return out

    def score(self, prompt_ids, answer_ids):
        from .model import SequenceScore

        prompt_ids = list(prompt_ids)
        answer_ids = list(answer_ids)
        if not prompt_ids:
            raise ValueError("empty prompt")
        if not answer_ids:
            raise ValueError("empty answer")
        ids = np.array([prompt_ids + answer_ids[:-1]], dtype=np.int64)
        probs = self._edited_probs(ids)
        start = len(prompt_ids) - 1
        rows = np.arange(start, start + len(answer_ids))
        with np.errstate(divide="ignore"):
            logp = np.log(probs[rows, answer_ids])
        return SequenceScore(token_logprobs=logp)

    def generate(self, prompt_ids, max_new: int, mode: str = "greedy",
                 temperature: float = 1.0, seed: int = 0) -> list[int]:
        from .tokenizer import EOS

        prompt_ids = list(prompt_ids)
        if not prompt_ids:
            raise ValueError("empty prompt")
        rng = np.random.default_rng(seed)
        ids = list(prompt_ids)
        out: list[int] = []
        context = self.original.config.context
        for _ in range(max_new):
            window = ids[-context:]
            probs = self._edited_probs(np.array([window], dtype=np.int64))
            p = probs[len(window) - 1]
            if mode == "greedy":
                nxt = int(np.argmax(p))
            else:
                scaled = p ** (1.0 / temperature)
                nxt = int(rng.choice(len(p), p=scaled / scaled.sum()))
            if nxt == EOS:
                break
            out.append(nxt)
            ids.append(nxt)
        return out

    def generate_batch(self, prompts, max_new: int):
        return [self.generate(p, max_new) for p in prompts]

    def score_batch(self, examples):
        return np.array(
            [self.score(p, a).mean_logprob for p, a in examples]
        )

    def perplexity(self, batches) -> float:
        nll_total = 0.0
        count = 0.0
        for batch in batches:
            mask = batch.loss_mask.reshape(-1)
            if mask.sum() == 0:
                continue
            probs = self._edited_probs(batch.input_ids)
            rows = np.arange(probs.shape[0])
            with np.errstate(divide="ignore"):
                nll = -np.log(probs[rows, batch.target_ids.reshape(-1)])
            nll = np.where(mask > 0, nll, 0.0)
            nll_total += float(nll.sum())
            count += float(mask.sum())
        if count == 0:
            raise ValueError("no unmasked positions in corpus")
        return float(np.exp(nll_total / count))
