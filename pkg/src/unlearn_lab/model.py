"""Tiny autoregressive transformer over the autodiff tape.

Architecture: token embedding + learned positional embedding, pre-norm
blocks (causal self-attention, GELU MLP), final layer norm, and an
output projection tied to the token embedding. Small enough to memorize
and then forget a QA corpus within minutes on one CPU core.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, constant
from .checkpoint import Checkpoint, ModelConfig, param_specs
from .tokenizer import BOS, EOS, PAD, Vocabulary


@dataclass
class SequenceBatch:
    """Teacher-forcing batch: inputs, next-token targets, and a {0,1}
    loss mask. Masked positions contribute zero loss."""

    input_ids: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        if not (self.input_ids.shape == self.target_ids.shape == self.loss_mask.shape):
            raise ValueError("input_ids, target_ids, loss_mask must share a shape")

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]


class ParamTensors:
    """The checkpoint's parameters wrapped as autodiff leaves, with
    gradient flattening in the canonical parameter order."""

    def __init__(self, ckpt: Checkpoint, requires_grad: bool = True):
        self.config = ckpt.config
        self.tensors: dict[str, Tensor] = {}
        for name, view in ckpt.param_views().items():
            self.tensors[name] = Tensor(view, requires_grad=requires_grad, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def flat_grad(self) -> np.ndarray:
        """Accumulated gradients packed into one vector (zeros where a
        parameter received no gradient)."""
        chunks = []
        for name, shape in param_specs(self.config):
            t = self.tensors[name]
            if t.grad is None:
                chunks.append(np.zeros(int(np.prod(shape)), dtype=np.float64))
            else:
                chunks.append(t.grad.reshape(-1))
        return np.concatenate(chunks)

    def reset_grads(self) -> None:
        for t in self.tensors.values():
            t.reset_grad()


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    mask = _MASK_CACHE.get(t)
    if mask is None:
        mask = np.where(np.arange(t)[None, :] <= np.arange(t)[:, None], 0.0, -1e30)
        _MASK_CACHE[t] = mask
    return mask


def forward_hidden(tape: Tape, params: ParamTensors, ids: np.ndarray) -> Tensor:
    """Run the transformer trunk on ids [B, T]; returns the final
    layer-normalized hidden states [B*T, d]."""
    cfg = params.config
    b, t = ids.shape
    if t > cfg.context:
        raise ValueError(f"sequence length {t} exceeds context {cfg.context}")
    d, nh = cfg.dim, cfg.heads
    hd = d // nh

    flat_ids = ids.reshape(-1).astype(np.int64)
    tok = tape.gather_rows(params["tok_emb"], flat_ids)
    pos = tape.gather_rows(params["pos_emb"], np.tile(np.arange(t), b))
    x = tape.add(tok, pos)  # [B*T, d]

    def split_heads(m: Tensor) -> Tensor:
        return tape.reshape(
            tape.transpose(tape.reshape(m, (b, t, nh, hd)), (0, 2, 1, 3)),
            (b * nh, t, hd),
        )

    mask = constant(_causal_mask(t))
    for i in range(cfg.layers):
        p = f"h{i}."
        h = tape.layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])
        q = split_heads(tape.add(tape.matmul(h, params[p + "w_q"]), params[p + "b_q"]))
        k = split_heads(tape.add(tape.matmul(h, params[p + "w_k"]), params[p + "b_k"]))
        v = split_heads(tape.add(tape.matmul(h, params[p + "w_v"]), params[p + "b_v"]))
        scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(hd))
        attn = tape.softmax(tape.add(scores, mask))
        ctx = tape.matmul(attn, v)  # [B*h, T, hd]
        merged = tape.reshape(
            tape.transpose(tape.reshape(ctx, (b, nh, t, hd)), (0, 2, 1, 3)),
            (b * t, d),
        )
        proj = tape.add(tape.matmul(merged, params[p + "w_o"]), params[p + "b_o"])
        x = tape.add(x, proj)
        h2 = tape.layer_norm(x, params[p + "ln2_g"], params[p + "ln2_b"])
        up = tape.gelu(tape.add(tape.matmul(h2, params[p + "w_fc"]), params[p + "b_fc"]))
        mlp = tape.add(tape.matmul(up, params[p + "w_out"]), params[p + "b_out"])
        x = tape.add(x, mlp)

    return tape.layer_norm(x, params["lnf_g"], params["lnf_b"])


def forward_logits(tape: Tape, params: ParamTensors, ids: np.ndarray) -> Tensor:
    """Transformer forward on ids [B, T]; returns logits [B*T, V] through
    the output projection tied to the token embedding."""
    hidden = forward_hidden(tape, params, ids)
    return tape.matmul(hidden, tape.transpose(params["tok_emb"], (1, 0)))


def final_hidden_states(ckpt: Checkpoint, ids: np.ndarray) -> np.ndarray:
    """Final hidden states [B*T, d] under a frozen checkpoint; used by the
    model-backed embedding provider."""
    params = ParamTensors(ckpt, requires_grad=False)
    return forward_hidden(Tape(), params, ids).data


@dataclass
class TapedLoss:
    """A scalar loss together with its tape and parameter leaves."""

    loss: Tensor
    tape: Tape
    params: ParamTensors

    @property
    def value(self) -> float:
        return self.loss.value

    def grad(self) -> np.ndarray:
        """Backward from the loss; returns the flat parameter gradient."""
        self.params.reset_grads()
        self.tape.backward(self.loss)
        return self.params.flat_grad()


def batch_xent(tape: Tape, params: ParamTensors, batch: SequenceBatch) -> Tensor:
    """Mean masked next-token cross-entropy of a batch (scalar tensor)."""
    logits = forward_logits(tape, params, batch.input_ids)
    return tape.token_xent(
        logits, batch.target_ids.reshape(-1), batch.loss_mask.reshape(-1)
    )


def sft_loss(ckpt: Checkpoint, batch: SequenceBatch) -> TapedLoss:
    """Supervised fine-tuning loss: mean masked next-token cross-entropy."""
    if batch.loss_mask.sum() == 0:
        raise ValueError("no supervised positions")
    if batch.input_ids.max() >= ckpt.config.vocab_size:
        raise ValueError("batch token id outside vocabulary")
    params = ParamTensors(ckpt)
    tape = Tape()
    loss = batch_xent(tape, params, batch)
    return TapedLoss(loss=loss, tape=tape, params=params)


def train_step(ckpt: Checkpoint, batch: SequenceBatch, lr: float) -> Checkpoint:
    """One AdamW update on the supervised loss."""
    taped = sft_loss(ckpt, batch)
    value = taped.value
    if not np.isfinite(value):
        raise ValueError(f"non-finite training loss: {value}")
    return ckpt.adamw_update(taped.grad(), lr)


# -- frozen-checkpoint inference ---------------------------------------------


def _frozen_logits(ckpt: Checkpoint, ids: np.ndarray) -> np.ndarray:
    """Forward with gradient tracking off; returns logits [B*T, V]."""
    params = ParamTensors(ckpt, requires_grad=False)
    return forward_logits(Tape(), params, ids).data


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


@dataclass
class SequenceScore:
    """Per-token answer log-probabilities and the length-normalized
    probability P(answer | prompt)^(1/len)."""

    token_logprobs: np.ndarray

    @property
    def mean_logprob(self) -> float:
        return float(self.token_logprobs.mean())

    @property
    def normalized_prob(self) -> float:
        return float(np.exp(self.mean_logprob))


def score_sequence(ckpt: Checkpoint, prompt_ids, answer_ids) -> SequenceScore:
    """Teacher-forced log-probabilities of each answer token given the
    prompt and the preceding answer tokens."""
    prompt_ids = list(prompt_ids)
    answer_ids = list(answer_ids)
    if not prompt_ids:
        raise ValueError("empty prompt")
    if not answer_ids:
        raise ValueError("empty answer")
    total = len(prompt_ids) + len(answer_ids)
    if total > ckpt.config.context + 1:
        raise ValueError(
            f"prompt+answer length {total} overflows context {ckpt.config.context}"
        )
    ids = np.array([prompt_ids + answer_ids[:-1]], dtype=np.int64)
    logp = _log_softmax(_frozen_logits(ckpt, ids))
    start = len(prompt_ids) - 1
    rows = np.arange(start, start + len(answer_ids))
    return SequenceScore(token_logprobs=logp[rows, answer_ids])


def generate(
    ckpt: Checkpoint,
    prompt_ids,
    max_new: int,
    mode: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
) -> list[int]:
    """Autoregressive decoding; stops at the end token or ``max_new``.

    Greedy mode is a pure function of (theta, prompt); temperature mode
    draws from softmax(logits / temperature) with its own seeded stream.
    """
    prompt_ids = list(prompt_ids)
    if not prompt_ids:
        raise ValueError("empty prompt")
    if mode not in ("greedy", "temperature"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    if mode == "temperature" and temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(seed)
    out: list[int] = []
    ids = list(prompt_ids)
    for _ in range(max_new):
        window = ids[-ckpt.config.context:]
        logits = _frozen_logits(ckpt, np.array([window], dtype=np.int64))
        last = logits[len(window) - 1]
        if mode == "greedy":
            nxt = int(np.argmax(last))
        else:
            p = np.exp(_log_softmax(last[None, :] / temperature))[0]
            nxt = int(rng.choice(len(p), p=p / p.sum()))
        if nxt == EOS:
            break
        out.append(nxt)
        ids.append(nxt)
    return out


def generate_batch(
    ckpt: Checkpoint, prompts: list[list[int]], max_new: int
) -> list[list[int]]:
    """Greedy decoding for many prompts in one forward per token step.

    Rows are right-padded and tracked by their own length, so each row's
    output equals greedy decoding of that prompt alone (attention is
    causal, padding sits after every live position).
    """
    if not prompts:
        return []
    for p in prompts:
        if not p:
            raise ValueError("empty prompt")
    if max_new == 0:
        return [[] for _ in prompts]
    b = len(prompts)
    lengths = np.array([len(p) for p in prompts])
    width = int(lengths.max()) + max_new
    if width > ckpt.config.context:
        width = ckpt.config.context
    ids = np.full((b, width), PAD, dtype=np.int64)
    for i, p in enumerate(prompts):
        take = p[-width:] if len(p) > width else p
        ids[i, : len(take)] = take
        lengths[i] = len(take)
    out: list[list[int]] = [[] for _ in prompts]
    done = np.zeros(b, dtype=bool)
    for _ in range(max_new):
        active = np.flatnonzero(~done & (lengths < width))
        if active.size == 0:
            break
        t_eff = int(lengths[active].max())
        logits = _frozen_logits(ckpt, ids[active, :t_eff]).reshape(
            active.size, t_eff, -1
        )
        rows = np.arange(active.size)
        last = logits[rows, lengths[active] - 1]
        nxt = last.argmax(axis=1)
        for j, i in enumerate(active):
            token = int(nxt[j])
            if token == EOS:
                done[i] = True
                continue
            out[i].append(token)
            ids[i, lengths[i]] = token
            lengths[i] += 1
    return out


def score_batch(ckpt: Checkpoint, examples: list[tuple[list[int], list[int]]]) -> np.ndarray:
    """Mean per-token answer log-probability for many (prompt, answer)
    pairs in one teacher-forced forward; returns [B]."""
    if not examples:
        return np.zeros(0)
    for p, a in examples:
        if not p or not a:
            raise ValueError("empty prompt or answer")
        if len(p) + len(a) > ckpt.config.context + 1:
            raise ValueError(
                f"prompt+answer length {len(p) + len(a)} overflows context "
                f"{ckpt.config.context}"
            )
    batch = make_batch(examples, ckpt.config.context)
    logp = _log_softmax(_frozen_logits(ckpt, batch.input_ids))
    rows = np.arange(logp.shape[0])
    token_lp = logp[rows, batch.target_ids.reshape(-1)].reshape(batch.input_ids.shape)
    mask = batch.loss_mask
    return (token_lp * mask).sum(axis=1) / mask.sum(axis=1)


def perplexity(ckpt: Checkpoint, batches: list[SequenceBatch]) -> float:
    """exp(mean masked next-token cross-entropy) over a corpus."""
    if not batches:
        raise ValueError("empty corpus")
    nll_total = 0.0
    count = 0.0
    for batch in batches:
        mask = batch.loss_mask.reshape(-1)
        if mask.sum() == 0:
            continue
        logp = _log_softmax(_frozen_logits(ckpt, batch.input_ids))
        rows = np.arange(logp.shape[0])
        nll = -logp[rows, batch.target_ids.reshape(-1)]
        nll_total += float((nll * mask).sum())
        count += float(mask.sum())
    if count == 0:
        raise ValueError("no unmasked positions in corpus")
    return float(np.exp(nll_total / count))


def token_probability_report(
    checkpoints: list[tuple[str, Checkpoint]],
    prompt_ids,
    target_ids,
    vocab: Vocabulary | None = None,
) -> list[dict]:
    """Per-checkpoint probability of each target token, teacher-forced.

    One row per (checkpoint, target position); the row layout is what the
    report writer serializes."""
    rows: list[dict] = []
    target_ids = list(target_ids)
    for tag, ckpt in checkpoints:
        score = score_sequence(ckpt, prompt_ids, target_ids)
        for pos, (tid, lp) in enumerate(zip(target_ids, score.token_logprobs)):
            row = {
                "checkpoint": tag,
                "position": pos,
                "token_id": int(tid),
                "probability": float(np.exp(lp)),
            }
            if vocab is not None:
                row["token"] = vocab.decode([int(tid)])
            rows.append(row)
    return rows


class CheckpointModel:
    """Checkpoint wrapped behind the scorer/generator interface the
    metrics consume (duck-typed with the distribution-edit wrapper)."""

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt

    def score(self, prompt_ids, answer_ids) -> SequenceScore:
        return score_sequence(self.ckpt, prompt_ids, answer_ids)

    def generate(self, prompt_ids, max_new: int, mode: str = "greedy",
                 temperature: float = 1.0, seed: int = 0) -> list[int]:
        return generate(self.ckpt, prompt_ids, max_new, mode, temperature, seed)

    def generate_batch(self, prompts: list[list[int]], max_new: int) -> list[list[int]]:
        return generate_batch(self.ckpt, prompts, max_new)

    def score_batch(self, examples: list[tuple[list[int], list[int]]]) -> np.ndarray:
        return score_batch(self.ckpt, examples)

    def perplexity(self, batches: list[SequenceBatch]) -> float:
        return perplexity(self.ckpt, batches)


# -- batch construction --------------------------------------------------------


def encode_example(vocab: Vocabulary, question: str, answer: str) -> tuple[list[int], list[int]]:
    """QA record -> (prompt ids, answer ids). The answer carries the end
    token so generation length is supervised too."""
    prompt = [BOS] + vocab.encode(question + "\n")
    ans = vocab.encode(answer) + [EOS]
    return prompt, ans


def make_batch(
    examples: list[tuple[list[int], list[int]]], context: int
) -> SequenceBatch:
    """Pack (prompt, answer) id pairs into a padded teacher-forcing batch;
    the loss mask covers exactly the answer tokens."""
    if not examples:
        raise ValueError("empty example list")
    lengths = [len(p) + len(a) for p, a in examples]
    for n in lengths:
        if n - 1 > context:
            raise ValueError(f"example length {n} exceeds context {context}")
    t = max(lengths) - 1
    b = len(examples)
    input_ids = np.full((b, t), PAD, dtype=np.int64)
    target_ids = np.full((b, t), PAD, dtype=np.int64)
    loss_mask = np.zeros((b, t), dtype=np.float64)
    for i, (p, a) in enumerate(examples):
        ids = p + a
        n = len(ids)
        input_ids[i, : n - 1] = ids[:-1]
        target_ids[i, : n - 1] = ids[1:]
        loss_mask[i, len(p) - 1 : n - 1] = 1.0
    return SequenceBatch(input_ids=input_ids, target_ids=target_ids, loss_mask=loss_mask)
