"""Tiny LM: losses, training, scoring, generation, checkpoint files."""

import numpy as np
import pytest

from unlearn_lab.checkpoint import Checkpoint, ModelConfig, param_count
from unlearn_lab.model import (
    CheckpointModel,
    batch_xent,
    encode_example,
    forward_logits,
    generate,
    make_batch,
    perplexity,
    score_sequence,
    sft_loss,
    token_probability_report,
    train_step,
    ParamTensors,
)
from unlearn_lab.autodiff import Tape
from unlearn_lab.tokenizer import BOS, EOS


CFG = ModelConfig(vocab_size=16, dim=16, layers=2, heads=2, context=32, seed=5)


def tiny_batch():
    return make_batch([([BOS, 5, 6], [7, 8, EOS]), ([BOS, 9], [10, EOS])], CFG.context)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(vocab_size=16, dim=10, heads=3)

    def test_positive_fields(self):
        with pytest.raises(ValueError, match="positive"):
            ModelConfig(vocab_size=0)


class TestSftLoss:
    def test_uniform_model_loss_is_log_vocab(self):
        ckpt = Checkpoint.zeros(CFG)
        loss = sft_loss(ckpt, tiny_batch())
        assert loss.value == pytest.approx(np.log(16), abs=1e-12)

    def test_fully_masked_batch_errors(self):
        batch = tiny_batch()
        batch.loss_mask[:] = 0.0
        with pytest.raises(ValueError, match="no supervised positions"):
            sft_loss(Checkpoint.zeros(CFG), batch)

    def test_softmax_rows_sum_to_one(self):
        ckpt = Checkpoint.init(CFG)
        params = ParamTensors(ckpt, requires_grad=False)
        tape = Tape()
        logits = forward_logits(tape, params, tiny_batch().input_ids)
        shift = logits.data - logits.data.max(axis=-1, keepdims=True)
        probs = np.exp(shift) / np.exp(shift).sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_overfit_single_batch(self):
        ckpt = Checkpoint.init(CFG)
        batch = tiny_batch()
        for _ in range(500):
            ckpt = train_step(ckpt, batch, 1e-2)
        assert sft_loss(ckpt, batch).value < 1e-3


class TestTrainStep:
    def test_loss_decreases(self):
        ckpt = Checkpoint.init(CFG)
        batch = tiny_batch()
        decreases = 0
        prev = sft_loss(ckpt, batch).value
        for _ in range(50):
            ckpt = train_step(ckpt, batch, 3e-3)
            cur = sft_loss(ckpt, batch).value
            if cur < prev:
                decreases += 1
            prev = cur
        assert decreases >= 45

    def test_zero_learning_rate_keeps_theta(self):
        ckpt = Checkpoint.init(CFG)
        out = train_step(ckpt, tiny_batch(), 0.0)
        np.testing.assert_array_equal(out.theta, ckpt.theta)
        assert out.step_count == ckpt.step_count + 1

    def test_seeded_training_bitwise_deterministic(self):
        def run():
            ckpt = Checkpoint.init(CFG)
            for _ in range(5):
                ckpt = train_step(ckpt, tiny_batch(), 1e-3)
            return ckpt.theta

        np.testing.assert_array_equal(run(), run())


class TestScoring:
    def test_single_token_answer(self):
        ckpt = Checkpoint.init(CFG)
        score = score_sequence(ckpt, [BOS, 4], [9])
        params = ParamTensors(ckpt, requires_grad=False)
        tape = Tape()
        logits = forward_logits(tape, params, np.array([[BOS, 4]]))
        shift = logits.data[1] - logits.data[1].max()
        p = np.exp(shift)[9] / np.exp(shift).sum()
        assert score.normalized_prob == pytest.approx(p, rel=1e-12)

    def test_uniform_model_normalized_prob(self):
        score = score_sequence(Checkpoint.zeros(CFG), [BOS, 3], [4, 5, 6])
        assert score.normalized_prob == pytest.approx(1 / 16, rel=1e-12)

    def test_score_matches_stepwise_conditionals(self):
        ckpt = Checkpoint.init(CFG)
        prompt, answer = [BOS, 3, 7], [2, 11, 4]
        whole = score_sequence(ckpt, prompt, answer)
        stepwise = []
        for k in range(len(answer)):
            stepwise.append(
                score_sequence(ckpt, prompt + answer[:k], [answer[k]]).token_logprobs[0]
            )
        np.testing.assert_allclose(whole.token_logprobs, stepwise, atol=1e-12)

    def test_context_overflow(self):
        with pytest.raises(ValueError, match="overflow"):
            score_sequence(Checkpoint.zeros(CFG), list(range(1, 30)), [1] * 10)


class TestGenerate:
    def test_greedy_deterministic(self):
        ckpt = Checkpoint.init(CFG)
        a = generate(ckpt, [BOS, 5], 10)
        b = generate(ckpt, [BOS, 5], 10)
        assert a == b

    def test_memorized_continuation(self):
        ckpt = Checkpoint.init(CFG)
        batch = tiny_batch()
        for _ in range(400):
            ckpt = train_step(ckpt, batch, 1e-2)
        assert generate(ckpt, [BOS, 5, 6], 8) == [7, 8]

    def test_zero_budget(self):
        assert generate(Checkpoint.zeros(CFG), [BOS], 0) == []

    def test_empty_prompt(self):
        with pytest.raises(ValueError, match="empty prompt"):
            generate(Checkpoint.zeros(CFG), [], 4)

    def test_temperature_seeded(self):
        ckpt = Checkpoint.init(CFG)
        a = generate(ckpt, [BOS, 5], 10, mode="temperature", temperature=1.0, seed=3)
        b = generate(ckpt, [BOS, 5], 10, mode="temperature", temperature=1.0, seed=3)
        assert a == b


class TestPerplexity:
    def test_uniform_model(self):
        assert perplexity(Checkpoint.zeros(CFG), [tiny_batch()]) == pytest.approx(16.0)

    def test_memorized_corpus(self):
        ckpt = Checkpoint.init(CFG)
        batch = tiny_batch()
        for _ in range(400):
            ckpt = train_step(ckpt, batch, 1e-2)
        assert perplexity(ckpt, [batch]) < 1.1

    def test_lower_bound(self):
        rng = np.random.default_rng(0)
        cfg = ModelConfig(vocab_size=16, dim=16, layers=1, heads=2, context=32, seed=9)
        ckpt = Checkpoint(config=cfg, theta=rng.normal(size=param_count(cfg)))
        assert perplexity(ckpt, [tiny_batch()]) >= 1.0

    def test_empty_corpus(self):
        with pytest.raises(ValueError, match="empty corpus"):
            perplexity(Checkpoint.zeros(CFG), [])


class TestCheckpointFile:
    def test_save_load_bitwise(self, tmp_path):
        ckpt = Checkpoint.init(CFG)
        ckpt = train_step(ckpt, tiny_batch(), 1e-3)  # moments present
        path = tmp_path / "model.ulab"
        ckpt.save(path)
        loaded = Checkpoint.load(path)
        np.testing.assert_array_equal(loaded.theta, ckpt.theta)
        np.testing.assert_array_equal(loaded.adam_m, ckpt.adam_m)
        assert loaded.step_count == ckpt.step_count
        assert loaded.provenance == ckpt.provenance

    def test_save_load_save_byte_identical(self, tmp_path):
        ckpt = Checkpoint.init(CFG)
        p1, p2 = tmp_path / "a.ulab", tmp_path / "b.ulab"
        ckpt.save(p1)
        Checkpoint.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_enforced(self, tmp_path):
        path = tmp_path / "bogus.ulab"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            Checkpoint.load(path)

    def test_theta_length_checked(self):
        with pytest.raises(ValueError, match="length"):
            Checkpoint(config=CFG, theta=np.zeros(10))


class TestTokenProbabilityReport:
    def test_uniform_model_rows(self):
        rows = token_probability_report(
            [("zero", Checkpoint.zeros(CFG))], [BOS, 4], [5, 6]
        )
        assert len(rows) == 2
        for row in rows:
            assert row["probability"] == pytest.approx(1 / 16, rel=1e-12)
            assert row["checkpoint"] == "zero"

    def test_empty_checkpoint_list(self):
        assert token_probability_report([], [BOS], [5]) == []


class TestBatchBuilder:
    def test_mask_covers_exactly_answer(self):
        vocab_stub = None
        prompt, answer = [BOS, 5, 6], [7, 8, EOS]
        batch = make_batch([(prompt, answer)], 32)
        assert batch.input_ids.shape == (1, 5)
        np.testing.assert_array_equal(batch.loss_mask[0], [0, 0, 1, 1, 1])
        np.testing.assert_array_equal(batch.target_ids[0], [5, 6, 7, 8, EOS])

    def test_length_cap(self):
        with pytest.raises(ValueError, match="exceeds context"):
            make_batch([(list(range(30)), [1, 2, 3])], 16)

    def test_checkpoint_model_wrapper(self):
        model = CheckpointModel(Checkpoint.zeros(CFG))
        assert model.generate([BOS], 0) == []
        assert model.score([BOS], [5]).normalized_prob == pytest.approx(1 / 16)
        assert model.perplexity([tiny_batch()]) == pytest.approx(16.0)
