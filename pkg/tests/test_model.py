import numpy as np
import pytest

from obft.errors import ObftError, ShapeMismatch
from obft.model import (
    LoraConfig,
    ModelConfig,
    TokenBatch,
    cross_entropy,
    detokenize,
    forward_plain,
    init_lora,
    init_params,
    loss_and_grads_plain,
    sgd_step,
    tokenize_bytes,
)
from obft.numerics import Precision
from obft.partition import count_params

from oracles import central_difference, relative_frobenius, straight_line_forward


def tiny_config(precision=Precision.F64, vocab=11, n_layer=1, d_model=8):
    return ModelConfig(n_layer=n_layer, n_head=2, d_model=d_model, vocab_size=vocab,
                       context_len=32, precision=precision)


def small_batch(seq=6, vocab=11, with_targets=True):
    g = np.random.default_rng(99)
    tokens = g.integers(0, vocab, seq)
    targets = g.integers(0, vocab, seq) if with_targets else None
    return TokenBatch(tokens, targets)


class TestTokenizer:
    def test_empty(self):
        assert len(tokenize_bytes(b"")) == 0

    def test_ascii(self):
        assert tokenize_bytes(b"AB").tokens.tolist() == [65, 66]

    @pytest.mark.parametrize("seed", range(5))
    def test_round_trip(self, seed):
        data = np.random.default_rng(seed).integers(0, 256, 64, dtype=np.uint8).tobytes()
        assert detokenize(tokenize_bytes(data)) == data


class TestInit:
    def test_deterministic(self):
        cfg = tiny_config()
        p1, p2 = init_params(cfg, 7), init_params(cfg, 7)
        assert p1.wte.tobytes() == p2.wte.tobytes()
        assert p1.blocks[0].wq.tobytes() == p2.blocks[0].wq.tobytes()

    def test_different_seeds_differ(self):
        cfg = tiny_config()
        assert init_params(cfg, 1).wte.tobytes() != init_params(cfg, 2).wte.tobytes()

    def test_gpt2_xl_parameter_count(self):
        cfg = ModelConfig(n_layer=48, n_head=25, d_model=1600, d_ff=6400,
                          vocab_size=50257, context_len=1024)
        total = count_params(cfg).plain_total
        assert abs(total - 1.56e9) / 1.56e9 < 0.01

    def test_zero_layer_config(self):
        cfg = ModelConfig(n_layer=0, n_head=1, d_model=4, vocab_size=7, context_len=8,
                          precision=Precision.F64)
        params = init_params(cfg, 0)
        assert params.blocks == []
        logits = forward_plain(params, None, TokenBatch(np.array([1, 2])))
        assert logits.shape == (2, 7)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(n_layer=1, n_head=3, d_model=8)  # 8 % 3 != 0
        with pytest.raises(ValueError):
            ModelConfig(n_layer=1, n_head=1, d_model=0)


class TestForward:
    def test_zero_weights_give_uniform_distribution(self):
        cfg = tiny_config(vocab=7)
        params = init_params(cfg, 0)
        params.wte[:] = 0
        params.wpe[:] = 0
        logits = forward_plain(params, None, small_batch(vocab=7))
        probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        assert np.abs(probs - 1.0 / 7).max() <= 1e-12

    def test_zero_b_lora_is_exact_identity(self):
        cfg = tiny_config()
        params = init_params(cfg, 0)
        adapters = init_lora(cfg, LoraConfig(rank=4), 1)
        batch = small_batch()
        with_lora = forward_plain(params, adapters, batch)
        without = forward_plain(params, None, batch)
        assert with_lora.tobytes() == without.tobytes()

    def test_matches_straight_line_oracle(self):
        cfg = ModelConfig(n_layer=1, n_head=1, d_model=4, vocab_size=7, context_len=8,
                          precision=Precision.F64)
        params = init_params(cfg, 3)
        adapters = init_lora(cfg, LoraConfig(rank=2, alpha=4.0, dropout=0.0), 5)
        for block in adapters.blocks:  # nonzero B so the adapter path is exercised
            for ad in block.values():
                ad.b += 0.01
        tokens = [1, 5, 2]
        got = forward_plain(params, adapters, TokenBatch(np.array(tokens)))
        want = straight_line_forward(params, adapters, tokens)
        assert np.abs(got - want).max() <= 1e-10

    def test_multi_block_multi_head_matches_oracle(self):
        cfg = ModelConfig(n_layer=3, n_head=2, d_model=8, vocab_size=13, context_len=16,
                          precision=Precision.F64)
        params = init_params(cfg, 11)
        got = forward_plain(params, None, TokenBatch(np.arange(2, 9)))
        want = straight_line_forward(params, None, np.arange(2, 9))
        assert np.abs(got - want).max() <= 1e-10

    @pytest.mark.parametrize("seq,vocab", [(1, 7), (5, 11), (16, 256)])
    def test_logit_shape(self, seq, vocab):
        cfg = tiny_config(vocab=vocab)
        params = init_params(cfg, 0)
        logits = forward_plain(params, None, TokenBatch(np.zeros(seq, dtype=np.int64)))
        assert logits.shape == (seq, vocab)

    def test_causality(self):
        cfg = tiny_config(precision=Precision.F64)
        params = init_params(cfg, 0)
        t = 3
        base = np.array([1, 2, 3, 4, 5, 6])
        changed = base.copy()
        changed[t] = 9
        l1 = forward_plain(params, None, TokenBatch(base))
        l2 = forward_plain(params, None, TokenBatch(changed))
        assert l1[:t].tobytes() == l2[:t].tobytes()
        assert np.abs(l1[t:] - l2[t:]).max() > 0

    def test_rejects_out_of_range_token(self):
        cfg = tiny_config(vocab=11)
        params = init_params(cfg, 0)
        with pytest.raises(ObftError):
            forward_plain(params, None, TokenBatch(np.array([11])))

    def test_rejects_overlong_batch(self):
        cfg = tiny_config()
        params = init_params(cfg, 0)
        with pytest.raises(ShapeMismatch):
            forward_plain(params, None, TokenBatch(np.zeros(33, dtype=np.int64)))

    def test_train_mode_dropout_is_seeded(self):
        cfg = tiny_config()
        params = init_params(cfg, 0)
        adapters = init_lora(cfg, LoraConfig(rank=4, dropout=0.5), 1)
        for block in adapters.blocks:
            for ad in block.values():
                ad.b += 0.05
        batch = small_batch()
        a = forward_plain(params, adapters, batch, mode="train", mask_seed=3)
        b = forward_plain(params, adapters, batch, mode="train", mask_seed=3)
        c = forward_plain(params, adapters, batch, mode="train", mask_seed=4)
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()


class TestLossAndGrads:
    def test_uniform_logits_loss_is_log_vocab(self):
        logits = np.zeros((5, 7))
        loss, _ = cross_entropy(logits, np.array([0, 1, 2, 3, 4]))
        assert abs(loss - np.log(7)) <= 1e-12

    def test_missing_targets_rejected(self):
        cfg = tiny_config()
        params = init_params(cfg, 0)
        with pytest.raises(ObftError):
            loss_and_grads_plain(params, None, small_batch(with_targets=False))

    @pytest.mark.parametrize("draw", range(20))
    def test_gradients_match_finite_differences(self, draw):
        cfg = ModelConfig(n_layer=1, n_head=2, d_model=8, vocab_size=11, context_len=16,
                          precision=Precision.F64)
        params = init_params(cfg, 100 + draw)
        adapters = init_lora(cfg, LoraConfig(rank=2, alpha=4.0, dropout=0.0), 200 + draw)
        for block in adapters.blocks:
            for ad in block.values():
                ad.b += np.random.default_rng(300 + draw).normal(0, 0.02, ad.b.shape)
        batch = small_batch()
        _, grads = loss_and_grads_plain(params, adapters, batch)
        h = 1e-3
        for site in ("wq", "wk", "wv", "wo", "w1", "w2"):
            ad = adapters.blocks[0][site]
            for factor, got in (("a", grads[0][site][0]), ("b", grads[0][site][1])):
                tensor = getattr(ad, factor)
                fd = central_difference(
                    lambda: loss_and_grads_plain(params, adapters, batch)[0], tensor, h)
                assert relative_frobenius(fd, got) <= 1e-4, (site, factor)


class TestSgd:
    def _setup(self):
        cfg = tiny_config()
        params = init_params(cfg, 0)
        adapters = init_lora(cfg, LoraConfig(rank=4, alpha=8.0, dropout=0.0), 1)
        batch = small_batch()
        return params, adapters, batch

    def test_zero_lr_is_identity(self):
        params, adapters, batch = self._setup()
        loss1, grads = loss_and_grads_plain(params, adapters, batch, mask_seed=5)
        updated = sgd_step(adapters, grads, 0.0)
        assert updated.blocks[0]["wq"].a.tobytes() == adapters.blocks[0]["wq"].a.tobytes()
        loss2, _ = loss_and_grads_plain(params, updated, batch, mask_seed=5)
        assert loss1 == loss2

    def test_single_step_matches_hand_update(self):
        params, adapters, batch = self._setup()
        _, grads = loss_and_grads_plain(params, adapters, batch)
        lr = 0.1
        updated = sgd_step(adapters, grads, lr)
        b = adapters.blocks[0]["wv"].b
        want = b - b.dtype.type(lr) * grads[0]["wv"][1]
        assert updated.blocks[0]["wv"].b.tobytes() == want.tobytes()

    def test_fifty_steps_reduce_training_loss(self):
        cfg = ModelConfig(n_layer=2, n_head=2, d_model=16, vocab_size=256, context_len=64,
                          precision=Precision.F32)
        params = init_params(cfg, 0)
        adapters = init_lora(cfg, LoraConfig(rank=4, alpha=8.0, dropout=0.0), 1)
        corpus = (b"the quick brown fox jumps over the lazy dog. " * 8)
        tokens = np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)
        batch = TokenBatch(tokens[:48], tokens[1:49])
        first = None
        for step in range(50):
            loss, grads = loss_and_grads_plain(params, adapters, batch, mask_seed=0, step=step)
            if first is None:
                first = loss
            adapters = sgd_step(adapters, grads, 0.05)
        assert loss < first
