import numpy as np
import pytest

from refmil.features import Scaler
from refmil.net import (
    CHECKPOINT_VERSION,
    CheckpointError,
    ForwardTrace,
    ModelParams,
    NetConfig,
    NumericError,
    OptState,
    TENSOR_ORDER,
    backward,
    backward_pairs,
    current_lr,
    forward_logprob,
    forward_pairs,
    grad_check,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    zero_grads,
)
from refmil.scene import RefExpression, Vocabulary

SMALL = NetConfig(vocab_size=12, pair_feature_dim=10, hidden_dim=8, embed_dim=8, rng_seed=0)


def small_params(seed=0, dropout=0.0):
    cfg = NetConfig(
        vocab_size=12,
        pair_feature_dim=10,
        hidden_dim=8,
        embed_dim=8,
        dropout_ratio=dropout,
        rng_seed=seed,
    )
    return init_params(cfg)


class TestConfig:
    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            NetConfig(vocab_size=0, pair_feature_dim=4)
        with pytest.raises(ValueError):
            NetConfig(vocab_size=4, pair_feature_dim=4, dropout_ratio=1.0)

    def test_opt_state_validation(self):
        with pytest.raises(ValueError):
            OptState(learning_rate=0.0)
        with pytest.raises(ValueError):
            OptState(batch_size=0)


class TestInit:
    def test_deterministic(self):
        a, b = small_params(seed=5), small_params(seed=5)
        for name in TENSOR_ORDER:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])

    def test_seed_changes_params(self):
        a, b = small_params(seed=1), small_params(seed=2)
        assert not np.array_equal(a.tensors["embed"], b.tensors["embed"])

    def test_biases_zero_weights_bounded(self):
        p = small_params()
        assert np.all(p.tensors["b"] == 0) and np.all(p.tensors["b_out"] == 0)
        for name in ("embed", "w_x", "w_h", "w_out"):
            assert np.abs(p.tensors[name]).max() <= 0.1

    def test_shapes(self):
        p = small_params()
        assert p.tensors["embed"].shape == (12, 8)
        assert p.tensors["w_x"].shape == (32, 18)
        assert p.tensors["w_h"].shape == (32, 8)
        assert p.tensors["b"].shape == (32,)
        assert p.tensors["w_out"].shape == (12, 8)
        assert p.tensors["b_out"].shape == (12,)


class TestForward:
    def test_zero_init_uniform_softmax(self):
        cfg = NetConfig(vocab_size=10, pair_feature_dim=4, hidden_dim=8, embed_dim=8, init_scale=0.0)
        p = init_params(cfg)
        expr = RefExpression(tokens=(0, 3, 3, 1))
        trace = forward_logprob(p, expr, np.zeros(4))
        np.testing.assert_allclose(trace.word_logprobs, -np.log(10.0), atol=1e-12)
        np.testing.assert_allclose(trace.total_logprob[0], -3.0 * np.log(10.0), atol=1e-12)
        assert abs(trace.total_logprob[0] - (-6.9078)) < 1e-4

    def test_eval_mode_is_pure(self):
        p = small_params(seed=3, dropout=0.5)
        expr = RefExpression(tokens=(0, 4, 5, 6, 1))
        feat = np.random.default_rng(0).normal(size=10)
        a = forward_logprob(p, expr, feat, train_mode=False)
        b = forward_logprob(p, expr, feat, train_mode=False)
        np.testing.assert_array_equal(a.word_logprobs, b.word_logprobs)
        assert a.mask_e is None and a.mask_h is None

    def test_softmax_rows_sum_to_one(self):
        p = small_params(seed=1)
        trace = forward_pairs(p, (0, 3, 7, 1), np.random.default_rng(1).normal(size=(3, 10)))
        np.testing.assert_allclose(trace.probs.sum(axis=-1), 1.0, atol=1e-9)

    def test_total_logprob_nonpositive(self):
        rng = np.random.default_rng(5)
        p = small_params(seed=2)
        for _ in range(10):
            tokens = tuple(rng.integers(0, 12, size=rng.integers(2, 7)))
            trace = forward_pairs(p, tokens, rng.normal(size=(2, 10)))
            assert np.all(trace.total_logprob <= 0)

    def test_batched_matches_single(self):
        p = small_params(seed=4)
        rng = np.random.default_rng(2)
        tokens = (0, 3, 9, 2, 1)
        feats = rng.normal(size=(5, 10))
        batched = forward_pairs(p, tokens, feats)
        for k in range(5):
            single = forward_pairs(p, tokens, feats[k : k + 1])
            np.testing.assert_allclose(
                batched.word_logprobs[:, k], single.word_logprobs[:, 0], rtol=1e-12
            )

    def test_stable_under_large_logits(self):
        cfg = NetConfig(vocab_size=6, pair_feature_dim=2, hidden_dim=4, embed_dim=4, init_scale=0.1)
        p = init_params(cfg)
        p.tensors["b_out"][:] = np.array([1e3, -1e3, 0.0, 5.0, -5.0, 2.0])
        trace = forward_pairs(p, (0, 3, 1), np.ones((1, 2)))
        assert np.all(np.isfinite(trace.word_logprobs))
        np.testing.assert_allclose(trace.probs.sum(axis=-1), 1.0, atol=1e-9)

    def test_bad_token_rejected(self):
        p = small_params()
        with pytest.raises(ValueError, match="vocabulary range"):
            forward_pairs(p, (0, 99, 1), np.zeros((1, 10)))

    def test_bad_feature_dim_rejected(self):
        p = small_params()
        with pytest.raises(ValueError, match="feature dim"):
            forward_pairs(p, (0, 3, 1), np.zeros((1, 7)))

    def test_scored_positions_count(self):
        p = small_params()
        trace = forward_pairs(p, (0, 3, 4, 5, 1), np.zeros((1, 10)))
        assert trace.scored_length == 4
        assert trace.word_logprobs.shape == (4, 1)


class TestDropout:
    def test_masks_recorded_and_inverted(self):
        p = small_params(seed=1, dropout=0.5)
        rng = np.random.default_rng(9)
        trace = forward_pairs(p, (0, 3, 4, 1), np.zeros((2, 10)), train_mode=True, rng=rng)
        assert trace.mask_e is not None and trace.mask_h is not None
        assert set(np.unique(trace.mask_e)) <= {0.0, 2.0}
        np.testing.assert_array_equal(trace.h_drop, trace.h * trace.mask_h)

    def test_same_rng_seed_same_trace(self):
        p = small_params(seed=1, dropout=0.5)
        feat = np.ones((1, 10))
        a = forward_pairs(p, (0, 3, 1), feat, True, np.random.default_rng(4))
        b = forward_pairs(p, (0, 3, 1), feat, True, np.random.default_rng(4))
        np.testing.assert_array_equal(a.word_logprobs, b.word_logprobs)

    def test_zero_ratio_trains_like_eval(self):
        p = small_params(seed=1, dropout=0.0)
        feat = np.ones((1, 10))
        a = forward_pairs(p, (0, 3, 1), feat, train_mode=True, rng=np.random.default_rng(0))
        b = forward_pairs(p, (0, 3, 1), feat, train_mode=False)
        np.testing.assert_array_equal(a.word_logprobs, b.word_logprobs)


class TestBackward:
    def test_zero_weights_zero_grads(self):
        p = small_params(seed=2)
        trace = forward_pairs(p, (0, 3, 4, 1), np.ones((2, 10)))
        grads = backward_pairs(p, trace, np.zeros((3, 2)))
        for name in TENSOR_ORDER:
            assert np.all(grads[name] == 0)

    def test_single_pair_wrapper(self):
        p = small_params(seed=2)
        expr = RefExpression(tokens=(0, 3, 4, 1))
        trace = forward_logprob(p, expr, np.ones(10))
        grads = backward(p, trace, -np.ones(3))
        batched = backward_pairs(p, trace, -np.ones((3, 1)))
        for name in TENSOR_ORDER:
            np.testing.assert_array_equal(grads[name], batched[name])

    def test_shape_mismatch_rejected(self):
        p = small_params()
        trace = forward_pairs(p, (0, 3, 1), np.zeros((1, 10)))
        with pytest.raises(ValueError):
            backward_pairs(p, trace, np.zeros((5, 1)))

    def test_matches_finite_differences(self):
        err = grad_check(SMALL, trials=3, seed=123)
        assert err < 1e-4

    def test_covers_every_tensor(self):
        p = small_params(seed=7)
        trace = forward_pairs(p, (0, 5, 6, 1), np.random.default_rng(3).normal(size=(2, 10)))
        grads = backward_pairs(p, trace, np.full((3, 2), -1.0))
        assert set(grads) == set(TENSOR_ORDER)
        for name in TENSOR_ORDER:
            assert np.any(grads[name] != 0), name

    def test_dropout_gradient_honors_masks(self):
        p = small_params(seed=11, dropout=0.5)
        tokens = (0, 4, 7, 1)
        feats = np.random.default_rng(1).normal(size=(2, 10))
        weights = np.random.default_rng(2).normal(size=(3, 2))

        def run():
            return forward_pairs(p, tokens, feats, train_mode=True, rng=np.random.default_rng(77))

        analytic = backward_pairs(p, run(), weights)
        eps = 1e-6
        rng = np.random.default_rng(5)
        for name in TENSOR_ORDER:
            flat = p.tensors[name].reshape(-1)
            for j in rng.choice(flat.shape[0], size=min(4, flat.shape[0]), replace=False):
                orig = flat[j]
                flat[j] = orig + eps
                up = float((weights * run().word_logprobs).sum())
                flat[j] = orig - eps
                down = float((weights * run().word_logprobs).sum())
                flat[j] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic[name].reshape(-1)[j]
                assert abs(a - numeric) < 1e-7 + 1e-4 * max(abs(a), abs(numeric))


class TestSgd:
    def test_update_rule(self):
        cfg = NetConfig(vocab_size=2, pair_feature_dim=1, hidden_dim=1, embed_dim=1, init_scale=0.0)
        p = init_params(cfg)
        p.tensors["b_out"][:] = 1.0
        grads = zero_grads(p)
        grads["b_out"][:] = 0.5
        opt = OptState(learning_rate=0.01, halving_period_iters=100)
        sgd_step(p, grads, opt)
        np.testing.assert_allclose(p.tensors["b_out"], 0.995)
        assert opt.iteration == 1

    def test_halving_schedule(self):
        opt = OptState(learning_rate=0.01, halving_period_iters=2)
        seen = []
        p = small_params()
        grads = zero_grads(p)
        for _ in range(3):
            seen.append(current_lr(opt))
            sgd_step(p, grads, opt)
        np.testing.assert_allclose(seen, [0.01, 0.01, 0.005])

    def test_monotone_schedule(self):
        opt = OptState(learning_rate=0.01, halving_period_iters=3)
        rates = []
        for _ in range(12):
            rates.append(current_lr(opt))
            opt.iteration += 1
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_zero_gradient_no_change(self):
        p = small_params(seed=1)
        before = {k: v.copy() for k, v in p.tensors.items()}
        sgd_step(p, zero_grads(p), OptState())
        for name in TENSOR_ORDER:
            np.testing.assert_array_equal(p.tensors[name], before[name])

    def test_nonfinite_gradient_raises(self):
        p = small_params()
        grads = zero_grads(p)
        grads["w_h"][0, 0] = np.nan
        with pytest.raises(NumericError):
            sgd_step(p, grads, OptState())


class TestCheckpoint:
    def params_with_extras(self):
        vocab = Vocabulary(["red", "ball", "left"])
        cfg = NetConfig(vocab_size=len(vocab), pair_feature_dim=4, hidden_dim=3, embed_dim=2, rng_seed=9)
        scaler = Scaler(low=np.array([-1.0, 0.0, 0.125, -3.7]), high=np.array([1.0, 2.0, 0.125, 9.1]))
        return init_params(cfg, vocab=vocab, scaler=scaler)

    def test_round_trip_bit_exact(self, tmp_path):
        p = self.params_with_extras()
        p.tensors["w_h"][0, 0] = 1.0 / 3.0
        opt = OptState(learning_rate=0.01, halving_period_iters=7, iteration=13, batch_size=4)
        path = tmp_path / "model.json"
        save_checkpoint(p, opt, path)
        p2, opt2 = load_checkpoint(path)
        for name in TENSOR_ORDER:
            np.testing.assert_array_equal(p.tensors[name], p2.tensors[name])
        assert p2.cfg == p.cfg
        assert (opt2.iteration, opt2.halving_period_iters, opt2.batch_size) == (13, 7, 4)
        assert p2.vocab is not None and p2.vocab.words == ["red", "ball", "left"]
        np.testing.assert_array_equal(p2.scaler.low, p.scaler.low)
        np.testing.assert_array_equal(p2.scaler.high, p.scaler.high)

    def test_save_load_save_identical_bytes(self, tmp_path):
        p = self.params_with_extras()
        opt = OptState()
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_checkpoint(p, opt, a)
        p2, opt2 = load_checkpoint(a)
        save_checkpoint(p2, opt2, b)
        assert a.read_bytes() == b.read_bytes()

    def test_forward_identical_after_reload(self, tmp_path):
        p = self.params_with_extras()
        path = tmp_path / "m.json"
        save_checkpoint(p, OptState(), path)
        p2, _ = load_checkpoint(path)
        feat = np.linspace(-1, 1, 4)
        a = forward_pairs(p, (0, 3, 4, 1), feat[None, :])
        b = forward_pairs(p2, (0, 3, 4, 1), feat[None, :])
        np.testing.assert_array_equal(a.word_logprobs, b.word_logprobs)

    def test_unknown_version_rejected(self, tmp_path):
        p = self.params_with_extras()
        path = tmp_path / "m.json"
        save_checkpoint(p, OptState(), path)
        text = path.read_text().replace('"version":1', '"version":99', 1)
        path.write_text(text)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("{not json")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.json")

    def test_nonfinite_tensor_rejected_on_save(self, tmp_path):
        p = self.params_with_extras()
        p.tensors["b"][0] = np.inf
        with pytest.raises(NumericError):
            save_checkpoint(p, OptState(), tmp_path / "m.json")

    def test_zero_init_checkpoint_uniform(self, tmp_path):
        cfg = NetConfig(vocab_size=10, pair_feature_dim=2, hidden_dim=4, embed_dim=4, init_scale=0.0)
        save_checkpoint(init_params(cfg), OptState(), tmp_path / "z.json")
        p, _ = load_checkpoint(tmp_path / "z.json")
        trace = forward_pairs(p, (0, 3, 3, 1), np.zeros((1, 2)))
        np.testing.assert_allclose(trace.total_logprob[0], -3 * np.log(10), atol=1e-12)
