import math

import numpy as np
import pytest

from tempdistill.autodiff import Adam, AdamState, Tape, Tensor, adam_step, label_smoothed_nll, numerical_gradient, \
    ops, reverse_gradient, softmax_with_temperature
from tempdistill.errors import InvalidArgument, InvalidState
from tempdistill.model import ModelConfig, Transformer


def entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def assert_gradients_match(analytic, numeric, rtol=1e-4, atol=1e-8):
    err = np.abs(analytic - numeric)
    assert np.all(err <= rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol), float(err.max())


class TestSoftmaxWithTemperature:

    def test_uniform_for_constant_logits(self):
        np.testing.assert_allclose(softmax_with_temperature([0.0, 0.0, 0.0], 1.0), [1 / 3] * 3)

    def test_known_values(self):
        np.testing.assert_allclose(softmax_with_temperature([2.0, 0.0], 1.0), [0.8808, 0.1192], atol=1e-4)
        np.testing.assert_allclose(softmax_with_temperature([2.0, 0.0], 2.0), [0.7311, 0.2689], atol=1e-4)

    def test_large_logits_stay_finite(self):
        p = softmax_with_temperature([1000.0, 999.0, -1000.0], 1.0)
        assert np.all(np.isfinite(p))
        assert abs(p.sum() - 1.0) < 1e-9

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_rejects_non_positive_temperature(self, tau):
        with pytest.raises(InvalidArgument):
            softmax_with_temperature([1.0, 2.0], tau)

    def test_rejects_empty(self):
        with pytest.raises(InvalidArgument):
            softmax_with_temperature([], 1.0)

    def test_entropy_grows_and_argmax_holds_over_random_logits(self):
        rng = np.random.default_rng(0)
        taus = [math.sqrt(lam) for lam in (1.0, 1.5, 2.0, 4.0)]
        for _ in range(1000):
            z = rng.normal(0.0, 3.0, size=int(rng.integers(2, 20)))
            dists = [softmax_with_temperature(z, tau) for tau in taus]
            entropies = [entropy(p) for p in dists]
            assert all(b >= a - 1e-12 for a, b in zip(entropies, entropies[1:]))
            assert len({int(np.argmax(p)) for p in dists}) == 1
            for p in dists:
                assert abs(p.sum() - 1.0) < 1e-9

    def test_masked_softmax_rejects_fully_masked_row(self):
        with pytest.raises(InvalidState):
            ops.softmax(np.zeros((1, 3)), mask=np.zeros((1, 3), dtype=bool))


class TestLabelSmoothedNLL:

    def test_zero_smoothing_is_nll(self):
        logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        expected = -(logp[0, 1] + logp[1, 2]) / 2
        assert label_smoothed_nll(logits, [1, 2], 0.0).item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("epsilon", [0.0, 0.1, 0.5])
    def test_uniform_logits_give_log_vocab(self, epsilon):
        assert label_smoothed_nll(np.zeros((3, 7)), [0, 3, 6], epsilon).item() == pytest.approx(math.log(7))

    def test_hand_example(self):
        loss = label_smoothed_nll(np.log([[0.8, 0.2]]), [0], 0.1).item()
        expected = 0.9 * -math.log(0.8) + 0.1 * 0.5 * (-math.log(0.8) - math.log(0.2))
        assert loss == pytest.approx(expected, abs=1e-12)
        assert loss == pytest.approx(0.29246, abs=1e-5)

    def test_rejects_target_out_of_range(self):
        with pytest.raises(InvalidArgument):
            label_smoothed_nll(np.zeros((1, 3)), [3], 0.0)

    def test_mask_excludes_steps(self):
        logits = np.array([[[2.0, 0.0], [0.0, 5.0]]])
        masked = label_smoothed_nll(logits, [[0, 0]], 0.0, mask=np.array([[True, False]])).item()
        assert masked == pytest.approx(label_smoothed_nll(logits[:, :1], [[0]], 0.0).item())


class TestReverseGradient:

    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        with Tape() as tape:
            y = x * x
        reverse_gradient(y, tape)
        assert float(x.grad) == pytest.approx(6.0)

    def test_rejects_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(InvalidArgument):
            reverse_gradient(y, tape)

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = ops.sum(x * x)
        assert not y.requires_grad

    def test_softmax_nll_gradient_is_p_minus_onehot(self):
        z = Tensor(np.array([[0.3, -1.2, 2.0, 0.1]]), requires_grad=True)
        with Tape() as tape:
            loss = label_smoothed_nll(z, [2], 0.0)
        reverse_gradient(loss, tape)

        p = softmax_with_temperature(z.data, 1.0)
        np.testing.assert_allclose(z.grad, p - np.eye(4)[[2]], rtol=1e-12, atol=1e-15)
        numeric = numerical_gradient(lambda: label_smoothed_nll(z, [2], 0.0).item(), z)
        assert_gradients_match(z.grad, numeric, rtol=1e-6)

    def test_composite_graph_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        w = Tensor(rng.normal(0, 0.5, (4, 5)), requires_grad=True)
        emb = Tensor(rng.normal(0, 0.5, (6, 4)), requires_grad=True)
        scale = Tensor(1.0 + rng.normal(0, 0.1, 5), requires_grad=True)
        offset = Tensor(rng.normal(0, 0.1, 5), requires_grad=True)
        ids = np.array([[1, 4, 2], [0, 5, 3]])
        mask = np.array([[True, True, False], [True, True, True]])[:, None, :]

        def f():
            x = ops.embedding(emb, ids)
            h = ops.layer_norm(ops.matmul(x, w), scale, offset)
            h = ops.gelu(h)
            att = ops.softmax(ops.matmul(h, ops.swap_last(h)), tau=1.7, mask=mask)
            ctx = ops.matmul(att, h)
            both = ops.concat([ctx, ops.exp(ops.mul(h, 0.1))], axis=-1)
            flat = ops.reshape(ops.transpose(both, (1, 0, 2)), (6, 10))
            picked = ops.gather(ops.log_softmax(flat), np.arange(6) % 10)
            return ops.div(ops.neg(ops.mean(picked)), ops.add(ops.sum(ops.mul(scale, scale)), 1.0))

        with Tape() as tape:
            loss = f()
        reverse_gradient(loss, tape)

        for t in (w, emb, scale, offset):
            assert_gradients_match(t.grad, numerical_gradient(lambda: f().item(), t))

    def test_desk_model_gradients_match_finite_differences(self):
        config = ModelConfig(vocab_size=11, d_model=8, n_heads=2, encoder_layers=2, decoder_layers=2,
            ffn_dim=16, max_len=12, dropout=0.0)
        model = Transformer.initialize(config, seed=4)
        rng = np.random.default_rng(5)
        for _, t in model.params.items():
            t.data += rng.normal(0, 0.3, t.shape)

        docs = [[5, 6, 7, 8, 9], [10, 5, 6]]
        summaries = [[2, 7, 8, 3], [2, 10, 9, 6, 3]]

        def loss_value():
            return model.batch_loss(docs, summaries, 0.1).item()

        with Tape() as tape:
            loss = model.batch_loss(docs, summaries, 0.1)
        reverse_gradient(loss, tape)

        h = 1e-5
        for name, t in model.params.items():
            assert t.grad is not None, name
            flat = t.data.reshape(-1)
            grad = t.grad.reshape(-1)
            for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_value()
                flat[i] = orig - h
                down = loss_value()
                flat[i] = orig
                assert_gradients_match(np.array([grad[i]]), np.array([(up - down) / (2 * h)]))


class TestAdam:

    def test_first_step(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState.for_param(p, lr=0.1)
        adam_step(p, np.array([1.0]), state)
        assert p.data[0] == pytest.approx(-0.1, rel=1e-6)
        assert state.t == 1

    def test_zero_gradient_leaves_parameter(self):
        p = Tensor(np.array([0.5, -2.0]), requires_grad=True)
        adam_step(p, np.zeros(2), AdamState.for_param(p, lr=0.1))
        np.testing.assert_array_equal(p.data, [0.5, -2.0])

    def test_two_steps(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState.for_param(p, lr=0.1)
        adam_step(p, np.array([1.0]), state)
        adam_step(p, np.array([1.0]), state)
        assert state.t == 2
        assert state.m[0] == pytest.approx(0.9 * 0.1 + 0.1 * 1.0)

    def test_zero_learning_rate_is_bit_identical(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        before = p.data.copy()
        adam_step(p, rng.normal(size=(3, 4)), AdamState.for_param(p, lr=0.0, weight_decay=0.01))
        np.testing.assert_array_equal(p.data, before)

    def test_decoupled_weight_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        adam_step(p, np.zeros(1), AdamState.for_param(p, lr=0.1, weight_decay=0.5))
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))

    def test_rejects_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(InvalidArgument):
            adam_step(p, np.zeros(4), AdamState.for_param(p))

    def test_optimizer_clips_global_norm(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([3.0, 4.0])
        opt = Adam([("a", a)], lr=0.1, clip_norm=1.0)
        assert opt.step() == pytest.approx(5.0)
        # the first Adam step moves by lr in the sign direction regardless of scale
        np.testing.assert_allclose(a.data, [-0.1, -0.1], rtol=1e-6)
        opt.zero_grad()
        assert a.grad is None
