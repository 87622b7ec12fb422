import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from san import tensor as T
from san.answer import (AnswerModule, DataError, bernoulli_keep, decode_span, initial_state, kbest_spans, masked_average,
                        predict_step, sample_step_mask, single_step_predict, span_loss, stochastic_average,
                        step_nll_loss)
from san.gradcheck import check_gradients
from san.tensor import Graph, Tensor


@pytest.fixture
def memory(rng):
    Hq = Tensor(rng.standard_normal((2, 4, 6)), requires_grad=True)
    M = Tensor(rng.standard_normal((2, 7, 6)), requires_grad=True)
    q_mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    p_mask = np.array([[1] * 7, [1] * 5 + [0] * 2], dtype=bool)
    return Hq, M, q_mask, p_mask


class TestForward:
    @pytest.mark.parametrize("variant", ["san", "onestep", "memnet_final", "memnet_avg"])
    def test_distributions_normalised(self, rng, memory, variant):
        Hq, M, q_mask, p_mask = memory
        ans = AnswerModule(rng, 3, multi_step=variant != "onestep")
        for graph in (None, Graph(5, training=True)):
            out = ans(Hq, M, q_mask, p_mask, graph, steps=5, variant=variant)
            for d in out.per_step_begin + out.per_step_end + [out.avg_begin, out.avg_end]:
                np.testing.assert_allclose(d.data.sum(axis=1), 1.0, atol=1e-12)
                assert (d.data[1, 5:] == 0).all()

    def test_onestep_has_fewer_parameters(self, rng):
        assert AnswerModule(rng, 3, False).num_parameters() < AnswerModule(rng, 3, True).num_parameters()

    def test_step_zero_weights_shared_across_variants(self):
        a = AnswerModule(np.random.default_rng(3), 3, True)
        b = AnswerModule(np.random.default_rng(3), 3, False)
        for name in ("w4", "W6", "W7"):
            np.testing.assert_array_equal(getattr(a, name).data, getattr(b, name).data)

    def test_single_step_module_refuses_more_steps(self, rng, memory):
        Hq, M, q_mask, p_mask = memory
        with pytest.raises(ValueError):
            AnswerModule(rng, 3, multi_step=False)(Hq, M, q_mask, p_mask, steps=3, variant="san")

    def test_t1_without_dropout_equals_single_step_predictor(self, rng, memory):
        Hq, M, q_mask, p_mask = memory
        ans = AnswerModule(rng, 3, True)
        out = ans(Hq, M, q_mask, p_mask, Graph(0, training=True), steps=1, variant="san", rate=0.0)
        b, e = single_step_predict(ans, Hq, M, q_mask, p_mask)
        np.testing.assert_array_equal(out.avg_begin.data, b.data)
        np.testing.assert_array_equal(out.avg_end.data, e.data)

    def test_memnet_final_uses_last_step(self, rng, memory):
        Hq, M, q_mask, p_mask = memory
        out = AnswerModule(rng, 3)(Hq, M, q_mask, p_mask, Graph(0, training=True), 4, "memnet_final")
        assert out.avg_begin is out.per_step_begin[-1]

    def test_memnet_avg_never_drops(self, rng, memory):
        Hq, M, q_mask, p_mask = memory
        out = AnswerModule(rng, 3)(Hq, M, q_mask, p_mask, Graph(0, training=True), 4, "memnet_avg")
        assert out.active_mask.all()
        mean = sum(d.data for d in out.per_step_begin) / 4
        np.testing.assert_allclose(out.avg_begin.data, mean, atol=1e-15)

    def test_initial_state_weights_question(self, rng, memory):
        Hq, _, q_mask, _ = memory
        ans = AnswerModule(rng, 3)
        s0 = initial_state(ans, Hq, q_mask).data
        scores = Hq.data[1, :2] @ ans.w4.data[:, 0]
        alpha = np.exp(scores - scores.max())
        alpha /= alpha.sum()
        np.testing.assert_allclose(s0[1], alpha @ Hq.data[1, :2], atol=1e-14)

    def test_end_pointer_formula(self, rng, memory):
        _, M, _, _ = memory
        ans = AnswerModule(rng, 3)
        s = Tensor(rng.standard_normal((2, 6)))
        b, e = predict_step(ans, s, M)
        for k in range(2):
            sb = M.data[k] @ (s.data[k] @ ans.W6.data)
            pb = np.exp(sb - sb.max()) / np.exp(sb - sb.max()).sum()
            np.testing.assert_allclose(b.data[k], pb, atol=1e-14)
            z = np.concatenate([s.data[k], pb @ M.data[k]]) @ ans.W7.data
            se = M.data[k] @ z
            np.testing.assert_allclose(e.data[k], np.exp(se - se.max()) / np.exp(se - se.max()).sum(), atol=1e-14)

    @pytest.mark.parametrize("variant", ["san", "memnet_final"])
    def test_gradients(self, rng, memory, variant):
        Hq, M, q_mask, p_mask = memory
        ans = AnswerModule(rng, 3)
        graph = Graph(2, training=True)

        def loss():
            graph.reset()
            out = ans(Hq, M, q_mask, p_mask, graph, 3, variant)
            return T.mean(span_loss(out.avg_begin, out.avg_end, [1, 2], [3, 4]))

        errs = check_gradients(loss, [Hq, M] + ans.parameters())
        assert max(errs.values()) < 1e-6


class TestStepMask:
    def test_never_all_dropped(self):
        rng = np.random.default_rng(0)
        masks = np.stack([sample_step_mask(rng, 3, 0.9) for _ in range(2000)])
        assert masks.any(axis=1).all()

    def test_keep_rates(self):
        rng = np.random.default_rng(6)
        raw = np.stack([bernoulli_keep(rng, 5, 0.4) for _ in range(100_000)])
        # raw draws keep each step with probability exactly 0.6 (sd of the mean ~7e-4)
        assert abs(raw.mean() - 0.6) < 0.0035
        emitted = np.stack([sample_step_mask(rng, 5, 0.4) for _ in range(100_000)])
        # redrawing all-dropped masks lifts the per-step rate to 0.6 / (1 - 0.4**5)
        assert 0.60 <= emitted.mean() <= 0.64
        assert abs(emitted.mean() - 0.6 / (1 - 0.4 ** 5)) < 0.0035

    def test_rate_validated(self):
        with pytest.raises(ValueError):
            sample_step_mask(np.random.default_rng(0), 5, 1.0)

    def test_masked_average_t1_is_exact(self, rng):
        d = Tensor(rng.dirichlet(np.ones(6), size=2))
        np.testing.assert_array_equal(masked_average([d], np.ones((2, 1), bool)).data, d.data)

    def test_stochastic_average_eval_keeps_all(self, rng):
        dists = [Tensor(rng.dirichlet(np.ones(5))) for _ in range(4)]
        avg, mask = stochastic_average(dists, 0.4, rng, training=False)
        assert mask.all()
        np.testing.assert_allclose(avg.data, np.mean([d.data for d in dists], axis=0), atol=1e-15)

    def test_stochastic_average_training_renormalises(self, rng):
        dists = [Tensor(rng.dirichlet(np.ones(5))) for _ in range(5)]
        avg, mask = stochastic_average(dists, 0.4, np.random.default_rng(4), training=True)
        kept = [d.data for d, k in zip(dists, mask) if k]
        np.testing.assert_allclose(avg.data, np.mean(kept, axis=0), atol=1e-15)
        assert abs(avg.data.sum() - 1.0) < 1e-12


class TestDecoding:
    def brute(self, b, e, max_len):
        spans = [(b[i] * e[j], i, j) for i in range(len(b)) for j in range(len(b)) if 0 <= j - i < max_len]
        return sorted(spans, key=lambda s: (-s[0], s[1], s[2]))

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
    def test_decode_and_kbest_match_enumeration(self, n, max_len, seed):
        r = np.random.default_rng(seed)
        b, e = r.dirichlet(np.ones(n)), r.dirichlet(np.ones(n))
        ref = self.brute(b, e, max_len)
        best = decode_span(b, e, max_len)
        assert (best.start, best.end) == (ref[0][1], ref[0][2])
        top = kbest_spans(b, e, 4, max_len)
        assert [(s.start, s.end) for s in top] == [(i, j) for _, i, j in ref[:4]]
        assert all(x.score >= y.score for x, y in zip(top, top[1:]))

    def test_ties_break_to_smaller_start(self):
        b = np.array([0.5, 0.5])
        e = np.array([0.0, 1.0])
        assert (decode_span(b, e).start, decode_span(b, e).end) == (0, 1)

    def test_max_span_len(self):
        b = np.array([1.0, 0, 0, 0])
        e = np.array([0, 0, 0, 1.0])
        span = decode_span(b, e, max_span_len=2)
        assert span.end - span.start < 2

    def test_kbest_validates_k(self):
        with pytest.raises(ValueError):
            kbest_spans(np.ones(3) / 3, np.ones(3) / 3, 0)


class TestLoss:
    def test_value(self):
        b = Tensor([0.2, 0.5, 0.3])
        e = Tensor([0.1, 0.1, 0.8])
        assert span_loss(b, e, 1, 2).data == pytest.approx(-np.log(0.5 + 1e-12) - np.log(0.8 + 1e-12), abs=1e-15)

    def test_out_of_range_gold(self):
        with pytest.raises(DataError):
            span_loss(Tensor([0.5, 0.5]), Tensor([0.5, 0.5]), 0, 2)

    def test_step_nll_averages_kept_steps(self, rng, memory):
        Hq, M, q_mask, p_mask = memory
        out = AnswerModule(rng, 3)(Hq, M, q_mask, p_mask, Graph(8, training=True), 4, "san")
        got = step_nll_loss(out, np.array([1, 2]), np.array([3, 4])).data
        for k in range(2):
            kept = np.flatnonzero(out.active_mask[k])
            want = np.mean([-np.log(out.per_step_begin[t].data[k, [1, 2][k]] + 1e-12)
                            - np.log(out.per_step_end[t].data[k, [3, 4][k]] + 1e-12) for t in kept])
            assert got[k] == pytest.approx(want, abs=1e-12)


def test_all_legal_masks_enumerated():
    legal = [m for m in itertools.product([0, 1], repeat=5) if any(m)]
    assert len(legal) == 31


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def _sigmoid(x):
    return 1 / (1 + np.exp(-x))


class TestWorkedExamples:
    def test_initial_state_single_and_identical_tokens(self, rng):
        ans = AnswerModule(rng, 3)
        one = rng.standard_normal((1, 1, 6))
        np.testing.assert_array_equal(initial_state(ans, Tensor(one)).data, one[:, 0])
        same = np.repeat(one, 4, axis=1)
        np.testing.assert_allclose(initial_state(ans, Tensor(same)).data, one[:, 0], atol=1e-15)

    def test_one_step_computes_one_pair(self, rng, memory):
        Hq, M, q_mask, p_mask = memory
        out = AnswerModule(rng, 3)(Hq, M, q_mask, p_mask, None, steps=1)
        assert len(out.per_step_begin) == len(out.per_step_end) == 1

    def test_single_token_passage(self, rng):
        ans = AnswerModule(rng, 3)
        out = ans(Tensor(rng.standard_normal((1, 3, 6))), Tensor(rng.standard_normal((1, 1, 6))),
                  None, None, None, steps=4)
        for d in out.per_step_begin + out.per_step_end:
            np.testing.assert_array_equal(d.data, [[1.0]])

    def test_three_steps_match_loop(self, rng):
        ans = AnswerModule(rng, 3)
        Hq, M = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        out = ans(Tensor(Hq[None]), Tensor(M[None]), None, None, None, steps=3)
        s = _softmax(Hq @ ans.w4.data[:, 0]) @ Hq
        Wx, Wh, b = ans.gru.W_x.data, ans.gru.W_h.data, ans.gru.b.data
        for t in range(3):
            if t > 0:
                x = _softmax(M @ (s @ ans.W5.data)) @ M
                z = _sigmoid(x @ Wx[:, :6] + s @ Wh[:, :6] + b[:6])
                r = _sigmoid(x @ Wx[:, 6:12] + s @ Wh[:, 6:12] + b[6:12])
                s = (1 - z) * s + z * np.tanh(x @ Wx[:, 12:] + (r * s) @ Wh[:, 12:] + b[12:])
            pb = _softmax(M @ (s @ ans.W6.data))
            pe = _softmax(M @ (np.concatenate([s, pb @ M]) @ ans.W7.data))
            np.testing.assert_allclose(out.per_step_begin[t].data[0], pb, atol=1e-13)
            np.testing.assert_allclose(out.per_step_end[t].data[0], pe, atol=1e-13)

    def test_eval_average(self, rng):
        dists = [Tensor([0.2, 0.8]), Tensor([0.6, 0.4])]
        avg, _ = stochastic_average(dists, 0.4, rng, training=False)
        np.testing.assert_allclose(avg.data, [0.4, 0.6], atol=1e-15)

    def test_identical_steps_survive_any_mask(self, rng):
        d = rng.dirichlet(np.ones(5))
        for m in itertools.product([0, 1], repeat=3):
            if any(m):
                avg = masked_average([Tensor(d[None])] * 3, np.array([m], dtype=bool))
                np.testing.assert_allclose(avg.data[0], d, atol=1e-15)

    def test_decode_cases(self):
        span = decode_span([1.0, 0.0], [0.0, 1.0])
        assert (span.start, span.end, span.score) == (0, 1, 1.0)
        span = decode_span([0.7, 0.3], [0.1, 0.9])
        assert (span.start, span.end) == (0, 1) and span.score == pytest.approx(0.63, abs=1e-15)

    def test_span_length_one_is_elementwise_argmax(self, rng):
        b, e = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        span = decode_span(b, e, max_span_len=1)
        assert span.start == span.end == int(np.argmax(b * e))

    def test_kbest_one_equals_decode(self, rng):
        b, e = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        best, top = decode_span(b, e), kbest_spans(b, e, 1)[0]
        assert (best.start, best.end, best.score) == (top.start, top.end, top.score)

    def test_loss_limits(self):
        assert span_loss(Tensor([0.0, 1.0, 0.0]), Tensor([0.0, 0.0, 1.0]), 1, 2).data == pytest.approx(0.0, abs=1e-11)
        n = 7
        u = Tensor(np.full(n, 1 / n))
        assert abs(span_loss(u, u, 0, 3).data - 2 * np.log(n)) < 1e-9
