import math
from dataclasses import replace

import numpy as np
import pytest

from san.data import SyntheticConfig, generate_synthetic
from san.tensor import NumericError, Tensor
from san.train import (Adamax, Corpus, TrainConfig, clip_grad_norm, lr_at_epoch, population_std, predict,
                       run_ablation, seed_robustness, train)

from conftest import TINY


def scalar_adamax(theta, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float Adamax written out step by step."""
    m = u = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        u = max(b2 * u, abs(g))
        theta = theta - (lr / (1 - b1 ** t)) * m / (u + eps)
        out.append(theta)
    return out


class TestAdamax:
    def test_bitwise_against_scalar_reference(self):
        targets = np.array([3.0, -1.5])
        p = Tensor(np.array([0.2, 0.7]), requires_grad=True)
        opt = Adamax([("p", p)])
        traj = []
        for _ in range(10):
            p.grad = 2 * (p.data - targets)
            opt.step(0.01)
            traj.append(p.data.copy())
        for k in range(2):
            ref = scalar_adamax(float([0.2, 0.7][k]), lambda x: 2 * (x - targets[k]), 0.01, 10)
            assert [float(x[k]) for x in traj] == ref

    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adamax([("p", p)])
        for _ in range(3):
            p.grad = np.zeros(2)
            opt.step(0.1)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_constant_gradient_step_approaches_lr(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adamax([("p", p)])
        for _ in range(200):
            before = p.data.copy()
            p.grad = np.array([3.0])
            opt.step(0.01)
        assert (before - p.data)[0] == pytest.approx(0.01, rel=1e-6)
        assert opt.u[0][0] == 3.0

    def test_nan_gradient_names_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(NumericError, match="encoder.W"):
            Adamax([("encoder.W", p)]).step(0.1)

    def test_schedule(self):
        lrs = [lr_at_epoch(0.002, e) for e in range(1, 32)]
        assert lrs[:10] == [0.002] * 10 and lrs[10:20] == [0.001] * 10
        changes = [e for e in range(2, 32) if lr_at_epoch(0.002, e) != lr_at_epoch(0.002, e - 1)]
        assert changes == [11, 21, 31]

    def test_clip(self):
        a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_grad_norm([a, b], 1.0) == 5.0
        assert math.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum()) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def tiny_corpus():
    exs = generate_synthetic(SyntheticConfig(num_examples=48, seed=9, passage_len_range=(6, 10)))
    return Corpus(exs[:32], exs[32:])


def tiny_config(**kw):
    return TrainConfig(**{"epochs": 2, "batch_size": 8, "seed": 1, "T": 3, **kw})


class TestTrain:
    def test_zero_epochs_returns_initialisation(self, tiny_corpus):
        res = train(tiny_config(epochs=0), tiny_corpus, TINY)
        assert res.curve.rows == [] and res.best_epoch == 0
        fresh = train(tiny_config(epochs=0), tiny_corpus, TINY)
        for k, v in res.best_state.items():
            np.testing.assert_array_equal(v, fresh.best_state[k])

    def test_reproducible(self, tiny_corpus):
        a = train(tiny_config(), tiny_corpus, TINY)
        b = train(tiny_config(), tiny_corpus, TINY)
        assert a.curve.to_csv() == b.curve.to_csv()
        for k in a.best_state:
            np.testing.assert_array_equal(a.best_state[k], b.best_state[k])
        assert a.curve.to_csv().splitlines()[0] == "epoch,split,em,f1,loss,lr"
        assert len(a.curve.rows) == 2

    def test_parameters_change(self, tiny_corpus):
        init = train(tiny_config(epochs=0), tiny_corpus, TINY).model.state_dict()
        res = train(tiny_config(epochs=1), tiny_corpus, TINY)
        moved = [k for k in init if not np.array_equal(init[k], res.model.state_dict()[k])]
        assert len(moved) == len(init)

    def test_divergence_keeps_last_good_state(self, tiny_corpus):
        snapshots = []

        def poison(row, model):
            snapshots.append({k: v.copy() for k, v in model.state_dict().items()})
            model.encoder.ffn_p.W1.data[:] = np.nan

        res = train(tiny_config(epochs=3), tiny_corpus, TINY, on_epoch=poison)
        assert res.diverged and len(res.curve.rows) == 1
        for k, v in res.model.state_dict().items():
            np.testing.assert_array_equal(v, snapshots[0][k])

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            train(tiny_config(), Corpus([], []), TINY)

    def test_config_validation(self):
        for bad in ({"lr": 0}, {"T": 0}, {"answer_variant": "reasonet"}, {"hidden_dropout": 1.0},
                    {"objective": "other"}):
            with pytest.raises(ValueError):
                TrainConfig(**bad)
        assert TrainConfig(answer_variant="onestep").steps == 1

    def test_parallel_prediction_matches_serial(self, tiny_corpus):
        res = train(tiny_config(epochs=1), tiny_corpus, TINY)
        cfg = tiny_config(eval_batch_size=4)
        a = predict(res.model, tiny_corpus.dev, cfg, workers=1)
        b = predict(res.model, tiny_corpus.dev, cfg, workers=3)
        assert a.records == b.records and a.answers == b.answers


class TestProtocols:
    def test_population_std(self):
        assert population_std([1.0, 1.0]) == 0.0
        assert population_std([1.0, 3.0]) == 1.0

    def test_identical_seeds_zero_std(self, tiny_corpus):
        stats = seed_robustness(tiny_config(epochs=1), tiny_corpus, [4, 4], TINY)
        assert stats.em_std == 0.0 and stats.f1_std == 0.0
        assert len(stats.table().splitlines()) == 1 + 2 + 2
        with pytest.raises(ValueError):
            seed_robustness(tiny_config(), tiny_corpus, [1], TINY)

    def test_ablation_rows_and_parameter_counts(self, tiny_corpus):
        cache = {}
        rep = run_ablation(tiny_config(epochs=1), tiny_corpus, seeds=[2], model_config=TINY, cache=cache)
        assert list(rep.variants) == ["san", "onestep", "memnet_final", "memnet_avg"]
        assert rep.param_counts["onestep"] < rep.param_counts["san"] == rep.param_counts["memnet_avg"]
        assert len(rep.table().splitlines()) == 5
        single = run_ablation(tiny_config(epochs=1), tiny_corpus, ["san"], [2], TINY, cache=cache)
        assert single.variants["san"].em == rep.variants["san"].em


def test_single_variant_ablation_is_train_plus_eval(tiny_corpus):
    rep = run_ablation(tiny_config(epochs=1), tiny_corpus, ["san"], [2], TINY)
    direct = train(tiny_config(epochs=1, seed=2), tiny_corpus, TINY)
    assert rep.variants["san"].em == [direct.best_em] and rep.variants["san"].f1 == [direct.best_f1]
