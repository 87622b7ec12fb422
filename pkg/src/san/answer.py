"""Multi-step answer module with stochastic prediction dropout.

A GRU state, initialised from an attention summary of the question, is
refined for T steps against the working memory.  Every step emits begin/end
distributions through bilinear scores; during training whole steps are
randomly dropped before the per-step distributions are averaged.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import GRUCell, Module, param, uniform
from .tensor import Graph, Tensor

VARIANTS = ("san", "onestep", "memnet_final", "memnet_avg")
EPS = 1e-12


class DataError(ValueError):
    """Gold annotation inconsistent with the model input."""


@dataclass
class SpanDistributions:
    per_step_begin: list[Tensor]   # T x (B, n)
    per_step_end: list[Tensor]
    avg_begin: Tensor              # (B, n)
    avg_end: Tensor
    active_mask: np.ndarray        # (B, T) bool; end mask when masks are independent
    begin_mask: np.ndarray | None = None


@dataclass(frozen=True)
class DecodedSpan:
    start: int
    end: int
    score: float


class AnswerModule(Module):
    def __init__(self, rng, d: int, multi_step: bool = True):
        dim = 2 * d
        # step-0 parameters first so every variant draws them identically
        self.w4 = param(uniform(rng, (dim, 1), dim))
        self.W6 = param(uniform(rng, (dim, dim), dim))
        self.W7 = param(uniform(rng, (2 * dim, dim), 2 * dim))
        self.multi_step = multi_step
        if multi_step:
            self.W5 = param(uniform(rng, (dim, dim), dim))
            self.gru = GRUCell(rng, dim, dim)

    def __call__(self, Hq: Tensor, M: Tensor, q_mask, p_mask, graph: Graph | None = None,
                 steps: int = 5, variant: str = "san", rate: float = 0.4, keys=None,
                 independent_masks: bool = False) -> SpanDistributions:
        if variant not in VARIANTS:
            raise ValueError(f"unknown answer variant {variant!r}")
        if variant == "onestep":
            steps = 1
        s0 = initial_state(self, Hq, q_mask)
        begins, ends = reason_steps(self, s0, M, p_mask, steps)
        training = graph is not None and graph.training
        B = M.shape[0]
        if variant == "memnet_final":
            mask = np.zeros((B, steps), dtype=bool)
            mask[:, -1] = True
            return SpanDistributions(begins, ends, begins[-1], ends[-1], mask)
        if variant == "san" and training:
            rngs = _mask_rngs(graph, keys, B)
            mask_b = np.stack([sample_step_mask(r, steps, rate) for r in rngs])
            mask_e = np.stack([sample_step_mask(r, steps, rate) for r in rngs]) if independent_masks else mask_b
        else:
            mask_b = mask_e = np.ones((B, steps), dtype=bool)
        avg_b = masked_average(begins, mask_b)
        avg_e = masked_average(ends, mask_e)
        return SpanDistributions(begins, ends, avg_b, avg_e, mask_e,
                                 mask_b if independent_masks else None)


def _mask_rngs(graph: Graph, keys, B: int) -> list[np.random.Generator]:
    mask_seed = getattr(graph, "mask_seed", None)
    if mask_seed is None or keys is None:
        return [graph.rng] * B
    return [np.random.default_rng([int(mask_seed), int(k)]) for k in keys]


def initial_state(ans: AnswerModule, Hq: Tensor, q_mask=None) -> Tensor:
    """s0 = sum_j alpha_j Hq_j with alpha = softmax_j(w4 . Hq_j)."""
    scores = T.reshape(Hq @ ans.w4, Hq.shape[:-1])
    alpha = T.softmax(scores, axis=-1, mask=q_mask)
    return _weighted_sum(alpha, Hq)


def _weighted_sum(weights: Tensor, X: Tensor) -> Tensor:
    """sum_j weights[..., j] X[..., j, :] for weights (B, L), X (B, L, k)."""
    B, L = weights.shape
    return T.reshape(T.reshape(weights, (B, 1, L)) @ X, (B, X.shape[-1]))


def _bilinear(v: Tensor, M: Tensor) -> Tensor:
    """Scores v_b . M_{b,j} for v (B, k), M (B, n, k) -> (B, n)."""
    B, k = v.shape
    return T.reshape(M @ T.reshape(v, (B, k, 1)), M.shape[:-1])


def predict_step(ans: AnswerModule, s: Tensor, M: Tensor, p_mask=None) -> tuple[Tensor, Tensor]:
    """Begin/end distributions from state s over memory M."""
    p_begin = T.softmax(_bilinear(s @ ans.W6, M), axis=-1, mask=p_mask)
    pointed = _weighted_sum(p_begin, M)
    p_end = T.softmax(_bilinear(T.concat([s, pointed], axis=-1) @ ans.W7, M), axis=-1, mask=p_mask)
    return p_begin, p_end


def reason_steps(ans: AnswerModule, s0: Tensor, M: Tensor, p_mask=None, steps: int = 5):
    """Run the GRU for ``steps`` predictions; step 0 predicts from s0."""
    if steps < 1:
        raise ValueError("the answer module needs at least one step")
    if steps > 1 and not ans.multi_step:
        raise ValueError("this answer module was built without recurrent parameters")
    begins, ends = [], []
    s = s0
    for t in range(steps):
        if t > 0:
            beta = T.softmax(_bilinear(s @ ans.W5, M), axis=-1, mask=p_mask)
            s = ans.gru(s, _weighted_sum(beta, M))
        b, e = predict_step(ans, s, M, p_mask)
        begins.append(b)
        ends.append(e)
    return begins, ends


def single_step_predict(ans: AnswerModule, Hq: Tensor, M: Tensor, q_mask=None, p_mask=None):
    """Standard one-step predictor: begin/end from s0 with no averaging."""
    return predict_step(ans, initial_state(ans, Hq, q_mask), M, p_mask)


# --------------------------------------------------------------------------
# stochastic prediction dropout


def bernoulli_keep(rng: np.random.Generator, steps: int, rate: float) -> np.ndarray:
    """One raw draw of independent keep decisions, P(keep) = 1 - rate."""
    return rng.random(steps) >= rate


def sample_step_mask(rng: np.random.Generator, steps: int, rate: float) -> np.ndarray:
    """Keep mask over steps, redrawn whole until at least one step survives."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"prediction dropout rate must lie in [0, 1), got {rate}")
    while True:
        mask = bernoulli_keep(rng, steps, rate)
        if mask.any():
            return mask


def masked_average(dists: Sequence[Tensor], mask: np.ndarray) -> Tensor:
    """Mean of the kept per-step distributions, per row of ``mask`` (B, T)."""
    mask = np.asarray(mask, dtype=bool)
    weights = mask / mask.sum(axis=1, keepdims=True)
    total = None
    for t, dist in enumerate(dists):
        w = weights[:, t:t + 1]
        if not w.any():
            continue
        term = dist * w
        total = term if total is None else total + term
    return total


def stochastic_average(dists: Sequence[Tensor], rate: float, rng: np.random.Generator,
                       training: bool) -> tuple[Tensor, np.ndarray]:
    """Average T distributions of shape (n,) or (B, n).

    Training draws one step mask per row; evaluation keeps every step.
    """
    squeeze = dists[0].ndim == 1
    if squeeze:
        dists = [T.reshape(d, (1, -1)) for d in dists]
    B, steps = dists[0].shape[0], len(dists)
    if training:
        mask = np.stack([sample_step_mask(rng, steps, rate) for _ in range(B)])
    else:
        mask = np.ones((B, steps), dtype=bool)
    avg = masked_average(dists, mask)
    if squeeze:
        return T.reshape(avg, (avg.shape[-1],)), mask[0]
    return avg, mask


# --------------------------------------------------------------------------
# decoding


def _span_scores(avg_begin: np.ndarray, avg_end: np.ndarray, max_span_len: int) -> np.ndarray:
    n = len(avg_begin)
    i, j = np.indices((n, n))
    legal = (j >= i) & (j - i < max_span_len)
    return np.where(legal, np.outer(avg_begin, avg_end), -np.inf)


def decode_span(avg_begin, avg_end, max_span_len: int = 15) -> DecodedSpan:
    """Most probable legal span; ties go to the smaller start, then end."""
    b = np.asarray(getattr(avg_begin, "data", avg_begin), dtype=np.float64)
    e = np.asarray(getattr(avg_end, "data", avg_end), dtype=np.float64)
    scores = _span_scores(b, e, max_span_len)
    flat = int(np.argmax(scores))  # row-major first hit = smallest (i, j)
    i, j = divmod(flat, len(b))
    return DecodedSpan(i, j, float(scores[i, j]))


def kbest_spans(avg_begin, avg_end, K: int, max_span_len: int = 15) -> list[DecodedSpan]:
    """Top-K legal spans by P_begin * P_end, same tie-break as decode_span."""
    if K < 1:
        raise ValueError("K must be at least 1")
    b = np.asarray(getattr(avg_begin, "data", avg_begin), dtype=np.float64)
    e = np.asarray(getattr(avg_end, "data", avg_end), dtype=np.float64)
    scores = _span_scores(b, e, max_span_len)
    i, j = np.nonzero(np.isfinite(scores))
    vals = scores[i, j]
    order = np.lexsort((j, i, -vals))[:K]
    return [DecodedSpan(int(i[k]), int(j[k]), float(vals[k])) for k in order]


# --------------------------------------------------------------------------
# objective


def span_loss(avg_begin: Tensor, avg_end: Tensor, gold_start, gold_end, eps: float = EPS) -> Tensor:
    """-log(P_begin[start] + eps) - log(P_end[end] + eps), per example.

    Accepts (n,) distributions with scalar gold indices (returns a scalar)
    or (B, n) with index arrays (returns (B,)).
    """
    single = avg_begin.ndim == 1
    if single:
        avg_begin = T.reshape(avg_begin, (1, -1))
        avg_end = T.reshape(avg_end, (1, -1))
    starts = np.atleast_1d(np.asarray(gold_start, dtype=np.int64))
    ends = np.atleast_1d(np.asarray(gold_end, dtype=np.int64))
    n = avg_begin.shape[1]
    if ((starts < 0) | (starts >= n) | (ends < 0) | (ends >= n)).any():
        raise DataError(f"gold span outside passage of length {n}")
    rows = np.arange(avg_begin.shape[0])
    loss = -(T.log(avg_begin[rows, starts] + eps) + T.log(avg_end[rows, ends] + eps))
    return T.reshape(loss, ()) if single else loss


def step_nll_loss(dists: SpanDistributions, gold_start, gold_end, eps: float = EPS) -> Tensor:
    """Alternative objective: NLL of each kept step, averaged over kept steps."""
    begin_mask = dists.begin_mask if dists.begin_mask is not None else dists.active_mask
    end_mask = dists.active_mask
    total = None
    for t, (b, e) in enumerate(zip(dists.per_step_begin, dists.per_step_end)):
        wb = begin_mask[:, t] / begin_mask.sum(axis=1)
        we = end_mask[:, t] / end_mask.sum(axis=1)
        if not (wb.any() or we.any()):
            continue
        rows = np.arange(b.shape[0])
        term = -(T.log(b[rows, gold_start] + eps) * wb + T.log(e[rows, gold_end] + eps) * we)
        total = term if total is None else total + term
    return total
