"""Lexicon FFNs, shared contextual BiLSTMs and working-memory generation.

Tensors are batch-first.  Attention matrices are stored (B, passage, question)
and (B, passage, passage): row i holds the weights passage token i spreads
over the other sequence, i.e. the transpose of the column-stochastic
matrices in the usual feature-major notation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import AttentionTransform, BiLSTM, FFN, Maxout, Module
from .tensor import Graph, Tensor

logger = logging.getLogger(__name__)


@dataclass
class WorkingMemory:
    M: Tensor                 # (B, n, 2d)
    Hq: Tensor                # (B, m, 2d)
    Hp: Tensor                # (B, n, 2d)
    attention_C: np.ndarray   # (B, n, m), before dropout
    self_attention: np.ndarray  # (B, n, n), before dropout


class Encoder(Module):
    def __init__(self, rng, passage_dim: int, question_dim: int, d: int = 128,
                 ffn_hidden: int | None = None, maxout_k: int = 2, cove_dim: int = 0,
                 attn_dim: int | None = None):
        self.d = d
        self.cove_dim = cove_dim
        k = attn_dim or d
        h = ffn_hidden or d
        self.ffn_q = FFN(rng, question_dim, h, d)
        self.ffn_p = FFN(rng, passage_dim, h, d)
        self.ctx1 = BiLSTM(rng, d + cove_dim, d)
        self.shrink1 = Maxout(rng, 2 * d, d, maxout_k)
        self.ctx2 = BiLSTM(rng, d + cove_dim, d)
        self.shrink2 = Maxout(rng, 2 * d, d, maxout_k)
        self.attn = AttentionTransform(rng, 2 * d, k)
        self.self_attn = AttentionTransform(rng, 4 * d, k)
        self.memory = BiLSTM(rng, 8 * d, d)

    def __call__(self, lex_p: Tensor, lex_q: Tensor, batch, graph: Graph | None,
                 hidden_dropout: float = 0.0, attn_dropout: float = 0.0) -> WorkingMemory:
        Eq = self.ffn_q(lex_q)
        Ep = self.ffn_p(lex_p)
        Hq, Hp = contextual_encode(self, Eq, Ep, batch.q_mask, batch.p_mask, graph, hidden_dropout,
                                   batch.cove_q, batch.cove_p)
        C, C_raw = cross_attention(self, Hq, Hp, batch.q_mask, graph, attn_dropout)
        Up = gather_passage(Hp, Hq, C)
        Up_hat, S_raw = self_attention(self, Up, batch.p_mask, graph, attn_dropout)
        M = build_memory(self, Up, Up_hat, batch.p_mask, graph, hidden_dropout)
        return WorkingMemory(M, Hq, Hp, C_raw, S_raw)


def _with_cove(x: Tensor, cove) -> Tensor:
    return x if cove is None else T.concat([x, Tensor(cove)], axis=-1)


def contextual_encode(enc: Encoder, Eq: Tensor, Ep: Tensor, q_mask=None, p_mask=None,
                      graph: Graph | None = None, dropout: float = 0.0,
                      cove_q=None, cove_p=None) -> tuple[Tensor, Tensor]:
    """Two maxout-shrunk BiLSTM layers shared by question and passage.

    Returns H = [layer1; layer2] with 2d features per token.
    """
    if (cove_q is None) != (cove_p is None) or (cove_q is not None and enc.cove_dim == 0):
        raise T.DimensionError("CoVe vectors must be given for both sides and enabled in the encoder")
    for E, cove in ((Eq, cove_q), (Ep, cove_p)):
        if cove is not None and (cove.shape[:-1] != E.shape[:-1] or cove.shape[-1] != enc.cove_dim):
            raise T.DimensionError(f"CoVe shape {cove.shape} does not match lexicon shape {E.shape}")

    def encode(E, mask, cove):
        x1 = T.dropout(_with_cove(E, cove), dropout, graph)
        h1 = enc.shrink1(enc.ctx1(x1, mask))
        x2 = T.dropout(_with_cove(h1, cove), dropout, graph)
        h2 = enc.shrink2(enc.ctx2(x2, mask))
        return T.concat([h1, h2], axis=-1)

    return encode(Eq, q_mask, cove_q), encode(Ep, p_mask, cove_p)


def cross_attention(enc: Encoder, Hq: Tensor, Hp: Tensor, q_mask=None,
                    graph: Graph | None = None, dropout: float = 0.0) -> tuple[Tensor, np.ndarray]:
    """Dot-product attention of passage tokens over question tokens.

    Returns (dropped-out weights, pre-dropout weights); each passage row of
    the pre-dropout matrix sums to 1 over the question.
    """
    hq = enc.attn(Hq)
    hp = enc.attn(Hp)
    scores = hp @ T.swapaxes(hq, -1, -2)
    mask = None if q_mask is None else np.asarray(q_mask, dtype=bool)[..., None, :]
    C = T.softmax(scores, axis=-1, mask=mask)
    return T.dropout(C, dropout, graph), C.data


def gather_passage(Hp: Tensor, Hq: Tensor, C: Tensor) -> Tensor:
    """U = [H^p ; question-aware H^q mixture], 4d features per passage token."""
    return T.concat([Hp, C @ Hq], axis=-1)


def self_attention(enc: Encoder, Up: Tensor, p_mask=None, graph: Graph | None = None,
                   dropout: float = 0.0) -> tuple[Tensor, np.ndarray]:
    """Passage self-attention that may not attend to the token itself.

    The diagonal is excluded before normalisation (equivalently: zeroed and
    renormalised), so it is exactly 0 in both train and eval mode.  A
    single-token passage has nothing to attend to and gets a zero output.
    """
    B, n, _ = Up.shape
    u = enc.self_attn(Up)
    scores = u @ T.swapaxes(u, -1, -2)
    valid = ~np.eye(n, dtype=bool)[None]
    if p_mask is not None:
        valid = valid & np.asarray(p_mask, dtype=bool)[:, None, :]
    if n == 1 or (p_mask is not None and (np.asarray(p_mask).sum(axis=1) == 1).any()):
        logger.debug("single-token passage: self-attention output is zero")
    A = T.softmax(scores, axis=-1, mask=valid)
    return T.dropout(A, dropout, graph) @ Up, A.data


def build_memory(enc: Encoder, Up: Tensor, Up_hat: Tensor, p_mask=None,
                 graph: Graph | None = None, dropout: float = 0.0) -> Tensor:
    x = T.dropout(T.concat([Up, Up_hat], axis=-1), dropout, graph)
    return enc.memory(x, p_mask)
