"""Lexicon features: word/POS/NER embeddings, exact-match flags and the soft
question alignment attached to every passage token."""
from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .data import NUM_NER, NUM_POS, AnnotatedExample, AnnotatedToken, Vocab, collate
from .layers import Module, param
from .tensor import Tensor

logger = logging.getLogger(__name__)


def exact_match_features(passage: list[AnnotatedToken], question: list[AnnotatedToken]) -> np.ndarray:
    """(3, n) binary flags: original, lowercase and lemma match against Q."""
    if not passage or not question:
        raise ValueError("exact-match features need non-empty passage and question")
    orig = {t.text for t in question}
    lower = {t.text.casefold() for t in question}
    lemma = {t.lemma for t in question}
    out = np.zeros((3, len(passage)))
    for i, t in enumerate(passage):
        out[0, i] = t.text in orig
        out[1, i] = t.text.casefold() in lower
        out[2, i] = t.lemma in lemma
    return out


def align_features(passage_emb: Tensor, question_emb: Tensor, align_W0: Tensor,
                   q_mask=None, return_weights: bool = False):
    """Soft alignment of each passage token to the question.

    gamma[i, j] = softmax_j(g(p_i) . g(q_j)) with g(x) = ReLU(x W0); the output
    row i is sum_j gamma[i, j] g(q_j).  Works on (n, e) / (m, e) inputs or on
    batches (B, n, e) / (B, m, e) with a (B, m) question mask.
    """
    gp = T.relu(passage_emb @ align_W0)
    gq = T.relu(question_emb @ align_W0)
    scores = gp @ T.swapaxes(gq, -1, -2)
    mask = None if q_mask is None else np.asarray(q_mask, dtype=bool)[..., None, :]
    gamma = T.softmax(scores, axis=-1, mask=mask)
    out = gamma @ gq
    return (out, gamma) if return_weights else out


class EmbeddingSet(Module):
    """Trainable lookup tables plus the alignment projection W0.

    Row 0 of every table (PAD, and UNK for the tag tables) stays zero; rows
    initialised from a pre-trained file are frozen.
    """

    def __init__(self, rng, vocab_size: int, word_dim: int = 300, pos_dim: int = 9,
                 ner_dim: int = 8, align_dim: int = 280):
        word = rng.normal(0.0, 0.1, size=(vocab_size, word_dim))
        word[0] = 0.0
        pos = rng.normal(0.0, 0.1, size=(NUM_POS, pos_dim))
        pos[0] = 0.0
        ner = rng.normal(0.0, 0.1, size=(NUM_NER, ner_dim))
        ner[0] = 0.0
        self.word_table = param(word)
        self.pos_table = param(pos)
        self.ner_table = param(ner)
        bound = 1.0 / np.sqrt(word_dim)
        self.align_W0 = param(rng.uniform(-bound, bound, size=(word_dim, align_dim)))
        self.frozen_rows = np.zeros(vocab_size, dtype=bool)
        self.frozen_rows[0] = True

    @property
    def passage_dim(self) -> int:
        return (self.word_table.shape[1] + self.pos_table.shape[1] + self.ner_table.shape[1]
                + 3 + self.align_W0.shape[1])

    @property
    def question_dim(self) -> int:
        return self.word_table.shape[1]

    def mask_gradients(self) -> None:
        """Zero gradients of PAD/UNK-tag rows and of frozen pre-trained rows."""
        if self.word_table.grad is not None:
            self.word_table.grad[self.frozen_rows] = 0.0
        for table in (self.pos_table, self.ner_table):
            if table.grad is not None:
                table.grad[0] = 0.0

    def load_pretrained(self, path, vocab: Vocab) -> int:
        """Copy vectors for vocab words from a text embedding file and freeze them."""
        dim = self.word_table.shape[1]
        hits = 0
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) < dim + 1:
                    continue
                word, values = " ".join(parts[:-dim]), parts[-dim:]
                if word not in vocab:
                    continue
                try:
                    vec = np.array([float(v) for v in values])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric embedding value") from None
                row = vocab.index(word)
                self.word_table.data[row] = vec
                self.frozen_rows[row] = True
                hits += 1
        logger.info("initialised %d/%d vocab rows from %s", hits, len(vocab), path)
        return hits

    def __call__(self, batch):
        """Batched lexicon vectors: passage (B, n, passage_dim), question (B, m, question_dim)."""
        ep = T.embedding_lookup(self.word_table, batch.p_ids)
        eq = T.embedding_lookup(self.word_table, batch.q_ids)
        align = align_features(ep, eq, self.align_W0, batch.q_mask)
        passage = T.concat([ep,
                            T.embedding_lookup(self.pos_table, batch.p_pos),
                            T.embedding_lookup(self.ner_table, batch.p_ner),
                            Tensor(batch.p_match),
                            align], axis=-1)
        return passage, eq


def build_lexicon_vectors(example: AnnotatedExample, emb: EmbeddingSet, vocab: Vocab):
    """Single-example lexicon vectors, feature-major: (passage_dim, n), (question_dim, m)."""
    batch = collate([example], vocab)
    passage, question = emb(batch)
    return T.transpose(passage[0]), T.transpose(question[0])
