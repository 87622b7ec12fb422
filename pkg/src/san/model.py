"""The full network: lexicon features -> encoder -> working memory -> answer module."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .answer import AnswerModule, SpanDistributions, span_loss, step_nll_loss
from .checkpoint import load_arrays, save_arrays
from .data import Vocab, derive_seed
from .encoder import Encoder, WorkingMemory
from .layers import GRU_GATES, LSTM_GATES, Module
from .lexicon import EmbeddingSet
from .tensor import Graph, Tensor


@dataclass
class ModelConfig:
    d: int = 128
    word_dim: int = 300
    pos_dim: int = 9
    ner_dim: int = 8
    align_dim: int = 280
    ffn_hidden: int | None = None
    attn_dim: int | None = None
    maxout_k: int = 2
    cove_dim: int = 0
    max_span_len: int = 15

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ForwardOptions:
    steps: int = 5
    variant: str = "san"
    hidden_dropout: float = 0.4
    prediction_dropout: float = 0.4
    independent_masks: bool = False
    objective: str = "avg_nll"


class SANModel(Module):
    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0, multi_step: bool = True):
        self.config = config
        self.vocab = vocab
        self.seed = seed
        # separate init streams: the answer module can change without
        # disturbing the lower layers' initial weights
        self.lexicon = EmbeddingSet(np.random.default_rng(derive_seed(seed, "init.lexicon")),
                                    len(vocab), config.word_dim, config.pos_dim,
                                    config.ner_dim, config.align_dim)
        self.encoder = Encoder(np.random.default_rng(derive_seed(seed, "init.encoder")),
                               self.lexicon.passage_dim, self.lexicon.question_dim, config.d,
                               config.ffn_hidden, config.maxout_k, config.cove_dim, config.attn_dim)
        self.answer = AnswerModule(np.random.default_rng(derive_seed(seed, "init.answer")),
                                   config.d, multi_step)

    def encode(self, batch, graph: Graph | None, hidden_dropout: float = 0.0) -> WorkingMemory:
        lex_p, lex_q = self.lexicon(batch)
        return self.encoder(lex_p, lex_q, batch, graph, hidden_dropout, hidden_dropout)

    def forward(self, batch, graph: Graph | None, opts: ForwardOptions) -> SpanDistributions:
        training = graph is not None and graph.training
        mem = self.encode(batch, graph, opts.hidden_dropout if training else 0.0)
        return self.answer(mem.Hq, mem.M, batch.q_mask, batch.p_mask, graph, opts.steps,
                           opts.variant, opts.prediction_dropout, batch.keys, opts.independent_masks)

    def loss(self, batch, graph: Graph | None, opts: ForwardOptions) -> tuple[Tensor, SpanDistributions]:
        """Mean per-example loss over the batch."""
        dists = self.forward(batch, graph, opts)
        if opts.objective == "step_nll" and opts.variant != "memnet_final":
            per_example = step_nll_loss(dists, batch.starts, batch.ends)
        else:
            per_example = span_loss(dists.avg_begin, dists.avg_end, batch.starts, batch.ends)
        return T.mean(per_example), dists

    # ----------------------------------------------------------------- io

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in own.items():
            if arrays[name].shape != p.shape:
                raise T.DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def save(self, stem, extra_meta: dict | None = None):
        meta = {"model": asdict(self.config), "vocab": self.vocab.itos[2:],
                "multi_step": self.answer.multi_step, "seed": self.seed,
                "frozen_rows": np.flatnonzero(self.lexicon.frozen_rows).tolist(),
                "layout": {"weights": "(in, out); layers compute x @ W",
                           "lstm_gates": list(LSTM_GATES), "gru_gates": list(GRU_GATES)}}
        meta.update(extra_meta or {})
        return save_arrays(stem, self.state_dict(), meta)

    @classmethod
    def load(cls, stem) -> tuple[SANModel, dict]:
        arrays, meta = load_arrays(stem)
        vocab = Vocab(meta["vocab"])
        model = cls(ModelConfig.from_dict(meta["model"]), vocab, meta.get("seed", 0),
                    meta.get("multi_step", True))
        model.load_state_dict(arrays)
        model.lexicon.frozen_rows[:] = False
        model.lexicon.frozen_rows[meta.get("frozen_rows", [0])] = True
        return model, meta
