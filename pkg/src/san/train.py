"""Adamax training loop, learning curves, ablations and seed sweeps."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .answer import VARIANTS, decode_span
from .data import AnnotatedExample, SyntheticConfig, Vocab, derive_seed, generate_synthetic, make_batches
from .evaluate import evaluate
from .model import ForwardOptions, ModelConfig, SANModel
from .tensor import Graph, NumericError, Tensor

logger = logging.getLogger(__name__)

CURVE_HEADER = ("epoch", "split", "em", "f1", "loss", "lr")


@dataclass
class TrainConfig:
    lr: float = 0.002
    lr_halving_epochs: int = 10
    batch_size: int = 32
    hidden_dropout: float = 0.4
    prediction_dropout: float = 0.4
    epochs: int = 50
    seed: int = 0
    T: int = 5
    answer_variant: str = "san"
    objective: str = "avg_nll"
    independent_masks: bool = False
    grad_clip: float | None = 5.0
    eval_batch_size: int = 64
    workers: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.lr_halving_epochs < 1:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.answer_variant not in VARIANTS:
            raise ValueError(f"answer_variant must be one of {VARIANTS}, got {self.answer_variant!r}")
        if self.objective not in ("avg_nll", "step_nll"):
            raise ValueError(f"objective must be avg_nll or step_nll, got {self.objective!r}")
        for rate in (self.hidden_dropout, self.prediction_dropout):
            if not 0.0 <= rate < 1.0:
                raise ValueError("dropout rates must lie in [0, 1)")

    @property
    def steps(self) -> int:
        return 1 if self.answer_variant == "onestep" else self.T

    def forward_options(self, steps: int | None = None) -> ForwardOptions:
        return ForwardOptions(steps=steps or self.steps, variant=self.answer_variant,
                              hidden_dropout=self.hidden_dropout,
                              prediction_dropout=self.prediction_dropout,
                              independent_masks=self.independent_masks, objective=self.objective)


def lr_at_epoch(lr0: float, epoch: int, halving_epochs: int = 10) -> float:
    """Epochs are 1-based: 1..halving run at lr0, the next block at lr0/2, ..."""
    return lr0 * 0.5 ** ((epoch - 1) // halving_epochs)


class Adamax:
    """Adamax: m <- b1 m + (1-b1) g; u <- max(b2 u, |g|);
    theta <- theta - lr / (1 - b1^t) * m / (u + eps)."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.u = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in parameter {name}")
        self.t += 1
        step_size = lr / (1.0 - self.beta1 ** self.t)
        for k, (_, p) in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.u[k] = np.maximum(self.beta2 * self.u[k], np.abs(g))
            p.data = p.data - step_size * self.m[k] / (self.u[k] + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# --------------------------------------------------------------------------
# corpus and curves


@dataclass
class Corpus:
    train: list[AnnotatedExample]
    dev: list[AnnotatedExample]
    cove: dict | None = None


def synthetic_corpus(num_train: int = 2000, num_dev: int = 500, seed: int = 0, **kwargs) -> Corpus:
    """Default desk-scale corpus: one synthetic draw split into train/dev."""
    examples = generate_synthetic(SyntheticConfig(num_examples=num_train + num_dev, seed=seed, **kwargs))
    return Corpus(examples[:num_train], examples[num_train:])


@dataclass
class CurveRow:
    epoch: int
    split: str
    em: float
    f1: float
    loss: float
    lr: float


@dataclass
class LearningCurve:
    rows: list[CurveRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in self.rows:
            w.writerow([r.epoch, r.split, f"{r.em:.6f}", f"{r.f1:.6f}", f"{r.loss:.6f}", repr(r.lr)])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    def ems(self) -> list[float]:
        return [r.em for r in self.rows]


# --------------------------------------------------------------------------
# prediction


@dataclass
class Prediction:
    answers: dict[str, str]
    records: list[dict]
    loss: float


def predict(model: SANModel, examples, config: TrainConfig, steps: int | None = None,
            variant: str | None = None, cove=None, batch_size: int | None = None,
            workers: int | None = None) -> Prediction:
    """Evaluation-mode forward over ``examples`` in corpus order."""
    opts = config.forward_options(steps)
    if variant is not None:
        opts.variant = variant
    if steps is not None and opts.variant == "onestep" and steps > 1:
        opts.variant = "san"  # an explicit test-time T overrides the single-step variant
    batches = make_batches(examples, batch_size or config.eval_batch_size, None, model.vocab, cove)
    max_len = model.config.max_span_len

    def run(batch):
        dists = model.forward(batch, None, opts)
        out, losses = [], []
        for b, ex in enumerate(batch.examples):
            n = len(ex.passage)
            avg_b, avg_e = dists.avg_begin.data[b, :n], dists.avg_end.data[b, :n]
            span = decode_span(avg_b, avg_e, max_len)
            losses.append(-math.log(avg_b[ex.answer_start] + 1e-12) - math.log(avg_e[ex.answer_end] + 1e-12))
            out.append(({"id": ex.id, "n": n,
                         "avg_begin": avg_b.tolist(), "avg_end": avg_e.tolist(),
                         "per_step_begin": [d.data[b, :n].tolist() for d in dists.per_step_begin],
                         "per_step_end": [d.data[b, :n].tolist() for d in dists.per_step_end],
                         "start": span.start, "end": span.end, "score": span.score},
                        ex.span_text(span.start, span.end)))
        return out, losses

    workers = workers or config.workers
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]
    records, answers, losses = [], {}, []
    for out, ls in results:
        for rec, text in out:
            records.append(rec)
            answers[rec["id"]] = text
        losses.extend(ls)
    return Prediction(answers, records, float(np.mean(losses)) if losses else float("nan"))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SANModel
    best_state: dict[str, np.ndarray]
    curve: LearningCurve
    best_epoch: int
    best_em: float
    best_f1: float
    diverged: bool = False


def build_model(config: TrainConfig, model_config: ModelConfig, vocab: Vocab) -> SANModel:
    return SANModel(model_config, vocab, derive_seed(config.seed, "init"),
                    multi_step=config.steps > 1 or config.answer_variant != "onestep")


def train(config: TrainConfig, corpus: Corpus, model_config: ModelConfig | None = None,
          vocab: Vocab | None = None, embeddings_path=None, on_epoch=None) -> TrainResult:
    """Shuffle, batch, forward with dropout, backprop, Adamax; evaluate on dev
    after every epoch and keep the best-dev-EM parameters (F1 breaks ties)."""
    if not corpus.train:
        raise ValueError("training corpus is empty")
    model_config = model_config or ModelConfig()
    vocab = vocab or Vocab.build(corpus.train)
    model = build_model(config, model_config, vocab)
    if embeddings_path:
        model.lexicon.load_pretrained(embeddings_path, vocab)
    named = list(model.named_parameters())
    params = [p for _, p in named]
    opt = Adamax(named)
    opts = config.forward_options()
    curve = LearningCurve()
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    best = (-1.0, -1.0)
    best_epoch, diverged = 0, False
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(config.lr, epoch, config.lr_halving_epochs)
        batches = make_batches(corpus.train, config.batch_size,
                               derive_seed(config.seed, f"shuffle.{epoch}"), vocab, corpus.cove)
        mask_seed = derive_seed(config.seed, f"mask.{epoch}")
        try:
            for bi, batch in enumerate(batches):
                graph = Graph(derive_seed(config.seed, f"dropout.{epoch}.{bi}"), training=True)
                graph.mask_seed = mask_seed
                loss, _ = model.loss(batch, graph, opts)
                if not np.isfinite(loss.data):
                    raise NumericError(f"loss diverged at epoch {epoch}, batch {bi}")
                T.zero_grad(params)
                loss.backward()
                model.lexicon.mask_gradients()
                if config.grad_clip:
                    clip_grad_norm(params, config.grad_clip)
                opt.step(lr)
        except NumericError as e:
            logger.error("%s; keeping the last good checkpoint", e)
            diverged = True
            break
        pred = predict(model, corpus.dev, config, cove=corpus.cove) if corpus.dev else None
        report = evaluate(pred.answers, corpus.dev) if pred else None
        em, f1 = (report.em, report.f1) if report else (0.0, 0.0)
        row = CurveRow(epoch, "dev", em, f1, pred.loss if pred else float("nan"), lr)
        curve.rows.append(row)
        logger.info("epoch %d lr %.5f dev EM %.2f F1 %.2f loss %.4f", epoch, lr, em, f1, row.loss)
        if (em, f1) > best:
            best, best_epoch = (em, f1), epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        if on_epoch is not None:
            on_epoch(row, model)
    model.load_state_dict(best_state)
    return TrainResult(model, best_state, curve, best_epoch, max(best[0], 0.0), max(best[1], 0.0), diverged)


# --------------------------------------------------------------------------
# experiment protocols


def population_std(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


@dataclass
class SeedStats:
    seeds: list[int]
    em: list[float]
    f1: list[float]

    @property
    def em_mean(self) -> float:
        return float(np.mean(self.em))

    @property
    def f1_mean(self) -> float:
        return float(np.mean(self.f1))

    @property
    def em_std(self) -> float:
        return population_std(self.em)

    @property
    def f1_std(self) -> float:
        return population_std(self.f1)

    def to_json(self) -> dict:
        return {"rows": [{"seed": s, "em": e, "f1": f} for s, e, f in zip(self.seeds, self.em, self.f1)],
                "em_mean": self.em_mean, "em_std": self.em_std,
                "f1_mean": self.f1_mean, "f1_std": self.f1_std}

    def table(self) -> str:
        lines = [f"{'seed':>6} {'EM':>8} {'F1':>8}"]
        lines += [f"{s:>6} {e:8.3f} {f:8.3f}" for s, e, f in zip(self.seeds, self.em, self.f1)]
        lines.append(f"Mean: {self.em_mean:.3f}, Std. deviation: {self.em_std:.3f} (EM)")
        lines.append(f"Mean: {self.f1_mean:.3f}, Std. deviation: {self.f1_std:.3f} (F1)")
        return "\n".join(lines)


def seed_robustness(config: TrainConfig, corpus: Corpus, seeds, model_config: ModelConfig | None = None,
                    vocab: Vocab | None = None, cache: dict | None = None) -> SeedStats:
    """Same config and data, only the seed varies; best-dev EM/F1 per seed."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("seed robustness needs at least two seeds")
    em, f1 = [], []
    for s in seeds:
        res = _cached_train(replace(config, seed=s), corpus, model_config, vocab, cache)
        em.append(res.best_em)
        f1.append(res.best_f1)
    return SeedStats(seeds, em, f1)


def _cached_train(config, corpus, model_config, vocab, cache):
    key = (tuple(sorted(asdict(config).items())), tuple(sorted(asdict(model_config or ModelConfig()).items())))
    if cache is not None and key in cache:
        return cache[key]
    res = train(config, corpus, model_config, vocab)
    if cache is not None:
        cache[key] = res
    return res


@dataclass
class AblationReport:
    variants: dict[str, SeedStats]
    param_counts: dict[str, int]

    def to_json(self) -> dict:
        return {v: {**s.to_json(), "params": self.param_counts[v]} for v, s in self.variants.items()}

    def table(self) -> str:
        lines = [f"{'answer module':<14} {'EM':>8} {'(std)':>7} {'F1':>8} {'(std)':>7} {'params':>9}"]
        for v, s in self.variants.items():
            lines.append(f"{v:<14} {s.em_mean:8.3f} {s.em_std:7.3f} {s.f1_mean:8.3f} "
                         f"{s.f1_std:7.3f} {self.param_counts[v]:>9}")
        return "\n".join(lines)


def run_ablation(base_config: TrainConfig, corpus: Corpus, variants=VARIANTS, seeds=(1,),
                 model_config: ModelConfig | None = None, vocab: Vocab | None = None,
                 cache: dict | None = None) -> AblationReport:
    """Train every answer-module variant on identical data and seeds.

    Lower layers draw their initial weights from seed streams that do not
    depend on the variant, so only the answer module differs.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    vocab = vocab or Vocab.build(corpus.train)
    out, counts = {}, {}
    for v in variants:
        cfg = replace(base_config, answer_variant=v)
        em, f1 = [], []
        for s in seeds:
            res = _cached_train(replace(cfg, seed=s), corpus, model_config, vocab, cache)
            em.append(res.best_em)
            f1.append(res.best_f1)
            counts[v] = res.model.num_parameters()
        out[v] = SeedStats(seeds, em, f1)
    return AblationReport(out, counts)


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
