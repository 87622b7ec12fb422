"""Corpus ingestion, vocabulary, synthetic span tasks and padded batches."""
from __future__ import annotations

import json
import logging
import string
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

# 56 fine-grained tags (Penn Treebank plus the extras spaCy emits); id 0 is UNK.
POS_TAGS = (
    "CC CD DT EX FW IN JJ JJR JJS LS MD NN NNS NNP NNPS PDT POS PRP PRP$ RB RBR RBS RP SYM "
    "TO UH VB VBD VBG VBN VBP VBZ WDT WP WP$ WRB `` '' , . : -LRB- -RRB- # $ HYPH NFP "
    "ADD AFX BES HVS GW XX _SP NIL SP"
).split()
# OntoNotes entity types; id 0 is UNK / no entity.
NER_TAGS = (
    "PERSON NORP FAC ORG GPE LOC PRODUCT EVENT WORK_OF_ART LAW LANGUAGE DATE TIME "
    "PERCENT MONEY QUANTITY ORDINAL CARDINAL"
).split()
assert len(POS_TAGS) == 56 and len(NER_TAGS) == 18
POS_INDEX = {t: i + 1 for i, t in enumerate(POS_TAGS)}
NER_INDEX = {t: i + 1 for i, t in enumerate(NER_TAGS)}
UNK_TAG = 0
NUM_POS = len(POS_TAGS) + 1
NUM_NER = len(NER_TAGS) + 1

WH_WORDS = ("what", "who", "where", "when", "why", "how", "which", "whose")


class ParseError(ValueError):
    """Malformed input record."""


@dataclass(frozen=True)
class AnnotatedToken:
    text: str
    lemma: str
    pos_id: int = UNK_TAG
    ner_id: int = UNK_TAG


@dataclass
class AnnotatedExample:
    id: str
    passage: list[AnnotatedToken]
    question: list[AnnotatedToken]
    answer_start: int
    answer_end: int
    answer_texts: list[str] = field(default_factory=list)
    char_offsets: list[tuple[int, int]] | None = None
    context: str | None = None
    qtype: str = "other"

    def __post_init__(self):
        if not 0 <= self.answer_start <= self.answer_end < len(self.passage):
            raise ParseError(f"example {self.id}: gold span ({self.answer_start}, {self.answer_end}) "
                             f"outside passage of length {len(self.passage)}")
        if self.qtype == "other":
            self.qtype = question_type([t.text for t in self.question])
        if not self.answer_texts:
            self.answer_texts = [self.span_text(self.answer_start, self.answer_end)]

    def span_text(self, start: int, end: int) -> str:
        if self.context is not None and self.char_offsets is not None:
            return self.context[self.char_offsets[start][0]:self.char_offsets[end][1]]
        return " ".join(t.text for t in self.passage[start:end + 1])


def question_type(tokens: list[str]) -> str:
    for tok in tokens:
        low = tok.lower()
        if low in WH_WORDS:
            return low
    return "other"


def pos_id(tag: str | None) -> int:
    return POS_INDEX.get(tag, UNK_TAG) if tag else UNK_TAG


def ner_id(tag: str | None) -> int:
    return NER_INDEX.get(tag, UNK_TAG) if tag else UNK_TAG


# --------------------------------------------------------------------------
# vocabulary


class Vocab:
    PAD, UNK = 0, 1

    def __init__(self, tokens=()):
        self.itos: list[str] = ["<pad>", "<unk>"]
        self.stoi: dict[str, int] = {"<pad>": 0, "<unk>": 1}
        for tok in tokens:
            self.add(tok)

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def index(self, tok: str) -> int:
        return self.stoi.get(tok, self.UNK)

    @classmethod
    def build(cls, examples, min_count: int = 1) -> Vocab:
        counts = Counter()
        for ex in examples:
            counts.update(t.text for t in ex.passage)
            counts.update(t.text for t in ex.question)
        # frequency order, ties alphabetical, so the vocab is seed-independent
        ordered = sorted((c for c in counts.items() if c[1] >= min_count), key=lambda kv: (-kv[1], kv[0]))
        return cls(tok for tok, _ in ordered)


# --------------------------------------------------------------------------
# tokenisation and SQuAD ingestion


def tokenize(text: str) -> list[tuple[str, int, int]]:
    """Whitespace split, then peel leading/trailing ASCII punctuation off each
    chunk as single-character tokens.  Returns (token, char_start, char_end)."""
    out = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace():
            j += 1
        lo, hi = i, j
        lead = []
        while lo < hi and text[lo] in string.punctuation:
            lead.append((text[lo], lo, lo + 1))
            lo += 1
        trail = []
        while hi > lo and text[hi - 1] in string.punctuation:
            trail.append((text[hi - 1], hi - 1, hi))
            hi -= 1
        out.extend(lead)
        if lo < hi:
            out.append((text[lo:hi], lo, hi))
        out.extend(reversed(trail))
        i = j
    return out


def char_span_to_tokens(offsets: list[tuple[int, int]], start: int, end: int) -> tuple[int, int] | None:
    """Token span covering every token that overlaps chars [start, end)."""
    hit = [k for k, (a, b) in enumerate(offsets) if min(b, end) - max(a, start) > 0]
    if not hit:
        return None
    return hit[0], hit[-1]


def _plain_tokens(words) -> list[AnnotatedToken]:
    return [AnnotatedToken(w, w.lower()) for w in words]


def load_squad(path) -> list[AnnotatedExample]:
    """Read a SQuAD v1.1 JSON file; POS/NER are left as UNK."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    examples, skipped = [], 0
    for article in raw["data"]:
        for para in article["paragraphs"]:
            context = para["context"]
            toks = tokenize(context)
            offsets = [(a, b) for _, a, b in toks]
            passage = _plain_tokens(t for t, _, _ in toks)
            for qa in para["qas"]:
                question = _plain_tokens(t for t, _, _ in tokenize(qa["question"]))
                answers = qa.get("answers") or []
                if not answers or not passage or not question:
                    skipped += 1
                    logger.warning("skipping %s: no answer or empty text", qa.get("id"))
                    continue
                first = answers[0]
                span = char_span_to_tokens(offsets, first["answer_start"],
                                           first["answer_start"] + len(first["text"]))
                if span is None:
                    skipped += 1
                    logger.warning("skipping %s: answer span does not map to tokens", qa["id"])
                    continue
                examples.append(AnnotatedExample(
                    id=qa["id"], passage=passage, question=question,
                    answer_start=span[0], answer_end=span[1],
                    answer_texts=[a["text"] for a in answers],
                    char_offsets=offsets, context=context))
    load_squad.last_skipped = skipped
    if skipped:
        logger.warning("%s: skipped %d unmappable questions", path, skipped)
    return examples


load_squad.last_skipped = 0


# --------------------------------------------------------------------------
# annotated JSONL


def _parse_tokens(items, lineno: int, key: str) -> list[AnnotatedToken]:
    if not isinstance(items, list) or not items:
        raise ParseError(f"line {lineno}: '{key}' must be a non-empty list of tokens")
    out = []
    for tok in items:
        if not isinstance(tok, dict) or not isinstance(tok.get("text"), str):
            raise ParseError(f"line {lineno}: every '{key}' token needs a string 'text'")
        pos, ner = tok.get("pos"), tok.get("ner")
        if pos and pos not in POS_INDEX:
            logger.warning("line %d: POS tag %r not in inventory, using UNK", lineno, pos)
        if ner and ner not in NER_INDEX and ner != "O":
            logger.warning("line %d: NER tag %r not in inventory, using UNK", lineno, ner)
        out.append(AnnotatedToken(tok["text"], tok.get("lemma") or tok["text"].lower(),
                                  pos_id(pos), ner_id(ner)))
    return out


def load_annotated_jsonl(path) -> list[AnnotatedExample]:
    """One object per line::

        {"id": str, "passage": [tok], "question": [tok],
         "answer_start": int, "answer_end": int,
         "answer_texts": [str]?, "context": str?, "char_offsets": [[s, e]]?}

    where ``tok = {"text", "lemma"?, "pos"?, "ner"?}``.
    """
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"line {lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(f"line {lineno}: expected a JSON object")
            for key in ("id", "passage", "question", "answer_start", "answer_end"):
                if key not in obj:
                    raise ParseError(f"line {lineno}: missing field '{key}'")
            if not all(isinstance(obj[k], int) for k in ("answer_start", "answer_end")):
                raise ParseError(f"line {lineno}: answer_start/answer_end must be integers")
            offsets = obj.get("char_offsets")
            try:
                examples.append(AnnotatedExample(
                    id=str(obj["id"]),
                    passage=_parse_tokens(obj["passage"], lineno, "passage"),
                    question=_parse_tokens(obj["question"], lineno, "question"),
                    answer_start=obj["answer_start"], answer_end=obj["answer_end"],
                    answer_texts=list(obj.get("answer_texts") or []),
                    char_offsets=[tuple(o) for o in offsets] if offsets else None,
                    context=obj.get("context")))
            except ParseError as e:
                raise ParseError(f"line {lineno}: {e}") from None
    return examples


def _token_json(tok: AnnotatedToken) -> dict:
    out = {"text": tok.text, "lemma": tok.lemma}
    if tok.pos_id:
        out["pos"] = POS_TAGS[tok.pos_id - 1]
    if tok.ner_id:
        out["ner"] = NER_TAGS[tok.ner_id - 1]
    return out


def save_annotated_jsonl(examples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj = {"id": ex.id, "passage": [_token_json(t) for t in ex.passage],
                   "question": [_token_json(t) for t in ex.question],
                   "answer_start": ex.answer_start, "answer_end": ex.answer_end,
                   "answer_texts": ex.answer_texts}
            if ex.context is not None:
                obj["context"] = ex.context
                obj["char_offsets"] = [list(o) for o in ex.char_offsets]
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_corpus(path) -> list[AnnotatedExample]:
    """Dispatch on extension: ``.jsonl`` is annotated, anything else SQuAD JSON."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return load_annotated_jsonl(path)
    return load_squad(path)


# --------------------------------------------------------------------------
# synthetic task


@dataclass
class SyntheticConfig:
    num_examples: int = 2500
    vocab_size: int = 200
    passage_len_range: tuple[int, int] = (16, 28)
    question_len_range: tuple[int, int] = (5, 8)
    seed: int = 0
    decoy_prob: float = 0.8
    distractor_prob: float = 0.35


def derive_seed(master: int, name: str) -> int:
    """Independent named sub-seed of ``master``."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def generate_synthetic(config: SyntheticConfig | dict) -> list[AnnotatedExample]:
    """Random-token span extraction with decoys.

    The question is ``wh-word, key phrase, distractors``; the passage holds
    the key phrase exactly once.  Decoys copy the distractor bigram and
    truncated or reordered pieces of the key phrase into the passage, so
    surface matching alone is not enough to locate the span.
    """
    cfg = config if isinstance(config, SyntheticConfig) else SyntheticConfig(**config)
    if cfg.vocab_size < 20:
        raise ValueError("synthetic vocab_size must be at least 20")
    rng = np.random.default_rng(cfg.seed)
    words = [f"w{i:03d}" for i in range(cfg.vocab_size)]
    # each word gets a fixed coarse tag so POS/NER embeddings carry signal
    word_pos = rng.integers(1, NUM_POS, size=cfg.vocab_size)
    word_ner = np.where(rng.random(cfg.vocab_size) < 0.2, rng.integers(1, NUM_NER, size=cfg.vocab_size), 0)

    def tok(i: int) -> AnnotatedToken:
        return AnnotatedToken(words[i], words[i], int(word_pos[i]), int(word_ner[i]))

    wh = [AnnotatedToken(w, w) for w in WH_WORDS]
    examples = []
    for k in range(cfg.num_examples):
        n = int(rng.integers(cfg.passage_len_range[0], cfg.passage_len_range[1] + 1))
        qlen = int(rng.integers(cfg.question_len_range[0], cfg.question_len_range[1] + 1))
        key_len = int(rng.integers(1, 4))
        n_dist = max(2, qlen - 1 - key_len)
        chosen = rng.choice(cfg.vocab_size, size=key_len + n_dist, replace=False)
        key, dist = list(chosen[:key_len]), list(chosen[key_len:])
        special = set(chosen.tolist())
        filler = [i for i in range(cfg.vocab_size) if i not in special]
        passage = list(rng.choice(filler, size=n))

        # decoys are written first; the real phrase is placed last so it wins any overlap
        if rng.random() < cfg.distractor_prob:
            pos = int(rng.integers(0, n - 1))
            passage[pos:pos + 2] = dist[:2]
        if key_len > 1 and rng.random() < cfg.decoy_prob:
            cut = int(rng.integers(1, key_len))
            piece = key[:cut] if rng.random() < 0.5 else key[cut:]
            pos = int(rng.integers(0, n - len(piece) + 1))
            passage[pos:pos + len(piece)] = piece
        elif key_len == 1 and rng.random() < cfg.decoy_prob:
            pos = int(rng.integers(0, n - 1))
            passage[pos:pos + 2] = [dist[-1], dist[0]]
        start = int(rng.integers(0, n - key_len + 1))
        passage[start:start + key_len] = key
        # scrub accidental second occurrences of the full phrase
        for i in range(n - key_len + 1):
            if i != start and passage[i:i + key_len] == key and not (start <= i < start + key_len):
                passage[i] = int(rng.choice(filler))

        question = [wh[int(rng.integers(len(wh)))]] + [tok(i) for i in key] + [tok(i) for i in dist]
        examples.append(AnnotatedExample(
            id=f"syn-{cfg.seed}-{k}", passage=[tok(i) for i in passage], question=question,
            answer_start=start, answer_end=start + key_len - 1))
    return examples


def bigram_baseline(example: AnnotatedExample) -> tuple[int, int]:
    """First passage position matching a question bigram, extended while the
    passage keeps following the question; else the first single match."""
    q = [t.text for t in example.question]
    p = [t.text for t in example.passage]
    bigrams = {(q[j], q[j + 1]): j for j in range(len(q) - 1)}
    for i in range(len(p) - 1):
        j = bigrams.get((p[i], p[i + 1]))
        if j is not None:
            end = i + 1
            while end + 1 < len(p) and j + (end - i) + 1 < len(q) and p[end + 1] == q[j + (end - i) + 1]:
                end += 1
            return i, end
    qs = set(q)
    for i, w in enumerate(p):
        if w in qs:
            return i, i
    return 0, 0


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Right-padded arrays for one mini-batch; masks are True on real tokens."""
    examples: list[AnnotatedExample]
    p_ids: np.ndarray
    p_pos: np.ndarray
    p_ner: np.ndarray
    p_match: np.ndarray
    p_mask: np.ndarray
    q_ids: np.ndarray
    q_mask: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    keys: np.ndarray
    cove_p: np.ndarray | None = None
    cove_q: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def p_lens(self) -> np.ndarray:
        return self.p_mask.sum(axis=1)


def collate(examples, vocab: Vocab, keys=None, cove=None) -> Batch:
    """Pad ``examples`` into a :class:`Batch`.

    ``keys`` are stable per-example integers used to seed per-example random
    streams; they default to positions in ``examples``.  ``cove`` optionally
    maps example id to ``(q_vectors, p_vectors)``.
    """
    from .lexicon import exact_match_features

    B = len(examples)
    n = max(len(e.passage) for e in examples)
    m = max(len(e.question) for e in examples)
    p_ids = np.zeros((B, n), dtype=np.int64)
    p_pos = np.zeros((B, n), dtype=np.int64)
    p_ner = np.zeros((B, n), dtype=np.int64)
    p_match = np.zeros((B, n, 3))
    p_mask = np.zeros((B, n), dtype=bool)
    q_ids = np.zeros((B, m), dtype=np.int64)
    q_mask = np.zeros((B, m), dtype=bool)
    cove_p = cove_q = None
    if cove is not None:
        dim = next(iter(cove.values()))[0].shape[1]
        cove_p, cove_q = np.zeros((B, n, dim)), np.zeros((B, m, dim))
    for b, ex in enumerate(examples):
        ln, lm = len(ex.passage), len(ex.question)
        p_ids[b, :ln] = [vocab.index(t.text) for t in ex.passage]
        p_pos[b, :ln] = [t.pos_id for t in ex.passage]
        p_ner[b, :ln] = [t.ner_id for t in ex.passage]
        p_match[b, :ln] = exact_match_features(ex.passage, ex.question).T
        p_mask[b, :ln] = True
        q_ids[b, :lm] = [vocab.index(t.text) for t in ex.question]
        q_mask[b, :lm] = True
        if cove is not None:
            cq, cp = cove[ex.id]
            if cq.shape[0] != lm or cp.shape[0] != ln:
                from .tensor import DimensionError
                raise DimensionError(f"CoVe lengths for {ex.id} do not match the tokens")
            cove_q[b, :lm], cove_p[b, :ln] = cq, cp
    starts = np.array([e.answer_start for e in examples], dtype=np.int64)
    ends = np.array([e.answer_end for e in examples], dtype=np.int64)
    keys = np.arange(B, dtype=np.int64) if keys is None else np.asarray(keys, dtype=np.int64)
    return Batch(list(examples), p_ids, p_pos, p_ner, p_match, p_mask, q_ids, q_mask,
                 starts, ends, keys, cove_p, cove_q)


def make_batches(examples, batch_size: int, seed: int | None, vocab: Vocab, cove=None) -> list[Batch]:
    """Shuffle with ``seed`` (``None`` keeps corpus order) and pad per batch.

    Batch keys are corpus positions, so per-example random streams do not
    depend on how examples are grouped.
    """
    order = np.arange(len(examples))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(examples))
    batches = []
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        batches.append(collate([examples[i] for i in idx], vocab, keys=idx, cove=cove))
    return batches
