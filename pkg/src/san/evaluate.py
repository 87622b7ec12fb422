"""SQuAD-style EM / F1, K-best oracle curves and per-question-type breakdowns."""
from __future__ import annotations

import csv
import json
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .answer import kbest_spans
from .data import AnnotatedExample

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    s = "".join(ch for ch in s.lower() if ch not in _PUNCT)
    return " ".join(_ARTICLES.sub(" ", s).split())


def exact_match(pred: str, golds: list[str]) -> int:
    if not golds:
        raise ValueError("exact_match needs at least one gold answer")
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_tokens)
    recall = same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_score(pred: str, golds: list[str]) -> float:
    if not golds:
        raise ValueError("f1_score needs at least one gold answer")
    p = normalize_answer(pred).split()
    return max(_f1(p, normalize_answer(g).split()) for g in golds)


@dataclass
class MetricsReport:
    em: float
    f1: float
    count: int
    skipped: int = 0
    kbest: dict[int, tuple[float, float]] = field(default_factory=dict)
    by_qtype: dict[str, tuple[float, float, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["kbest"] = {str(k): list(v) for k, v in self.kbest.items()}
        out["by_qtype"] = {k: list(v) for k, v in self.by_qtype.items()}
        return out


def evaluate(preds: dict[str, str], examples: list[AnnotatedExample]) -> MetricsReport:
    """Dataset EM/F1 in percent; missing predictions score 0 and are counted."""
    ems, f1s, skipped = [], [], 0
    groups: dict[str, list[tuple[int, float]]] = {}
    for ex in examples:
        if ex.id in preds:
            em, f1 = exact_match(preds[ex.id], ex.answer_texts), f1_score(preds[ex.id], ex.answer_texts)
        else:
            skipped += 1
            em, f1 = 0, 0.0
        ems.append(em)
        f1s.append(f1)
        groups.setdefault(ex.qtype, []).append((em, f1))
    by_qtype = {q: (100.0 * float(np.mean([e for e, _ in v])), 100.0 * float(np.mean([f for _, f in v])), len(v))
                for q, v in sorted(groups.items())}
    if not examples:
        return MetricsReport(0.0, 0.0, 0, skipped)
    return MetricsReport(100.0 * float(np.mean(ems)), 100.0 * float(np.mean(f1s)), len(examples),
                         skipped, by_qtype=by_qtype)


# --------------------------------------------------------------------------
# prediction dumps and the K-best oracle


def write_dump(records: list[dict], path) -> None:
    """JSON lines: {id, n, avg_begin, avg_end, per_step_begin, per_step_end}."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_dump(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                n = int(rec["n"])
                if len(rec["avg_begin"]) != n or len(rec["avg_end"]) != n:
                    raise ValueError("distribution length differs from n")
                str(rec["id"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: malformed prediction record ({e})") from None
            records.append(rec)
    return records


def kbest_oracle(dump: list[dict], examples: list[AnnotatedExample], k_max: int = 4,
                 max_span_len: int = 15) -> dict[int, tuple[float, float]]:
    """For K = 1..k_max, mean of the best EM / F1 among the top-K spans."""
    by_id = {ex.id: ex for ex in examples}
    best_em = np.zeros((len(dump), k_max))
    best_f1 = np.zeros((len(dump), k_max))
    for r, rec in enumerate(dump):
        ex = by_id[str(rec["id"])]
        spans = kbest_spans(rec["avg_begin"], rec["avg_end"], k_max, max_span_len)
        em_run = f1_run = 0.0
        for k in range(k_max):
            if k < len(spans):
                text = ex.span_text(spans[k].start, spans[k].end)
                em_run = max(em_run, exact_match(text, ex.answer_texts))
                f1_run = max(f1_run, f1_score(text, ex.answer_texts))
            best_em[r, k], best_f1[r, k] = em_run, f1_run
    if not dump:
        return {k: (0.0, 0.0) for k in range(1, k_max + 1)}
    return {k + 1: (100.0 * float(best_em[:, k].mean()), 100.0 * float(best_f1[:, k].mean()))
            for k in range(k_max)}


# --------------------------------------------------------------------------
# report files


def write_report(report: MetricsReport, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "em", "f1", "count"])
            w.writerow(["all", f"{report.em:.3f}", f"{report.f1:.3f}", report.count])
            for q, (em, f1, n) in report.by_qtype.items():
                w.writerow([q, f"{em:.3f}", f"{f1:.3f}", n])


def write_oracle_csv(curve: dict[int, tuple[float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "em", "f1"])
        for k, (em, f1) in sorted(curve.items()):
            w.writerow([k, f"{em:.3f}", f"{f1:.3f}"])
