"""Retrieval and QA metrics: hit rate, exact match, token F1, Spearman."""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import CandidateSet, CorpusIndex, QAExample, contains_answer
from .errors import IntegrityError, InvalidArgumentError
from .numkit import check_permutation
from .teacher import order_from_scores

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def hit_rate(results: Sequence[CandidateSet], examples: Sequence[QAExample] | Mapping,
             k: int, index: CorpusIndex) -> float:
    """Share of questions whose top-k contains an answer-bearing document."""
    by_qid = examples if isinstance(examples, Mapping) else {e.qid: e for e in examples}
    if not results:
        return 0.0
    hits = 0
    for res in results:
        ex = by_qid.get(res.qid)
        if ex is None:
            raise IntegrityError(f"no example for qid {res.qid!r}")
        if len(res.doc_ids) < k:
            raise InvalidArgumentError(f"{res.qid}: only {len(res.doc_ids)} docs retrieved, k={k}")
        if any(contains_answer(index.doc(d).text, ex.answers) for d in res.doc_ids[:k]):
            hits += 1
    return hits / len(results)


def hit_flags(results: Sequence[CandidateSet], examples, k: int, index: CorpusIndex) -> list[bool]:
    by_qid = examples if isinstance(examples, Mapping) else {e.qid: e for e in examples}
    return [any(contains_answer(index.doc(d).text, by_qid[r.qid].answers) for d in r.doc_ids[:k])
            for r in results]


def normalize_answer(text: str) -> str:
    text = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, answers: Sequence[str]) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(a) for a in answers))


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    p = common / len(pred_tokens)
    r = common / len(gold_tokens)
    return 2 * p * r / (p + r)


def f1(prediction: str, answers: Sequence[str]) -> float:
    pred = normalize_answer(prediction).split()
    return max(_f1(pred, normalize_answer(a).split()) for a in answers)


def _positions(order: Sequence[int]) -> np.ndarray:
    idx = check_permutation(order, len(order))
    pos = np.empty(len(order), dtype=np.float64)
    pos[idx] = np.arange(len(order))
    return pos


def spearman(rank_a: Sequence[int], rank_b: Sequence[int]) -> float:
    """Spearman's rho between two orders of the same k items (1-based)."""
    if len(rank_a) != len(rank_b):
        raise InvalidArgumentError("orders must have equal length")
    k = len(rank_a)
    if k < 2:
        raise InvalidArgumentError("need at least two items")
    d = _positions(rank_a) - _positions(rank_b)
    return 1.0 - 6.0 * float(np.sum(d * d)) / (k * (k * k - 1))


@dataclass
class SpearmanSummary:
    per_question: list
    mean: float
    histogram: list  # counts over [-1, -0.9), ..., [0.9, 1.0]
    edges: list = field(default_factory=lambda: [round(-1 + 0.1 * i, 1) for i in range(21)])


def compare_teacher_signals(rerank_orders: Sequence[Sequence[int]],
                            score_vectors: Sequence[Sequence[float]]) -> SpearmanSummary:
    if len(rerank_orders) != len(score_vectors):
        raise IntegrityError("need one score vector per ranking")
    rhos = []
    for i, (order, scores) in enumerate(zip(rerank_orders, score_vectors)):
        if len(order) != len(scores):
            raise IntegrityError(f"question {i}: {len(order)} ranks vs {len(scores)} scores")
        rhos.append(spearman(order, order_from_scores(scores)))
    counts = np.zeros(20, dtype=int)
    for r in rhos:
        counts[min(19, int(np.floor((r + 1.0) / 0.1 + 1e-9)))] += 1
    mean = float(np.mean(rhos)) if rhos else 0.0
    return SpearmanSummary(rhos, mean, counts.tolist())


@dataclass
class MetricReport:
    hit_rates: dict            # k -> rate
    num_questions: int
    em: float | None = None
    f1: float | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.hit_rates.items():
            if not 0.0 <= v <= 1.0:
                raise InvalidArgumentError(f"HR@{k} = {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"hit_rates": {f"HR@{k}": v for k, v in sorted(self.hit_rates.items())},
                "num_questions": self.num_questions, "em": self.em, "f1": self.f1,
                "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        hr = {int(k.split("@")[1]): float(v) for k, v in d["hit_rates"].items()}
        return cls(hr, int(d["num_questions"]), d.get("em"), d.get("f1"), d.get("config", {}))

    def table(self, label: str = "retriever") -> str:
        """Plain-text table in the order HR@5, HR@10, (other k), EM, F1."""
        ks = sorted(self.hit_rates, key=lambda k: (k not in (5, 10), k))
        heads = ["Method"] + [f"HR@{k}" for k in ks] + ["EM", "F1"]
        vals = [label] + [f"{self.hit_rates[k]:.3f}" for k in ks]
        vals += ["-" if self.em is None else f"{100 * self.em:.2f}",
                 "-" if self.f1 is None else f"{100 * self.f1:.2f}"]
        widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
        row = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths))
        return "\n".join([row(heads), row(["-" * w for w in widths]), row(vals)])


def qa_scores(predictions: Mapping[str, str], examples: Sequence[QAExample]) -> tuple[float, float]:
    """Mean EM and F1 of ``predictions`` (qid -> answer string)."""
    ems, f1s = [], []
    for ex in examples:
        if ex.qid not in predictions:
            raise IntegrityError(f"no prediction for {ex.qid!r}")
        ems.append(exact_match(predictions[ex.qid], ex.answers))
        f1s.append(f1(predictions[ex.qid], ex.answers))
    return float(np.mean(ems)), float(np.mean(f1s))


def evaluate_retrieval(results: Sequence[CandidateSet], examples: Sequence[QAExample],
                       index: CorpusIndex, ks: Sequence[int] = (5, 10),
                       config: dict | None = None) -> MetricReport:
    by_qid = {e.qid: e for e in examples}
    rates = {k: hit_rate(results, by_qid, k, index) for k in sorted(set(ks))}
    return MetricReport(rates, len(results), config=dict(config or {}))
