"""Documents, QA examples, dense top-k retrieval and the lexical baselines."""

from __future__ import annotations

import enum
import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import DEFAULT_MAX_LEN, EncoderModel, encode, encode_many, tokenize, words
from .errors import IntegrityError, InvalidArgumentError, ParseError

SPLITS = ("train", "valid", "test")
BM25_K1 = 0.9
BM25_B = 0.4


@dataclass(frozen=True)
class Document:
    id: int
    text: str


@dataclass(frozen=True)
class QAExample:
    qid: str
    question: str
    answers: tuple[str, ...]
    split: str = "train"


@dataclass(frozen=True)
class CandidateSet:
    """Top-k documents for one question, best first."""

    qid: str
    doc_ids: tuple[int, ...]
    scores: tuple[float, ...]

    def __len__(self):
        return len(self.doc_ids)


class DataCategory(str, enum.Enum):
    FOLLOWING_ANSWER = "following_answer"
    FIRST_ANSWER = "first_answer"
    NO_ANSWER = "no_answer"


# ---------------------------------------------------------------------------
# file io

def _read_jsonl(path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", lineno)
            yield lineno, rec


def load_corpus(path) -> list[Document]:
    docs, seen = [], set()
    for lineno, rec in _read_jsonl(path):
        doc_id, text = rec.get("id"), rec.get("text")
        if not isinstance(doc_id, int) or isinstance(doc_id, bool):
            raise ParseError("'id' must be an integer", lineno)
        if not isinstance(text, str) or not text.strip():
            raise ParseError("'text' must be a non-empty string", lineno)
        if doc_id in seen:
            raise IntegrityError(f"line {lineno}: duplicate document id {doc_id}")
        seen.add(doc_id)
        docs.append(Document(doc_id, text))
    return docs


def load_examples(path) -> list[QAExample]:
    out, seen = [], set()
    for lineno, rec in _read_jsonl(path):
        for key in ("qid", "question", "answers"):
            if key not in rec:
                raise ParseError(f"missing field {key!r}", lineno)
        qid, question, answers = rec["qid"], rec["question"], rec["answers"]
        split = rec.get("split", "train")
        if isinstance(qid, int) and not isinstance(qid, bool):
            qid = str(qid)
        if not isinstance(qid, str) or not qid:
            raise ParseError("'qid' must be a non-empty string", lineno)
        if not isinstance(question, str) or not question.strip():
            raise ParseError("'question' must be a non-empty string", lineno)
        if (not isinstance(answers, list) or not answers
                or not all(isinstance(a, str) and a.strip() for a in answers)):
            raise ParseError("'answers' must be a non-empty list of strings", lineno)
        if split not in SPLITS:
            raise ParseError(f"'split' must be one of {SPLITS}", lineno)
        if qid in seen:
            raise IntegrityError(f"line {lineno}: duplicate qid {qid!r}")
        seen.add(qid)
        out.append(QAExample(qid, question, tuple(answers), split))
    return out


def write_corpus(docs: Sequence[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"id": d.id, "text": d.text}, ensure_ascii=False) + "\n")


def write_examples(examples: Sequence[QAExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"qid": ex.qid, "question": ex.question,
                   "answers": list(ex.answers), "split": ex.split}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def write_candidates(cands: Sequence[CandidateSet], path, categories=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, c in enumerate(cands):
            rec = {"qid": c.qid, "doc_ids": list(c.doc_ids), "scores": list(c.scores)}
            if categories is not None:
                rec["category"] = categories[i].value
            fh.write(json.dumps(rec) + "\n")


def load_candidates(path) -> list[CandidateSet]:
    out = []
    for lineno, rec in _read_jsonl(path):
        try:
            doc_ids = tuple(int(i) for i in rec["doc_ids"])
            scores = tuple(float(s) for s in rec["scores"])
            qid = str(rec["qid"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad candidate record ({exc})", lineno) from None
        if len(doc_ids) != len(scores) or not doc_ids:
            raise ParseError("doc_ids and scores must be non-empty and equally long", lineno)
        out.append(CandidateSet(qid, doc_ids, scores))
    return out


# ---------------------------------------------------------------------------
# index and dense retrieval

@dataclass
class CorpusIndex:
    documents: list[Document]
    vectors: np.ndarray
    tokens: list[np.ndarray]
    term_counts: list[Counter]
    doc_freq: Counter
    doc_lengths: np.ndarray
    max_len: int = DEFAULT_MAX_LEN
    _pos: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._pos = {d.id: i for i, d in enumerate(self.documents)}
        self.ids = np.array([d.id for d in self.documents], dtype=np.int64)

    def __len__(self):
        return len(self.documents)

    @property
    def avg_doc_length(self) -> float:
        return float(self.doc_lengths.mean())

    def position(self, doc_id: int) -> int:
        try:
            return self._pos[doc_id]
        except KeyError:
            raise IntegrityError(f"document id {doc_id} not in index") from None

    def doc(self, doc_id: int) -> Document:
        return self.documents[self.position(doc_id)]

    def doc_tokens(self, doc_id: int) -> np.ndarray:
        return self.tokens[self.position(doc_id)]

    def reencode(self, model: EncoderModel) -> "CorpusIndex":
        """Same documents and lexical statistics, vectors from ``model``."""
        return CorpusIndex(self.documents, encode_many(model, self.tokens), self.tokens,
                           self.term_counts, self.doc_freq, self.doc_lengths, self.max_len)


def build_index(docs: Sequence[Document], model: EncoderModel,
                max_len: int = DEFAULT_MAX_LEN) -> CorpusIndex:
    if not docs:
        raise InvalidArgumentError("cannot index an empty corpus")
    docs = sorted(docs, key=lambda d: d.id)
    tokens = [tokenize(d.text, max_len, model.vocab_buckets) for d in docs]
    term_counts = [Counter(words(d.text)) for d in docs]
    df: Counter = Counter()
    for tc in term_counts:
        df.update(tc.keys())
    lengths = np.array([sum(tc.values()) for tc in term_counts], dtype=np.float64)
    return CorpusIndex(list(docs), encode_many(model, tokens), tokens, term_counts, df,
                       lengths, max_len)


def _select_topk(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k best scores; ties go to the smaller id."""
    m = scores.size
    if k < m:
        part = np.argpartition(-scores, k - 1)[:k]
        cutoff = scores[part].min()
        pool = np.flatnonzero(scores >= cutoff)
    else:
        pool = np.arange(m)
    order = np.lexsort((ids[pool], -scores[pool]))
    return pool[order[:k]]


def retrieve_topk(index: CorpusIndex, model: EncoderModel, question: str, k: int,
                  qid: str = "") -> CandidateSet:
    if not 1 <= k <= len(index):
        raise InvalidArgumentError(f"k={k} outside 1..{len(index)}")
    q = encode(model, tokenize(question, index.max_len, model.vocab_buckets))
    scores = index.vectors @ q
    top = _select_topk(scores, index.ids, k)
    return CandidateSet(qid, tuple(int(i) for i in index.ids[top]),
                        tuple(float(s) for s in scores[top]))


def retrieve_many(index: CorpusIndex, model: EncoderModel,
                  examples: Sequence[QAExample], k: int) -> list[CandidateSet]:
    return [retrieve_topk(index, model, ex.question, k, ex.qid) for ex in examples]


# ---------------------------------------------------------------------------
# lexical scorers

def bm25_scores(question: str, candidate_ids: Sequence[int], index: CorpusIndex,
                k1: float = BM25_K1, b: float = BM25_B) -> np.ndarray:
    """Okapi BM25 of each candidate against the question's distinct terms."""
    n = len(index)
    avgdl = index.avg_doc_length
    terms = set(words(question))
    out = np.zeros(len(candidate_ids))
    for i, doc_id in enumerate(candidate_ids):
        pos = index.position(doc_id)
        tc, dl = index.term_counts[pos], index.doc_lengths[pos]
        norm = k1 * (1.0 - b + b * dl / avgdl)
        total = 0.0
        for t in terms:
            tf = tc.get(t, 0)
            if not tf:
                continue
            df = index.doc_freq[t]
            idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
            total += idf * tf * (k1 + 1.0) / (tf + norm)
        out[i] = total
    return out


def _bigrams(toks: list[str]) -> Counter:
    return Counter(zip(toks, toks[1:]))


def rouge2_f1(reference: str, candidate: str) -> float:
    ref, cand = _bigrams(words(reference)), _bigrams(words(candidate))
    if not ref or not cand:
        return 0.0
    overlap = sum((ref & cand).values())
    if overlap == 0:
        return 0.0
    p = overlap / sum(cand.values())
    r = overlap / sum(ref.values())
    return 2 * p * r / (p + r)


def rouge2_scores(question: str, candidate_texts: Sequence[str]) -> np.ndarray:
    return np.array([rouge2_f1(question, t) for t in candidate_texts])


# ---------------------------------------------------------------------------
# answer containment

_PUNCT_RE = re.compile("[" + re.escape(string.punctuation) + "]")


def normalize_for_match(text: str) -> str:
    text = _PUNCT_RE.sub(" ", text.lower())
    return " ".join(text.split())


def contains_answer(doc_text: str, answers: Sequence[str]) -> bool:
    """True iff some normalized answer occurs on token boundaries in the doc."""
    doc = f" {normalize_for_match(doc_text)} "
    for ans in answers:
        a = normalize_for_match(ans)
        if a and f" {a} " in doc:
            return True
    return False


def rule_based_rank(candidate_texts: Sequence[str], answers: Sequence[str]) -> tuple[int, ...]:
    """Stable partition: answer-bearing candidates first. Returns a 1-based order."""
    flags = [contains_answer(t, answers) for t in candidate_texts]
    hits = [i + 1 for i, f in enumerate(flags) if f]
    rest = [i + 1 for i, f in enumerate(flags) if not f]
    return tuple(hits + rest)


def categorize_flags(flags: Sequence[bool]) -> DataCategory:
    if not any(flags):
        return DataCategory.NO_ANSWER
    if flags[0]:
        return DataCategory.FIRST_ANSWER
    return DataCategory.FOLLOWING_ANSWER


def categorize(candidate_texts: Sequence[str], answers: Sequence[str]) -> DataCategory:
    return categorize_flags([contains_answer(t, answers) for t in candidate_texts])


def candidate_texts(index: CorpusIndex, cands: CandidateSet) -> list[str]:
    return [index.doc(i).text for i in cands.doc_ids]
