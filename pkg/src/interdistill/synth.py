"""Synthetic retrieval world with known relevance.

Vocabulary is split into common filler words, topic words and per-topic
names. Each question belongs to a topic, mentions a few topic words and two
names, and has a unique answer word that appears in exactly one (gold)
document. Documents mix a primary and a secondary topic with filler words.

Hidden relevance of document d to question q is::

    cos(topic_profile(q), topic_profile(d)) + w_name * frac_names(q in d) + w_answer * gold

where a topic profile is the per-topic share of a text's tokens. Since
cos <= 1, ``w_answer = 1`` and the gold doc always shares at least one
primary-topic word with the question, the gold document is the unique
argmax for its question.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import CandidateSet, DataCategory, Document, QAExample, categorize
from .errors import IntegrityError, InvalidArgumentError, ParseError

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SynthConfig:
    num_docs: int = 2000
    num_train: int = 1000
    num_valid: int = 200
    num_test: int = 500
    vocab_size: int = 1000
    topics: int = 50
    common_share: float = 0.2        # fraction of the vocabulary that is filler
    names_per_topic: int = 20
    names_per_question: int = 2
    question_topic_words: int = 3
    question_common_words: int = 3
    doc_len_min: int = 40
    doc_len_max: int = 80
    doc_common_rate: float = 0.5     # filler share of document tokens
    doc_secondary_rate: float = 0.2  # secondary-topic share of topical tokens
    filler_names: int = 2            # random same-topic names added to every doc
    gold_name_repeats: int = 2
    distractors_per_question: int = 2
    topic_dim: int = 8
    topic_bias: float = 0.5
    name_gain: float = 3.0
    shared_form_rate: float = 0.0    # chance a question names a concept by its document form
    answer_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        ints = ("num_docs", "num_train", "num_valid", "num_test", "vocab_size", "topics",
                "names_per_topic", "doc_len_min", "doc_len_max")
        for name in ints:
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.topics > self.vocab_size:
            raise InvalidArgumentError("topics must not exceed vocab_size")
        if self.num_docs < self.num_questions:
            raise InvalidArgumentError("need at least one gold document per question")
        if self.doc_len_min > self.doc_len_max:
            raise InvalidArgumentError("doc_len_min > doc_len_max")
        if self.names_per_question > self.names_per_topic:
            raise InvalidArgumentError("names_per_question > names_per_topic")
        n_topic_words = self.vocab_size - self.n_common
        if n_topic_words // self.topics < max(1, self.question_topic_words):
            raise InvalidArgumentError("too few topic words per topic")
        if not 0 <= self.doc_common_rate < 1 or not 0 <= self.doc_secondary_rate < 1:
            raise InvalidArgumentError("rates must lie in [0, 1)")

    @property
    def n_common(self) -> int:
        return max(1, int(round(self.vocab_size * self.common_share)))

    @property
    def num_questions(self) -> int:
        return self.num_train + self.num_valid + self.num_test

    @property
    def relevance_bound(self) -> float:
        return 1.0 + self.answer_weight


class LatentRelevance:
    """Dense (question x document) relevance table."""

    def __init__(self, qids: Sequence[str], doc_ids: Sequence[int], values: np.ndarray,
                 bound: float = 1.0):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(qids), len(doc_ids)):
            raise InvalidArgumentError("relevance table shape does not match ids")
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("relevance must be finite")
        self.qids = list(qids)
        self.doc_ids = list(doc_ids)
        self.values = values
        self.bound = bound
        self._q = {q: i for i, q in enumerate(self.qids)}
        self._d = {d: j for j, d in enumerate(self.doc_ids)}

    def has_question(self, qid: str) -> bool:
        return qid in self._q

    def row(self, qid: str, doc_ids: Sequence[int]) -> np.ndarray:
        try:
            i = self._q[qid]
            cols = [self._d[d] for d in doc_ids]
        except KeyError as exc:
            raise IntegrityError(f"no latent relevance for {exc.args[0]!r}") from None
        return self.values[i, cols]

    def save(self, path) -> None:
        """Sidecar file: a header line naming qids, doc ids and the bound, then
        one record per question holding its relevance to every doc in header order.

        Per-pair records ``{qid, doc_id, relevance}`` are also accepted by
        :meth:`load`; pairs not listed are zero.
        """
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"qids": self.qids, "doc_ids": self.doc_ids,
                                 "bound": self.bound}) + "\n")
            for i, qid in enumerate(self.qids):
                fh.write(json.dumps({"qid": qid, "relevance": self.values[i].tolist()}) + "\n")

    @classmethod
    def load(cls, path) -> "LatentRelevance":
        with open(path, encoding="utf-8") as fh:
            try:
                header = json.loads(fh.readline())
                qids, doc_ids = header["qids"], header["doc_ids"]
                bound = float(header.get("bound", 1.0))
            except (ValueError, KeyError, TypeError):
                raise ParseError("bad latent relevance header", 1) from None
            values = np.zeros((len(qids), len(doc_ids)))
            qpos = {q: i for i, q in enumerate(qids)}
            dpos = {d: j for j, d in enumerate(doc_ids)}
            for lineno, line in enumerate(fh, 2):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    i = qpos[rec["qid"]]
                    if "doc_id" in rec:
                        values[i, dpos[rec["doc_id"]]] = float(rec["relevance"])
                    else:
                        row = np.asarray(rec["relevance"], dtype=np.float64)
                        if row.shape != (len(doc_ids),):
                            raise ValueError("row length")
                        values[i] = row
                except (ValueError, KeyError, TypeError):
                    raise ParseError("bad latent relevance record", lineno) from None
        if not np.all(np.isfinite(values)):
            raise ParseError("latent relevance must be finite")
        return cls(qids, doc_ids, values, bound)


@dataclass
class SynthWorld:
    corpus: list[Document]
    examples: list[QAExample]
    latent: LatentRelevance
    gold: dict  # qid -> gold doc id
    config: SynthConfig
    concepts: dict = field(default_factory=dict, repr=False)  # word -> concept vector

    def split(self, name: str) -> list[QAExample]:
        return [ex for ex in self.examples if ex.split == name]


def _make_words(rng: np.random.Generator, n: int) -> list[str]:
    out, seen = [], set()
    while len(out) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syl))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def generate(config: SynthConfig = SynthConfig()) -> SynthWorld:
    """Build corpus, questions and latent relevance; a pure function of ``config``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n_common = cfg.n_common
    per_topic = (cfg.vocab_size - n_common) // cfg.topics
    n_names = cfg.topics * cfg.names_per_topic
    nq = cfg.num_questions
    pool = _make_words(rng, cfg.vocab_size + 2 * n_names + nq)
    common = pool[:n_common]
    topic_words = [pool[n_common + t * per_topic: n_common + (t + 1) * per_topic]
                   for t in range(cfg.topics)]
    base = cfg.vocab_size
    # each name concept has a question-side and a document-side surface form
    q_forms = pool[base: base + n_names]
    d_forms = pool[base + n_names: base + 2 * n_names]
    answers = pool[base + 2 * n_names:]

    # concept vectors: topics share a low-dimensional space so that every
    # pair of topics is graded; each name is its own orthogonal direction
    tau = rng.normal(size=(cfg.topics, cfg.topic_dim)) + cfg.topic_bias
    tau /= np.linalg.norm(tau, axis=1, keepdims=True)
    n_concepts = cfg.topic_dim + n_names
    concept = {}
    for t, ws in enumerate(topic_words):
        vec = np.zeros(n_concepts)
        vec[:cfg.topic_dim] = tau[t]
        for w in ws:
            concept[w] = vec
    for c in range(n_names):
        vec = np.zeros(n_concepts)
        vec[cfg.topic_dim + c] = cfg.name_gain
        concept[q_forms[c]] = concept[d_forms[c]] = vec

    zipf = 1.0 / np.arange(1, n_common + 1)
    zipf /= zipf.sum()

    def sample_common(n):
        return [common[i] for i in rng.choice(n_common, size=n, p=zipf)]

    def sample_topic(t, n):
        return [topic_words[t][i] for i in rng.integers(per_topic, size=n)]

    def topic_names(t, n, replace=True):
        picks = rng.choice(cfg.names_per_topic, size=n, replace=replace)
        return [t * cfg.names_per_topic + int(j) for j in picks]

    # questions
    splits = ["train"] * cfg.num_train + ["valid"] * cfg.num_valid + ["test"] * cfg.num_test
    q_topic = rng.integers(cfg.topics, size=nq)
    q_names, q_tokens = [], []
    for i in range(nq):
        t = int(q_topic[i])
        chosen = topic_names(t, cfg.names_per_question, replace=False)
        toks = sample_topic(t, cfg.question_topic_words) + sample_common(cfg.question_common_words)
        toks += [d_forms[c] if rng.random() < cfg.shared_form_rate else q_forms[c]
                 for c in chosen]
        q_names.append(chosen)
        q_tokens.append([toks[j] for j in rng.permutation(len(toks))])

    # documents: one gold per question, then fillers
    def topical_doc(primary):
        secondary = int(rng.integers(cfg.topics - 1))
        secondary += secondary >= primary
        length = int(rng.integers(cfg.doc_len_min, cfg.doc_len_max + 1))
        n_common_tok = int(rng.binomial(length, cfg.doc_common_rate))
        n_topical = length - n_common_tok
        n_secondary = int(rng.binomial(n_topical, cfg.doc_secondary_rate))
        n_primary = max(1, n_topical - n_secondary)
        return (sample_common(n_common_tok) + sample_topic(primary, n_primary)
                + sample_topic(secondary, n_secondary))

    doc_tokens, doc_topic = [], []
    for i in range(nq):
        t = int(q_topic[i])
        toks = topical_doc(t)
        toks += [d_forms[c] for c in q_names[i]] * cfg.gold_name_repeats + [answers[i]]
        doc_tokens.append(toks)
        doc_topic.append(t)
    for _ in range(cfg.num_docs - nq):
        t = int(rng.integers(cfg.topics))
        doc_tokens.append(topical_doc(t))
        doc_topic.append(t)
    for j in range(cfg.num_docs):
        doc_tokens[j] += [d_forms[c] for c in topic_names(doc_topic[j], cfg.filler_names)]
    by_topic = defaultdict(list)
    for j, t in enumerate(doc_topic):
        by_topic[t].append(j)
    for i in range(nq):
        others = [j for j in by_topic[int(q_topic[i])] if j != i]
        n_pick = min(len(others), cfg.distractors_per_question)
        for p in rng.choice(len(others), size=n_pick, replace=False) if n_pick else ():
            c = q_names[i][int(rng.integers(len(q_names[i])))]
            doc_tokens[others[int(p)]].append(d_forms[c])
    for j in range(cfg.num_docs):
        toks = doc_tokens[j]
        doc_tokens[j] = [toks[x] for x in rng.permutation(len(toks))]

    doc_ids = rng.permutation(cfg.num_docs)
    qids = [f"q{i:05d}" for i in range(nq)]

    # latent relevance: dot product of mean concept vectors, scaled into [-1, 1]
    def meaning(tokens):
        v = np.zeros(n_concepts)
        for w in tokens:
            hit = concept.get(w)
            if hit is not None:
                v += hit
        return v / len(tokens)

    sem = np.stack([meaning(t) for t in q_tokens]) @ np.stack([meaning(t) for t in doc_tokens]).T
    top = np.abs(sem).max()
    rel = sem / top if top > 0 else sem
    rel[np.arange(nq), np.arange(nq)] += cfg.answer_weight

    order = np.argsort(doc_ids)  # corpus listed by ascending id
    corpus = [Document(int(doc_ids[j]), " ".join(doc_tokens[j]).capitalize() + ".")
              for j in order]
    examples = [QAExample(qids[i], " ".join(q_tokens[i]).capitalize() + "?", (answers[i],),
                          splits[i]) for i in range(nq)]
    latent = LatentRelevance(qids, [int(doc_ids[j]) for j in order], rel[:, order],
                             cfg.relevance_bound)
    gold = {qids[i]: int(doc_ids[i]) for i in range(nq)}
    return SynthWorld(corpus, examples, latent, gold, cfg, concept)


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)


def plant_category_mix(examples: Sequence[QAExample], candidates: Sequence[CandidateSet],
                       texts_of, per_category: int | None = None):
    """Partition examples by the category of their candidate set.

    ``texts_of(cands)`` returns the candidate texts. Returns
    ``(selected, counts)``: up to ``per_category`` examples per category
    (in input order) and the full partition sizes.
    """
    if len(examples) != len(candidates):
        raise InvalidArgumentError("examples and candidates must align")
    groups = {c: [] for c in DataCategory}
    for ex, cs in zip(examples, candidates):
        if ex.qid != cs.qid:
            raise IntegrityError(f"qid mismatch: {ex.qid} vs {cs.qid}")
        groups[categorize(texts_of(cs), ex.answers)].append(ex)
    counts = {c: len(v) for c, v in groups.items()}
    if per_category is not None:
        groups = {c: v[:per_category] for c, v in groups.items()}
    return groups, counts
