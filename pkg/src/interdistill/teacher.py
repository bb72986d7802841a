"""Teachers: anything that re-ranks a candidate list.

Three families live here:

* prompt builders and response parsers for a chat-completions LLM, plus
  :class:`RemoteTeacher`, a cached client for such an endpoint;
* :func:`oracle_teacher` / :func:`oracle_scores`, which read hidden
  relevance from the synthetic generator;
* lexical teachers (BM25, ROUGE-2, rule-based) built on :mod:`corpus`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np

from . import corpus as _corpus
from .errors import (EndpointError, IntegrityError, InvalidArgumentError, ParseError,
                     TransportError, UnparseableResponseError)
from .numkit import check_permutation

log = logging.getLogger(__name__)

PROVENANCES = ("remote", "oracle", "bm25", "rouge2", "rule_based")


@dataclass(frozen=True)
class TeacherRanking:
    qid: str
    order: tuple[int, ...]  # 1-based candidate positions, most relevant first
    provenance: str
    raw: str | None = None
    repaired: bool = False
    fallback: bool = False

    def __post_init__(self):
        check_permutation(self.order, len(self.order))
        if self.provenance not in PROVENANCES:
            raise InvalidArgumentError(f"unknown provenance {self.provenance!r}")

    def to_record(self) -> dict:
        return {"qid": self.qid, "order": list(self.order), "provenance": self.provenance,
                "repaired": self.repaired, "fallback": self.fallback, "raw": self.raw}


@dataclass(frozen=True)
class TeacherScores:
    qid: str
    scores: tuple[float, ...]
    provenance: str
    raw: str | None = None
    fallback: bool = False

    def __post_init__(self):
        if not self.scores or any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise InvalidArgumentError("teacher scores must be non-empty and lie in [0, 1]")

    def to_record(self) -> dict:
        return {"qid": self.qid, "scores": list(self.scores), "provenance": self.provenance,
                "fallback": self.fallback, "raw": self.raw}


def teacher_from_record(rec: dict):
    if "order" in rec:
        return TeacherRanking(str(rec["qid"]), tuple(int(i) for i in rec["order"]),
                              rec["provenance"], rec.get("raw"), bool(rec.get("repaired")),
                              bool(rec.get("fallback")))
    return TeacherScores(str(rec["qid"]), tuple(float(s) for s in rec["scores"]),
                         rec["provenance"], rec.get("raw"), bool(rec.get("fallback")))


def write_teacher_file(items, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            fh.write(json.dumps(it.to_record(), ensure_ascii=False) + "\n")


def load_teacher_file(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(teacher_from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"bad teacher record ({exc})", lineno) from None
    return out


# ---------------------------------------------------------------------------
# prompts

def _escape(text: str) -> str:
    # keeps candidate text from forging <DocumentN> markers
    return " ".join(text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").split())


def build_rerank_prompt(question: str, candidates: Sequence[str]) -> str:
    k = len(candidates)
    if k < 2:
        raise InvalidArgumentError("re-ranking needs at least two candidates")
    lines = [
        f"I will give you a question and {k} passages, each labelled with a numeric "
        "identifier. Rank the passages by how relevant they are to the question.",
        f"<Question> {_escape(question)}",
    ]
    lines += [f"<Document{i}> {_escape(t)}" for i, t in enumerate(candidates, 1)]
    lines.append(
        f"Rank all {k} passages above from most to least relevant to the question. "
        "Answer with the identifiers only, in the form Document2 > Document1 > Document3, "
        "and output nothing else.")
    return "\n".join(lines)


def build_score_prompt(question: str, candidates: Sequence[str]) -> str:
    k = len(candidates)
    if k < 1:
        raise InvalidArgumentError("scoring needs at least one candidate")
    lines = [
        f"I will give you a question and {k} passages, each labelled with a numeric "
        "identifier. Rate how similar each passage is to the question with a score "
        "between 0 and 1.",
        f"<Question> {_escape(question)}",
    ]
    lines += [f"<Document{i}> {_escape(t)}" for i, t in enumerate(candidates, 1)]
    lines.append(
        f"Return exactly {k} scores, one per passage in the order given, as a list such as "
        "[0.2, 0.9, 0.4]. Only output the score list.")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# parsing

_DOC_ID_RE = re.compile(r"document\s*(\d+)", re.IGNORECASE)
_BRACKET_ID_RE = re.compile(r"\[\s*(\d+)\s*\]")
_BARE_ID_RE = re.compile(r"(?<![\d.])(\d+)(?![\d.])")
_LIST_RE = re.compile(r"\[([^\[\]]*)\]")


def _extract_ids(text: str) -> list[int]:
    for pattern in (_DOC_ID_RE, _BRACKET_ID_RE, _BARE_ID_RE):
        found = pattern.findall(text)
        if found:
            return [int(x) for x in found]
    return []


def parse_rerank_response(text: str, k: int, qid: str = "",
                          provenance: str = "remote") -> TeacherRanking:
    """Read a ranking such as ``Document3 > Document1`` or ``[3] > [1]``.

    Out-of-range ids are dropped, duplicates keep their first occurrence, and
    ids never mentioned are appended in ascending order; ``repaired`` is set
    whenever any of that happened.
    """
    if k < 2:
        raise InvalidArgumentError("k must be >= 2")
    ids = _extract_ids(text or "")
    valid = [i for i in ids if 1 <= i <= k]
    if not valid:
        raise UnparseableResponseError(f"no candidate identifiers in response: {text!r:.80}")
    seen, order = set(), []
    for i in valid:
        if i not in seen:
            seen.add(i)
            order.append(i)
    missing = [i for i in range(1, k + 1) if i not in seen]
    repaired = len(ids) != len(order) or bool(missing)
    return TeacherRanking(qid, tuple(order + missing), provenance, text, repaired)


def parse_score_response(text: str, k: int, qid: str = "",
                         provenance: str = "remote") -> TeacherScores:
    m = _LIST_RE.search(text or "")
    if not m:
        raise UnparseableResponseError("no bracketed score list in response")
    parts = [p.strip() for p in m.group(1).split(",") if p.strip()]
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise UnparseableResponseError(f"non-numeric score list: {m.group(0)!r}") from None
    if len(values) != k or not all(np.isfinite(values)):
        raise UnparseableResponseError(f"expected {k} finite scores, got {len(values)}")
    return TeacherScores(qid, tuple(min(1.0, max(0.0, v)) for v in values), provenance, text)


def render_ranking(order: Sequence[int]) -> str:
    return " > ".join(f"Document{i}" for i in order)


def order_from_scores(scores) -> tuple[int, ...]:
    """1-based order by descending score, ties to the earlier candidate."""
    s = np.asarray(scores, dtype=np.float64)
    return tuple(int(i) + 1 for i in np.lexsort((np.arange(s.size), -s)))


# ---------------------------------------------------------------------------
# synthetic oracle

def oracle_teacher(qid: str, doc_ids: Sequence[int], latent, p_swap: float = 0.0,
                   rng: np.random.Generator | None = None) -> TeacherRanking:
    """Order candidates by hidden relevance, ties to the smaller doc id.

    With ``p_swap > 0`` a single left-to-right pass swaps each adjacent pair
    with that probability.
    """
    rel = latent.row(qid, doc_ids)
    ids = np.asarray(doc_ids, dtype=np.int64)
    order = list(np.lexsort((ids, -rel)) + 1)
    if p_swap > 0:
        if rng is None:
            raise InvalidArgumentError("p_swap > 0 needs a seeded generator")
        for j in range(len(order) - 1):
            if rng.random() < p_swap:
                order[j], order[j + 1] = order[j + 1], order[j]
    return TeacherRanking(qid, tuple(int(i) for i in order), "oracle")


def oracle_scores(qid: str, doc_ids: Sequence[int], latent, noise: float = 0.0,
                  rng: np.random.Generator | None = None) -> TeacherScores:
    """Hidden relevance mapped into [0, 1], plus optional Gaussian noise."""
    s = latent.row(qid, doc_ids) / latent.bound
    if noise > 0:
        if rng is None:
            raise InvalidArgumentError("noise > 0 needs a seeded generator")
        s = s + rng.normal(0.0, noise, size=s.size)
    return TeacherScores(qid, tuple(float(v) for v in np.clip(s, 0.0, 1.0)), "oracle")


# ---------------------------------------------------------------------------
# lexical teachers

def bm25_teacher(qid: str, question: str, doc_ids: Sequence[int], index) -> TeacherRanking:
    scores = _corpus.bm25_scores(question, doc_ids, index)
    return TeacherRanking(qid, order_from_scores(scores), "bm25")


def rouge2_teacher(qid: str, question: str, texts: Sequence[str]) -> TeacherRanking:
    return TeacherRanking(qid, order_from_scores(_corpus.rouge2_scores(question, texts)), "rouge2")


def rule_based_teacher(qid: str, texts: Sequence[str], answers: Sequence[str]) -> TeacherRanking:
    return TeacherRanking(qid, _corpus.rule_based_rank(texts, answers), "rule_based")


# ---------------------------------------------------------------------------
# remote endpoint

@dataclass(frozen=True)
class TeacherEndpointConfig:
    base_url: str
    model: str = "gpt-4o"
    timeout: float = 60.0
    max_in_flight: int = 4
    retries: int = 3          # attempts per request, counting the first
    backoff: float = 0.5      # seconds, doubled after each failed attempt
    cache_dir: str | None = None
    api_key_env: str = "TEACHER_API_KEY"

    def __post_init__(self):
        if not self.timeout > 0:
            raise InvalidArgumentError("timeout must be positive")
        if self.max_in_flight < 1:
            raise InvalidArgumentError("max_in_flight must be >= 1")
        if self.retries < 1:
            raise InvalidArgumentError("retries must be >= 1")


def cache_key(model: str, prompt: str) -> str:
    return hashlib.sha256(f"{model}\x00{prompt}".encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only JSONL cache of endpoint responses keyed by (model, prompt)."""

    FILENAME = "teacher_cache.jsonl"

    def __init__(self, directory):
        self.path = Path(directory) / self.FILENAME
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    # a torn final line from a crash is skipped
                    try:
                        rec = json.loads(line)
                        self._entries[rec["key"]] = rec
                    except (ValueError, KeyError, TypeError):
                        continue

    def get(self, key: str) -> dict | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, model: str, prompt: str, raw: str, parsed) -> dict:
        rec = {"key": key, "model": model,
               "prompt_hash": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
               "raw_response": raw, "parsed": parsed, "timestamp": time.time()}
        line = json.dumps(rec, ensure_ascii=False) + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            self._entries[key] = rec
        return rec

    def __len__(self):
        return len(self._entries)


@dataclass
class TeacherEvent:
    qid: str
    kind: str
    detail: str = ""


@dataclass
class RemoteTeacher:
    """Chat-completions teacher with retries, a response cache and a fallback.

    A response that cannot be parsed after ``config.retries`` attempts yields
    the identity order (or uniform scores) with ``fallback=True`` and an
    entry in :attr:`events`.
    """

    config: TeacherEndpointConfig
    transport: httpx.BaseTransport | None = None
    events: list = field(default_factory=list)
    requests_made: int = 0

    def __post_init__(self):
        self._cache = ResponseCache(self.config.cache_dir) if self.config.cache_dir else None
        self._lock = threading.Lock()
        headers = {}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(base_url=self.config.base_url.rstrip("/"),
                                    timeout=self.config.timeout, headers=headers,
                                    transport=self.transport)

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, prompt: str) -> str:
        body = {"model": self.config.model, "temperature": 0,
                "messages": [{"role": "user", "content": prompt}]}
        delay = self.config.backoff
        last: Exception | None = None
        for attempt in range(self.config.retries):
            if attempt:
                time.sleep(delay)
                delay *= 2
            with self._lock:
                self.requests_made += 1
            try:
                resp = self._client.post("/chat/completions", json=body)
            except httpx.HTTPError as exc:
                last = TransportError(f"{type(exc).__name__}: {exc}")
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = EndpointError(resp.status_code, resp.text[:200])
                continue
            if not 200 <= resp.status_code < 300:
                raise EndpointError(resp.status_code, resp.text[:200])
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError):
                return resp.text
        assert last is not None
        raise last

    def _ask(self, qid: str, prompt: str, parse):
        """Return ``(parsed, raw)``; ``parsed`` is None when every attempt was garbage."""
        key = cache_key(self.config.model, prompt)
        if self._cache is not None:
            hit = self._cache.get(key)
            if hit is not None:
                return hit["parsed"], hit["raw_response"]
        raw, parsed = "", None
        for _ in range(self.config.retries):
            raw = self._post(prompt)
            try:
                parsed = parse(raw)
                break
            except UnparseableResponseError:
                continue
        if self._cache is not None:
            self._cache.put(key, self.config.model, prompt, raw, parsed)
        return parsed, raw

    def rerank(self, qid: str, question: str, texts: Sequence[str]) -> TeacherRanking:
        k = len(texts)
        prompt = build_rerank_prompt(question, texts)

        def parse(raw):
            r = parse_rerank_response(raw, k)
            return {"order": list(r.order), "repaired": r.repaired}

        parsed, raw = self._ask(qid, prompt, parse)
        if parsed is None:
            self._event(qid, "fallback", "unparseable ranking; identity order used")
            return TeacherRanking(qid, tuple(range(1, k + 1)), "remote", raw, False, True)
        return TeacherRanking(qid, tuple(parsed["order"]), "remote", raw, parsed["repaired"])

    def score(self, qid: str, question: str, texts: Sequence[str]) -> TeacherScores:
        k = len(texts)
        prompt = build_score_prompt(question, texts)
        parsed, raw = self._ask(qid, prompt, lambda r: list(parse_score_response(r, k).scores))
        if parsed is None:
            self._event(qid, "fallback", "unparseable scores; uniform scores used")
            return TeacherScores(qid, (0.5,) * k, "remote", raw, True)
        return TeacherScores(qid, tuple(parsed), "remote", raw)

    def _event(self, qid: str, kind: str, detail: str):
        log.warning("teacher %s for %s: %s", kind, qid, detail)
        with self._lock:
            self.events.append(TeacherEvent(qid, kind, detail))

    def map(self, method: str, items: Sequence[tuple[str, str, Sequence[str]]]) -> list:
        """Run ``rerank`` or ``score`` over ``(qid, question, texts)`` items concurrently.

        Results come back in input order.
        """
        fn = getattr(self, method)
        if self.config.max_in_flight == 1:
            return [fn(*it) for it in items]
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            return list(pool.map(lambda it: fn(*it), items))

    @property
    def fallback_count(self) -> int:
        return sum(1 for e in self.events if e.kind == "fallback")


def check_latent_coverage(latent, qids: Sequence[str]) -> None:
    missing = [q for q in qids if not latent.has_question(q)]
    if missing:
        raise IntegrityError(f"no latent relevance for {len(missing)} question(s), e.g. {missing[0]}")
