"""Training loops: ranker from teacher orders, retriever from the ranker, and
the direct (teacher scores to retriever) variant."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import (CandidateSet, CorpusIndex, DataCategory, QAExample, candidate_texts,
                     categorize, retrieve_topk)
from .encoder import EncoderModel, backward_scores, score_candidates, tokenize
from .errors import IntegrityError, InvalidArgumentError, UnparseableResponseError
from .numkit import (AdamState, adam_step, kl_divergence, kl_grad_wrt_q_scores, listmle_grad,
                     listmle_loss, softmax_temp)
from .teacher import TeacherRanking, TeacherScores

log = logging.getLogger(__name__)


def child_seed(seed: int, name: str) -> int:
    """Derive a stage seed: first 8 bytes of sha256("<seed>:<name>"), little-endian."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class DistillConfig:
    k: int = 5
    theta_ranker: float = 1.0
    theta_retriever: float = 1.0
    lr_ranker: float = 2e-2
    lr_retriever: float = 1e-2
    lr_direct: float = 1e-2
    epochs: int = 5
    batch_size: int = 20
    max_len: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    exclude_fallback: bool = False

    def __post_init__(self):
        if self.k < 2:
            raise InvalidArgumentError("k must be >= 2")
        for name in ("theta_ranker", "theta_retriever", "epochs", "batch_size", "max_len"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        for name in ("lr_ranker", "lr_retriever", "lr_direct"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")


@dataclass
class TrainingRecord:
    qid: str
    query_tokens: np.ndarray
    candidates: CandidateSet
    candidate_tokens: list
    category: DataCategory
    ranking: TeacherRanking | None = None
    scores: TeacherScores | None = None

    def __post_init__(self):
        k = len(self.candidates)
        if len(self.candidate_tokens) != k:
            raise IntegrityError(f"{self.qid}: token lists do not match candidates")
        if self.ranking is not None and len(self.ranking.order) != k:
            raise IntegrityError(f"{self.qid}: ranking length != candidate count")
        if self.scores is not None and len(self.scores.scores) != k:
            raise IntegrityError(f"{self.qid}: score count != candidate count")


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    seconds: float = 0.0
    epoch_seconds: list = field(default_factory=list)
    total: int = 0
    repaired: int = 0
    fallback: int = 0
    skipped: int = 0
    checkpoint: str | None = None

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, (loss, sec) in enumerate(zip(self.epoch_losses, self.epoch_seconds), 1):
                fh.write(json.dumps({"epoch": i, "mean_loss": loss, "seconds": sec}) + "\n")

    def summary(self) -> dict:
        return asdict(self)


def make_record(example: QAExample, cands: CandidateSet, index: CorpusIndex,
                vocab_buckets: int, teacher_out=None) -> TrainingRecord:
    texts = candidate_texts(index, cands)
    rec = TrainingRecord(
        example.qid, tokenize(example.question, index.max_len, vocab_buckets), cands,
        [index.doc_tokens(d) for d in cands.doc_ids], categorize(texts, example.answers))
    if isinstance(teacher_out, TeacherRanking):
        rec.ranking = teacher_out
    elif isinstance(teacher_out, TeacherScores):
        rec.scores = teacher_out
    return rec


def prepare_records(examples: Sequence[QAExample], index: CorpusIndex, retriever: EncoderModel,
                    teacher: Callable, config: DistillConfig,
                    skipped: list | None = None) -> list[TrainingRecord]:
    """Retrieve top-k with ``retriever`` and ask ``teacher`` about each example.

    ``teacher(example, candidates, texts)`` returns a TeacherRanking or
    TeacherScores. Integrity and parse failures skip that example only; the
    skipped qids are appended to ``skipped`` when given.
    """
    records = []
    for ex in examples:
        cands = retrieve_topk(index, retriever, ex.question, config.k, ex.qid)
        try:
            out = teacher(ex, cands, candidate_texts(index, cands))
            records.append(make_record(ex, cands, index, retriever.vocab_buckets, out))
        except (IntegrityError, UnparseableResponseError) as exc:
            log.warning("skipping %s: %s", ex.qid, exc)
            if skipped is not None:
                skipped.append(ex.qid)
    return records


def _train(records: Sequence[TrainingRecord], model: EncoderModel, config: DistillConfig,
           lr: float, seed_name: str, per_record) -> TrainReport:
    if not records:
        raise InvalidArgumentError("no training records")
    report = TrainReport(total=len(records),
                         repaired=sum(1 for r in records if r.ranking is not None and r.ranking.repaired),
                         fallback=sum(1 for r in records
                                      if (r.ranking or r.scores) is not None
                                      and (r.ranking or r.scores).fallback))
    state = AdamState.zeros_like(model.table, beta1=config.beta1, beta2=config.beta2,
                                 eps=config.eps)
    rng = np.random.default_rng(child_seed(config.seed, seed_name))
    grad = np.zeros_like(model.table)
    start = time.perf_counter()
    for _ in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(records))
        losses = []
        for b in range(0, len(order), config.batch_size):
            batch = [records[i] for i in order[b:b + config.batch_size]]
            grad.fill(0.0)
            scale = 1.0 / len(batch)
            for rec in batch:
                loss, upstream = per_record(rec)
                losses.append(loss)
                backward_scores(model, rec.query_tokens, rec.candidate_tokens,
                                upstream * scale, out=grad)
            adam_step(model.table, grad, state, lr, inplace=True)
        report.epoch_losses.append(float(np.mean(losses)))
        report.epoch_seconds.append(time.perf_counter() - t0)
    report.seconds = time.perf_counter() - start
    return report


def _usable(records, config, attr):
    out = [r for r in records if getattr(r, attr) is not None]
    if len(out) != len(records):
        raise InvalidArgumentError(f"every record needs teacher {attr}")
    if config.exclude_fallback:
        out = [r for r in out if not getattr(r, attr).fallback]
    return out


def ranker_loss_and_grad(ranker: EncoderModel, rec: TrainingRecord, theta: float):
    """ListMLE of the teacher order under logits score/theta, and d loss / d score."""
    logits = score_candidates(ranker, rec.query_tokens, rec.candidate_tokens) / theta
    order = rec.ranking.order
    return listmle_loss(logits, order), listmle_grad(logits, order) / theta


def stage1_train_ranker(records: Sequence[TrainingRecord], ranker: EncoderModel,
                        config: DistillConfig) -> TrainReport:
    """Fit ``ranker`` (in place) to the teacher orders with ListMLE."""
    recs = _usable(records, config, "ranking")
    theta = config.theta_ranker
    return _train(recs, ranker, config, config.lr_ranker, "stage1",
                  lambda r: ranker_loss_and_grad(ranker, r, theta))


def _kl_step(student: EncoderModel, rec: TrainingRecord, target: np.ndarray, theta: float):
    s = score_candidates(student, rec.query_tokens, rec.candidate_tokens)
    q = softmax_temp(s, theta)
    return kl_divergence(target, q), kl_grad_wrt_q_scores(target, s, theta)


def ranker_distribution(ranker: EncoderModel, rec: TrainingRecord, theta: float) -> np.ndarray:
    return softmax_temp(score_candidates(ranker, rec.query_tokens, rec.candidate_tokens), theta)


def stage2_train_retriever(records: Sequence[TrainingRecord], ranker: EncoderModel,
                           retriever: EncoderModel, config: DistillConfig,
                           cache_targets: bool = False) -> TrainReport:
    """Fit ``retriever`` (in place) to KL(P_ranker || P_retriever) on each candidate set.

    The ranker is only read. Its distribution is recomputed per step unless
    ``cache_targets`` is set; both give identical results.
    """
    if not records:
        raise InvalidArgumentError("no training records")
    if ranker.table is retriever.table:
        raise InvalidArgumentError("ranker and retriever must not share parameters")
    tr, tq = config.theta_ranker, config.theta_retriever
    cached = {}
    if cache_targets:
        cached = {id(r): ranker_distribution(ranker, r, tr) for r in records}

    def step(rec):
        p = cached[id(rec)] if cache_targets else ranker_distribution(ranker, rec, tr)
        return _kl_step(retriever, rec, p, tq)

    return _train(list(records), retriever, config, config.lr_retriever, "stage2", step)


def direct_distill_train(records: Sequence[TrainingRecord], retriever: EncoderModel,
                         config: DistillConfig) -> TrainReport:
    """Fit ``retriever`` to softmax(teacher_scores / theta_ranker) with the same KL loss."""
    recs = _usable(records, config, "scores")
    tr, tq = config.theta_ranker, config.theta_retriever
    targets = {id(r): softmax_temp(r.scores.scores, tr) for r in recs}
    return _train(recs, retriever, config, config.lr_direct, "direct",
                  lambda r: _kl_step(retriever, r, targets[id(r)], tq))
