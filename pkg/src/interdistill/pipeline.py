"""End-to-end runs on a corpus with hidden relevance, and the ablation sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .corpus import CorpusIndex, DataCategory, Document, QAExample, build_index, \
    candidate_texts, retrieve_many
from .distill import (DistillConfig, TrainReport, child_seed, direct_distill_train,
                      prepare_records, stage1_train_ranker, stage2_train_retriever)
from .encoder import EncoderModel, score_candidates
from .errors import InvalidArgumentError
from .evaluate import MetricReport, evaluate_retrieval, spearman
from .synth import plant_category_mix
from .teacher import (bm25_teacher, oracle_scores, oracle_teacher, order_from_scores,
                      rouge2_teacher, rule_based_teacher)

log = logging.getLogger(__name__)

TEACHERS = ("oracle", "remote", "bm25", "rouge2", "rule_based", "none")
AXES = ("train_size", "list_size", "data_category")


def base_encoder(seed: int) -> EncoderModel:
    return EncoderModel.init(child_seed(seed, "init"))


def make_teacher(kind: str, *, latent=None, index: CorpusIndex | None = None,
                 seed: int = 0, p_swap: float = 0.0, remote=None) -> Callable:
    """A ``teacher(example, candidates, texts)`` callable returning a TeacherRanking."""
    if kind == "oracle":
        if latent is None:
            raise InvalidArgumentError("the oracle teacher needs latent relevance")
        rng = np.random.default_rng(child_seed(seed, "teacher"))
        return lambda ex, c, texts: oracle_teacher(ex.qid, c.doc_ids, latent, p_swap, rng)
    if kind == "bm25":
        return lambda ex, c, texts: bm25_teacher(ex.qid, ex.question, c.doc_ids, index)
    if kind == "rouge2":
        return lambda ex, c, texts: rouge2_teacher(ex.qid, ex.question, texts)
    if kind == "rule_based":
        return lambda ex, c, texts: rule_based_teacher(ex.qid, texts, ex.answers)
    if kind == "remote":
        if remote is None:
            raise InvalidArgumentError("the remote teacher needs an endpoint")
        return lambda ex, c, texts: remote.rerank(ex.qid, ex.question, texts)
    raise InvalidArgumentError(f"unknown teacher {kind!r}")


def ranker_spearman(ranker: EncoderModel, examples: Sequence[QAExample], index: CorpusIndex,
                    base: EncoderModel, latent, k: int) -> float:
    """Mean rho between the ranker's order and the oracle order on base top-k sets."""
    rhos = []
    for ex, cands in zip(examples, retrieve_many(index, base, examples, k)):
        s = score_candidates(ranker, ranker.tokenize(ex.question, index.max_len),
                             [index.doc_tokens(d) for d in cands.doc_ids])
        rhos.append(spearman(order_from_scores(s), oracle_teacher(ex.qid, cands.doc_ids,
                                                                  latent).order))
    return float(np.mean(rhos))


@dataclass
class RunResult:
    config: DistillConfig
    baseline: MetricReport
    retriever: MetricReport | None = None
    direct: MetricReport | None = None
    ranker_rho: float | None = None
    reports: dict = field(default_factory=dict)   # stage -> TrainReport
    models: dict = field(default_factory=dict)    # role -> EncoderModel

    def summary(self) -> dict:
        out = {"baseline": self.baseline.to_dict()["hit_rates"]}
        if self.retriever is not None:
            out["intermediate"] = self.retriever.to_dict()["hit_rates"]
        if self.direct is not None:
            out["direct"] = self.direct.to_dict()["hit_rates"]
        if self.ranker_rho is not None:
            out["ranker_spearman"] = self.ranker_rho
        return out


def run_experiment(corpus: Sequence[Document], train: Sequence[QAExample],
                   test: Sequence[QAExample], config: DistillConfig, *, latent=None,
                   teacher: str = "oracle", p_swap: float = 0.0, direct: bool = False,
                   score_noise: float = 0.1, remote=None, ks: Sequence[int] = (5, 10),
                   index: CorpusIndex | None = None) -> RunResult:
    """Baseline, ranker, intermediate retriever and (optionally) direct retriever.

    Every model starts from the same seeded base encoder. The ranker's
    Spearman is measured only when ``latent`` is given.
    """
    if teacher not in TEACHERS:
        raise InvalidArgumentError(f"unknown teacher {teacher!r}")
    base = base_encoder(config.seed)
    index = index.reencode(base) if index is not None else build_index(corpus, base,
                                                                        config.max_len)
    result = RunResult(config, evaluate_retrieval(retrieve_many(index, base, test, max(ks)),
                                                  test, index, ks))
    result.models["base"] = base
    if teacher != "none":
        fn = make_teacher(teacher, latent=latent, index=index, seed=config.seed,
                          p_swap=p_swap, remote=remote)
        records = prepare_records(train, index, base, fn, config)
        ranker = base.copy("ranker")
        result.reports["ranker"] = stage1_train_ranker(records, ranker, config)
        retriever = base.copy("retriever")
        result.reports["retriever"] = stage2_train_retriever(records, ranker, retriever, config)
        result.retriever = _evaluate(index, retriever, test, ks)
        result.models.update(ranker=ranker, retriever=retriever)
        if latent is not None:
            result.ranker_rho = ranker_spearman(ranker, test, index, base, latent, config.k)
    if direct:
        if latent is None:
            raise InvalidArgumentError("direct distillation here needs latent relevance")
        rng = np.random.default_rng(child_seed(config.seed, "scores"))
        records = prepare_records(
            train, index, base,
            lambda ex, c, t: oracle_scores(ex.qid, c.doc_ids, latent, score_noise, rng), config)
        model = base.copy("retriever")
        result.reports["direct"] = direct_distill_train(records, model, config)
        result.direct = _evaluate(index, model, test, ks)
        result.models["direct"] = model
    return result


def _evaluate(index, model, test, ks) -> MetricReport:
    idx = index.reencode(model)
    return evaluate_retrieval(retrieve_many(idx, model, test, max(ks)), test, idx, ks)


@dataclass
class SweepRow:
    value: object
    metrics: dict
    error: str | None = None


def ablate(corpus, train, test, config: DistillConfig, axis: str, values: Sequence,
           **run_kw) -> list[SweepRow]:
    """Run the pipeline once per axis value with a shared seed.

    A failing sub-run stops the sweep; rows finished so far are returned with
    the failing row carrying ``error``.
    """
    if axis not in AXES:
        raise InvalidArgumentError(f"unknown ablation axis {axis!r}")
    rows: list[SweepRow] = []
    index = build_index(corpus, base_encoder(config.seed), config.max_len)
    if axis == "data_category":
        base = base_encoder(config.seed)
        cands = retrieve_many(index, base, train, config.k)
        groups, counts = plant_category_mix(train, cands, lambda c: candidate_texts(index, c))
        wanted = [DataCategory(v) for v in values] if values else list(DataCategory)
        jobs = [(c.value, groups[c]) for c in wanted if counts[c] > 0]
        for c in wanted:
            if counts[c] == 0:
                log.warning("category %s has no members; skipped", c.value)
    elif axis == "train_size":
        jobs = [(int(v), list(train)[:int(v)]) for v in values]
    else:
        jobs = [(int(v), list(train)) for v in values]
    for value, subset in jobs:
        try:
            cfg = replace(config, k=value) if axis == "list_size" else config
            res = run_experiment(corpus, subset, test, cfg, index=index, **run_kw)
        except Exception as exc:  # keep partial results
            rows.append(SweepRow(value, {}, f"{type(exc).__name__}: {exc}"))
            raise SweepAborted(rows) from exc
        metrics = res.summary()
        metrics["train_instances"] = len(subset)
        rows.append(SweepRow(value, metrics))
    return rows


class SweepAborted(Exception):
    def __init__(self, rows):
        super().__init__("ablation sweep aborted")
        self.rows = rows


def sweep_table(axis: str, rows: Sequence[SweepRow]) -> str:
    lines = [f"{axis:<16}  {'base HR@5':>9}  {'HR@5':>6}  {'HR@10':>6}  {'rho':>6}"]
    for r in rows:
        if r.error:
            lines.append(f"{str(r.value):<16}  failed: {r.error}")
            continue
        m = r.metrics
        inter = m.get("intermediate", {})
        rho = m.get("ranker_spearman")
        lines.append(f"{str(r.value):<16}  {m['baseline'].get('HR@5', float('nan')):9.3f}  "
                     f"{inter.get('HR@5', float('nan')):6.3f}  "
                     f"{inter.get('HR@10', float('nan')):6.3f}  "
                     f"{'-' if rho is None else format(rho, '.3f'):>6}")
    return "\n".join(lines)
