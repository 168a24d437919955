"""Metrics, ablation variants, and the end-to-end experiment runner.

Variants reuse the exact operation modes defined upstream so they cannot
drift from the main path: ``msr`` and ``msl`` switch Top-K selection to
random / lowest, ``rsimu`` switches peer retrieval to random, ``simu`` and
``irt`` mask prompt blocks.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import dataset as dataset_mod
from . import irt as irt_mod
from . import pathscore, predict, retrieval
from .config import RunConfig, fingerprint
from .errors import UndefinedMetricError
from .llm import LlmClient, map_bounded
from .mrhin import TEMPLATES, Mrhin, PathInstance, sample_instances
from .seeding import derive_seed

logger = logging.getLogger(__name__)

VARIANT_NAMES = ("msr", "msl", "simu", "rsimu", "irt")


def auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Rank-based AUC with tied scores contributing one half.

    Equivalent to counting, over all positive/negative pairs, wins plus half
    ties, but computed from midranks in O(n log n).
    """
    if len(labels) != len(scores):
        raise ValueError("labels and scores must have equal length")
    n = len(labels)
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    order = sorted(range(n), key=lambda i: scores[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        midrank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = midrank
        i = j + 1
    rank_sum_pos = sum(r for r, y in zip(ranks, labels) if y == 1)
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def accuracy(labels: Sequence[int], outcomes: Sequence[int]) -> float:
    if len(labels) != len(outcomes):
        raise ValueError("labels and outcomes must have equal length")
    if not labels:
        raise UndefinedMetricError("accuracy of an empty prediction set is undefined")
    return sum(1 for y, o in zip(labels, outcomes) if y == o) / len(labels)


def unimodal_or_plateau(values: Sequence[float], tol: float = 0.01) -> bool:
    """True if the series rises (within tol) to some peak and never rises after it."""
    n = len(values)
    for peak in range(n):
        rising = all(values[i + 1] >= values[i] - tol for i in range(peak))
        falling = all(values[i + 1] <= values[i] + tol for i in range(peak, n - 1))
        if rising and falling:
            return True
    return False


@dataclass(frozen=True)
class VariantMetrics:
    acc: float
    auc: float
    n: int


@dataclass
class EvalReport:
    acc: float
    auc: float
    n: int
    config_fingerprint: str
    per_variant: dict[str, VariantMetrics]
    run_rows: list[dict] = field(default_factory=list)
    resolved_config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "acc": self.acc,
            "auc": self.auc,
            "n": self.n,
            "config_fingerprint": self.config_fingerprint,
            "config": self.resolved_config,
            "per_variant": {
                name: {"acc": v.acc, "auc": v.auc, "n": v.n}
                for name, v in self.per_variant.items()
            },
            "runs": self.run_rows,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        lines = [
            f"config {self.config_fingerprint}  n={self.n}",
            f"{'variant':<10} {'ACC':>8} {'AUC':>8}",
            f"{'full':<10} {self.acc:>8.4f} {self.auc:>8.4f}",
        ]
        for name in sorted(self.per_variant):
            v = self.per_variant[name]
            lines.append(f"{'w/o ' + name:<10} {v.acc:>8.4f} {v.auc:>8.4f}")
        return "\n".join(lines) + "\n"


class PipelineContext:
    """Lazily built, memoized stage artifacts shared across variants and runs."""

    def __init__(self, cfg: RunConfig, data: dataset_mod.Dataset | None = None,
                 model: irt_mod.IrtModel | None = None):
        self.cfg = cfg
        self._dataset = data
        self._irt = model
        self._graph: Mrhin | None = None
        self._instances: dict[int, dict[str, dict[str, list[PathInstance]]]] = {}
        self._scored: dict[int, dict[str, dict[str, list[pathscore.ScoredInstance]]]] = {}
        self._client: LlmClient | None = None

    @property
    def dataset(self) -> dataset_mod.Dataset:
        if self._dataset is None:
            d = dataset_mod.ingest(self.cfg.data)
            self._dataset = dataset_mod.split(d, self.cfg.seed)
        return self._dataset

    @property
    def irt(self) -> irt_mod.IrtModel:
        if self._irt is None:
            self._irt = irt_mod.fit(self.dataset)
        return self._irt

    @property
    def graph(self) -> Mrhin:
        if self._graph is None:
            self._graph = Mrhin.build(self.dataset, self.irt)
        return self._graph

    @property
    def client(self) -> LlmClient:
        if self._client is None:
            self._client = LlmClient(
                endpoint=self.cfg.llm_endpoint,
                model_name=self.cfg.llm_model,
                timeout=self.cfg.llm_timeout,
                max_retries=self.cfg.llm_max_retries,
                max_in_flight=self.cfg.llm_max_in_flight,
                backend=self.cfg.llm_backend,
            )
        return self._client

    def target_questions(self) -> list[str]:
        return sorted({i.question_id for i in self.dataset.iter_split("test")})

    def share_stage_caches(self, other: "PipelineContext") -> None:
        """Adopt another context's sampled/scored instances (valid when only
        selection-stage settings such as top_k differ between the configs)."""
        self._dataset = other._dataset
        self._irt = other._irt
        self._graph = other._graph
        self._instances = other._instances
        self._scored = other._scored

    def instances(self, run_seed: int) -> dict[str, dict[str, list[PathInstance]]]:
        if run_seed not in self._instances:
            walk_seed = derive_seed(run_seed, "walks")
            out: dict[str, dict[str, list[PathInstance]]] = {}
            for qid in self.target_questions():
                out[qid] = {}
                for name in TEMPLATES:
                    out[qid][name] = sample_instances(
                        self.graph,
                        TEMPLATES[name],
                        qid,
                        n=self.cfg.n_walks,
                        walk_len=self.cfg.walk_len,
                        seed=walk_seed,
                    )
            self._instances[run_seed] = out
        return self._instances[run_seed]

    def scored(self, run_seed: int) -> dict[str, dict[str, list[pathscore.ScoredInstance]]]:
        if run_seed not in self._scored:
            instances = self.instances(run_seed)
            out: dict[str, dict[str, list[pathscore.ScoredInstance]]] = {}
            for qid, per_template in instances.items():
                out[qid] = {}
                for name, group in per_template.items():
                    if self.cfg.score_backend == "llm":
                        # keyed by walk index: pool completion order cannot reorder results
                        scores = map_bounded(
                            lambda p: pathscore.score_llm(p, self.client, self.graph),
                            dict(enumerate(group)),
                            self.client.max_in_flight,
                        )
                        out[qid][name] = [
                            pathscore.ScoredInstance(p, scores[k]) for k, p in enumerate(group)
                        ]
                    else:
                        out[qid][name] = pathscore.score_all(group, self.graph)
            self._scored[run_seed] = out
        return self._scored[run_seed]


def _retain_top_k(
    scored: Mapping[str, Mapping[str, list[pathscore.ScoredInstance]]],
    k: int,
    mode: str,
    run_seed: int,
) -> dict[str, list[pathscore.ScoredInstance]]:
    retained: dict[str, list[pathscore.ScoredInstance]] = {}
    for qid in sorted(scored):
        rows: list[pathscore.ScoredInstance] = []
        for name in TEMPLATES:
            group = scored[qid].get(name, [])
            rows.extend(
                pathscore.select_top_k(group, k, mode, seed=derive_seed(run_seed, "topk", qid, name))
            )
        retained[qid] = rows
    return retained


def _path_pair_pool(
    retained: Mapping[str, list[pathscore.ScoredInstance]],
    d: dataset_mod.Dataset,
) -> list[tuple[str, str, int]]:
    """(answerer, candidate, f) triples mirroring the deployment pair distribution."""
    by_question = d.by_question("train")
    pool: set[tuple[str, str, int]] = set()
    for qid, rows in retained.items():
        if not rows:
            continue
        counts: dict[str, int] = {}
        for scored in rows:
            for kind, nid in scored.instance.nodes:
                if kind == "U":
                    counts[nid] = counts.get(nid, 0) + 1
        answerers = sorted({i.student_id for i in by_question.get(qid, ())})
        for u in answerers:
            for sid, f in counts.items():
                if sid != u:
                    pool.add((u, sid, f))
    return sorted(pool)


def run_variant(ctx: PipelineContext, variant: str | None, run_seed: int) -> VariantMetrics:
    """Execute retrieval + prediction over the test split for one variant."""
    cfg = ctx.cfg
    select_mode = {"msr": "random", "msl": "lowest"}.get(variant, cfg.path_select)
    retrieval_mode = "random" if variant == "rsimu" else cfg.retrieval_mode
    mask: set[str] = set()
    if cfg.mask_simu or variant == "simu":
        mask.add(predict.MASK_SIMU)
    if cfg.mask_irt or variant == "irt":
        mask.add(predict.MASK_IRT)

    d = ctx.dataset
    m = ctx.irt
    retained = _retain_top_k(ctx.scored(run_seed), cfg.top_k, select_mode, run_seed)

    pair_pool = None
    if cfg.pair_source == "paths":
        pair_pool = _path_pair_pool(retained, d)
        if not pair_pool:
            logger.warning("empty path pair pool; falling back to random pairs")
            pair_pool = None
    sim = retrieval.fit_similarity(
        d, m, cfg.pair_sample, seed=derive_seed(run_seed, "pairs"), c=cfg.c, pair_pool=pair_pool
    )

    tests = sorted(d.iter_split("test"), key=lambda i: (i.student_id, i.timestamp, i.question_id))
    bundles: dict[tuple, predict.PromptBundle] = {}
    for i in tests:
        peers: list[str] = []
        if predict.MASK_SIMU not in mask:
            cands = retrieval.build_candidates(retained.get(i.question_id, []), i.student_id)
            peers = retrieval.top_s(
                cands,
                sim,
                m,
                d,
                cfg.top_s,
                mode=retrieval_mode,
                c=cfg.c,
                seed=derive_seed(run_seed, "tops", i.student_id, i.question_id, i.timestamp),
            )
        key = (i.student_id, i.question_id, i.timestamp)
        bundles[key] = predict.build_prompt(i.student_id, i.question_id, peers, m, d, mask, cfg.window)

    client = ctx.client
    # predictions are keyed by interaction, so pool completion order is irrelevant
    predictions = map_bounded(lambda b: predict.predict(b, client), bundles, client.max_in_flight)

    labels: list[int] = []
    scores: list[float] = []
    outcomes: list[int] = []
    for i in tests:
        pred = predictions[(i.student_id, i.question_id, i.timestamp)]
        labels.append(1 if i.correct else 0)
        scores.append(pred.p_correct)
        outcomes.append(1 if pred.outcome == "correct" else 0)
    return VariantMetrics(acc=accuracy(labels, outcomes), auc=auc(labels, scores), n=len(labels))


def run_experiment(cfg: RunConfig, ctx: PipelineContext | None = None) -> EvalReport:
    """Base configuration plus requested variants, averaged over ``cfg.runs`` seeds."""
    ctx = ctx or PipelineContext(cfg)
    variant_list = [None] + [v for v in cfg.variants if v]
    for v in variant_list[1:]:
        if v not in VARIANT_NAMES:
            raise ValueError(f"unknown variant {v!r}; pick from {VARIANT_NAMES}")

    rows: list[dict] = []
    sums: dict[str, list[float]] = {}
    counts: dict[str, int] = {}
    for r in range(cfg.runs):
        run_seed = derive_seed(cfg.seed, "run", r)
        for variant in variant_list:
            name = variant or "full"
            metrics = run_variant(ctx, variant, run_seed)
            rows.append(
                {"run": r, "variant": name, "acc": metrics.acc, "auc": metrics.auc, "n": metrics.n}
            )
            acc_auc = sums.setdefault(name, [0.0, 0.0])
            acc_auc[0] += metrics.acc
            acc_auc[1] += metrics.auc
            counts[name] = metrics.n
            logger.info("run %d %s: acc=%.4f auc=%.4f", r, name, metrics.acc, metrics.auc)

    def mean_of(name: str) -> VariantMetrics:
        return VariantMetrics(
            acc=sums[name][0] / cfg.runs, auc=sums[name][1] / cfg.runs, n=counts[name]
        )

    full = mean_of("full")
    per_variant = {v: mean_of(v) for v in sums if v != "full"}
    resolved = dataclasses.asdict(cfg)
    resolved["variants"] = list(resolved["variants"])
    return EvalReport(
        acc=full.acc,
        auc=full.auc,
        n=full.n,
        config_fingerprint=fingerprint(cfg),
        per_variant=per_variant,
        run_rows=rows,
        resolved_config=resolved,
    )
