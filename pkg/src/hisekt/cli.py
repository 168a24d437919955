"""Stage-oriented command line, with cache artifacts keyed by config fingerprint.

Every stage reads the artifacts of its upstream stage from
``<cache_dir>/<fingerprint>/`` and refuses to run if they are missing, so
artifacts produced under different hyperparameters can never mix.  Exit
codes: 0 success, 1 stage failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataset as dataset_mod
from . import irt as irt_mod
from . import pathscore, predict, retrieval
from .config import RunConfig, fingerprint, load_config_file, resolve_config
from .errors import HisektError, StageDependencyError
from .evaluation import run_experiment
from .llm import LlmClient, map_bounded
from .mrhin import (
    TEMPLATES,
    Mrhin,
    read_graph,
    read_instances,
    sample_instances,
    write_graph,
    write_instances,
)
from .seeding import derive_seed

logger = logging.getLogger(__name__)

ARTIFACTS = {
    "ingest": "dataset.csv",
    "fit-irt": "irt.tsv",
    "build-hin": "graph.json",
    "sample-paths": "paths.jsonl",
    "score-paths": "scored.jsonl",
    "retrieve": "retrieval.json",
    "predict": "predictions.jsonl",
    "evaluate": "report.json",
}
STAGE_ORDER = tuple(ARTIFACTS)


def _cache_dir(cfg: RunConfig) -> Path:
    root = Path(cfg.cache_dir) / fingerprint(cfg)
    root.mkdir(parents=True, exist_ok=True)
    return root


def _artifact(cfg: RunConfig, stage: str) -> Path:
    return _cache_dir(cfg) / ARTIFACTS[stage]


def _require(cfg: RunConfig, stage: str, upstream: str) -> Path:
    path = _artifact(cfg, upstream)
    if not path.exists():
        raise StageDependencyError(stage, upstream)
    return path


def _cache_hit(stage: str, path: Path) -> bool:
    if path.exists():
        print(f"{stage}: cache hit ({path})")
        return True
    return False


def _client_from(cfg: RunConfig) -> LlmClient:
    return LlmClient(
        endpoint=cfg.llm_endpoint,
        model_name=cfg.llm_model,
        timeout=cfg.llm_timeout,
        max_retries=cfg.llm_max_retries,
        max_in_flight=cfg.llm_max_in_flight,
        backend=cfg.llm_backend,
    )


def _run_seed(cfg: RunConfig) -> int:
    # Match run 0 of the evaluate stage so single-stage artifacts agree with it.
    return derive_seed(cfg.seed, "run", 0)


def stage_ingest(cfg: RunConfig) -> None:
    out = _artifact(cfg, "ingest")
    if _cache_hit("ingest", out):
        return
    d = dataset_mod.split(dataset_mod.ingest(cfg.data), cfg.seed)
    out.write_text(dataset_mod.serialize(d), encoding="utf-8")
    print(f"ingest: {len(d)} interactions -> {out}")


def stage_fit_irt(cfg: RunConfig) -> None:
    out = _artifact(cfg, "fit-irt")
    if _cache_hit("fit-irt", out):
        return
    d = dataset_mod.load(_require(cfg, "fit-irt", "ingest"))
    m = irt_mod.fit(d)
    out.write_text(irt_mod.serialize(m), encoding="utf-8")
    print(f"fit-irt: {len(m.theta)} students, {len(m.diff)} questions -> {out}")


def stage_build_hin(cfg: RunConfig) -> None:
    out = _artifact(cfg, "build-hin")
    if _cache_hit("build-hin", out):
        return
    d = dataset_mod.load(_require(cfg, "build-hin", "ingest"))
    m = irt_mod.load(_require(cfg, "build-hin", "fit-irt"))
    g = Mrhin.build(d, m)
    write_graph(g, out)
    print(f"build-hin: {len(g.nodes())} nodes, {g.edge_count()} edges -> {out}")


def stage_sample_paths(cfg: RunConfig) -> None:
    out = _artifact(cfg, "sample-paths")
    if _cache_hit("sample-paths", out):
        return
    d = dataset_mod.load(_require(cfg, "sample-paths", "ingest"))
    g = read_graph(_require(cfg, "sample-paths", "build-hin"))
    walk_seed = derive_seed(_run_seed(cfg), "walks")
    instances = []
    for qid in sorted({i.question_id for i in d.iter_split("test")}):
        for name in TEMPLATES:
            instances.extend(
                sample_instances(
                    g, TEMPLATES[name], qid, n=cfg.n_walks, walk_len=cfg.walk_len, seed=walk_seed
                )
            )
    write_instances(instances, out)
    print(f"sample-paths: {len(instances)} instances -> {out}")


def stage_score_paths(cfg: RunConfig) -> None:
    out = _artifact(cfg, "score-paths")
    if _cache_hit("score-paths", out):
        return
    instances = read_instances(_require(cfg, "score-paths", "sample-paths"))
    g = read_graph(_require(cfg, "score-paths", "build-hin"))
    if cfg.score_backend == "llm":
        client = _client_from(cfg)
        scores = map_bounded(
            lambda p: pathscore.score_llm(p, client, g),
            dict(enumerate(instances)),
            client.max_in_flight,
        )
        scored = [pathscore.ScoredInstance(p, scores[k]) for k, p in enumerate(instances)]
    else:
        scored = pathscore.score_all(instances, g)
    pathscore.write_scored(scored, out)
    print(f"score-paths: {len(scored)} scored ({cfg.score_backend}) -> {out}")


def _retained_from_cache(cfg: RunConfig, stage: str):
    scored = pathscore.read_scored(_require(cfg, stage, "score-paths"))
    by_q: dict[str, dict[str, list[pathscore.ScoredInstance]]] = {}
    for s in scored:
        by_q.setdefault(s.instance.target_question, {}).setdefault(s.instance.template.name, []).append(s)
    run_seed = _run_seed(cfg)
    retained: dict[str, list[pathscore.ScoredInstance]] = {}
    for qid in sorted(by_q):
        rows: list[pathscore.ScoredInstance] = []
        for name in TEMPLATES:
            group = by_q[qid].get(name, [])
            rows.extend(
                pathscore.select_top_k(
                    group, cfg.top_k, cfg.path_select, seed=derive_seed(run_seed, "topk", qid, name)
                )
            )
        retained[qid] = rows
    return retained


def stage_retrieve(cfg: RunConfig) -> None:
    out = _artifact(cfg, "retrieve")
    if _cache_hit("retrieve", out):
        return
    d = dataset_mod.load(_require(cfg, "retrieve", "ingest"))
    m = irt_mod.load(_require(cfg, "retrieve", "fit-irt"))
    retained = _retained_from_cache(cfg, "retrieve")
    run_seed = _run_seed(cfg)

    pair_pool = None
    if cfg.pair_source == "paths":
        from .evaluation import _path_pair_pool

        pair_pool = _path_pair_pool(retained, d) or None
    sim = retrieval.fit_similarity(
        d, m, cfg.pair_sample, seed=derive_seed(run_seed, "pairs"), c=cfg.c, pair_pool=pair_pool
    )

    peers_out = {}
    for i in sorted(d.iter_split("test"), key=lambda x: (x.student_id, x.timestamp, x.question_id)):
        cands = retrieval.build_candidates(retained.get(i.question_id, []), i.student_id)
        peers = retrieval.top_s(
            cands,
            sim,
            m,
            d,
            cfg.top_s,
            mode=cfg.retrieval_mode,
            c=cfg.c,
            seed=derive_seed(run_seed, "tops", i.student_id, i.question_id, i.timestamp),
        )
        peers_out[f"{i.student_id}|{i.question_id}|{i.timestamp}"] = peers
    payload = {
        "similarity": {
            "mu": list(sim.mu),
            "sigma": [list(row) for row in sim.sigma],
            "shrinkage_lambda": sim.shrinkage_lambda,
            "pair_sample_size": sim.pair_sample_size,
        },
        "peers": peers_out,
    }
    out.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(f"retrieve: peers for {len(peers_out)} targets -> {out}")


def stage_predict(cfg: RunConfig) -> None:
    out = _artifact(cfg, "predict")
    if _cache_hit("predict", out):
        return
    d = dataset_mod.load(_require(cfg, "predict", "ingest"))
    m = irt_mod.load(_require(cfg, "predict", "fit-irt"))
    peers_map = json.loads(_require(cfg, "predict", "retrieve").read_text(encoding="utf-8"))["peers"]
    client = _client_from(cfg)
    mask: set[str] = set()
    if cfg.mask_simu:
        mask.add(predict.MASK_SIMU)
    if cfg.mask_irt:
        mask.add(predict.MASK_IRT)
    tests = sorted(d.iter_split("test"), key=lambda x: (x.student_id, x.timestamp, x.question_id))
    bundles = {}
    for i in tests:
        key = f"{i.student_id}|{i.question_id}|{i.timestamp}"
        peers = [] if cfg.mask_simu else peers_map.get(key, [])
        bundles[key] = predict.build_prompt(i.student_id, i.question_id, peers, m, d, mask, cfg.window)
    predictions = map_bounded(lambda b: predict.predict(b, client), bundles, client.max_in_flight)
    lines = []
    for i in tests:
        key = f"{i.student_id}|{i.question_id}|{i.timestamp}"
        pred = predictions[key]
        lines.append(
            json.dumps(
                {
                    "student": i.student_id,
                    "question": i.question_id,
                    "timestamp": i.timestamp,
                    "label": 1 if i.correct else 0,
                    "outcome": pred.outcome,
                    "confidence": pred.confidence,
                    "p_correct": pred.p_correct,
                    "report": pred.report,
                },
                sort_keys=True,
            )
        )
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"predict: {len(lines)} predictions -> {out}")


def stage_evaluate(cfg: RunConfig, out_path: str | None = None) -> None:
    _require(cfg, "evaluate", "predict")
    report = run_experiment(cfg)
    report_json = _artifact(cfg, "evaluate")
    report_json.write_text(report.to_json(), encoding="utf-8")
    table_path = report_json.with_suffix(".txt")
    table_path.write_text(report.to_table(), encoding="utf-8")
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(report.to_json(), encoding="utf-8")
    print(report.to_table(), end="")
    print(f"evaluate: report -> {report_json}")


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "fit-irt": stage_fit_irt,
    "build-hin": stage_build_hin,
    "sample-paths": stage_sample_paths,
    "score-paths": stage_score_paths,
    "retrieve": stage_retrieve,
    "predict": stage_predict,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key = value config file")
    shared.add_argument("--data", help="input interaction log (csv)")
    shared.add_argument("--cache-dir", dest="cache_dir")
    shared.add_argument("--out-dir", dest="out_dir")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--runs", type=int)
    shared.add_argument("--n-walks", dest="n_walks", type=int)
    shared.add_argument("--walk-len", dest="walk_len", type=int)
    shared.add_argument("--top-k", dest="top_k", type=int)
    shared.add_argument("--top-s", dest="top_s", type=int)
    shared.add_argument("--scaling-c", dest="c", type=float)
    shared.add_argument("--window", type=int)
    shared.add_argument("--pair-sample", dest="pair_sample", type=int)
    shared.add_argument("--pair-source", dest="pair_source", choices=("random", "paths"))
    shared.add_argument("--score-backend", dest="score_backend", choices=("formula", "llm"))
    shared.add_argument("--llm-backend", dest="llm_backend", choices=("mock", "http"))
    shared.add_argument("--llm-endpoint", dest="llm_endpoint")
    shared.add_argument("--llm-model", dest="llm_model")
    shared.add_argument("--retrieval-mode", dest="retrieval_mode", choices=("similar", "random"))
    shared.add_argument("--path-select", dest="path_select", choices=("top", "random", "lowest"))
    shared.add_argument("--mask-simu", dest="mask_simu", action="store_const", const=True)
    shared.add_argument("--mask-irt", dest="mask_irt", action="store_const", const=True)
    shared.add_argument("--variants", help="comma list from msr,msl,simu,rsimu,irt")

    parser = argparse.ArgumentParser(prog="hisekt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_ORDER[:-1]:
        sub.add_parser(name, parents=[shared], help=f"run the {name} stage")
    evaluate = sub.add_parser("evaluate", parents=[shared], help="compute metrics and variants")
    evaluate.add_argument("--out", help="also write the report JSON here")
    pipeline = sub.add_parser("pipeline", parents=[shared], help="run every stage in order")
    pipeline.add_argument("--out", help="also write the report JSON here")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {
        key: getattr(args, key)
        for key in (
            "data", "cache_dir", "out_dir", "seed", "runs", "n_walks", "walk_len",
            "top_k", "top_s", "c", "window", "pair_sample", "pair_source",
            "score_backend", "llm_backend", "llm_endpoint", "llm_model",
            "retrieval_mode", "path_select", "mask_simu", "mask_irt", "variants",
        )
        if getattr(args, key, None) is not None
    }
    return resolve_config(file_values, overrides)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config_from_args(args)
        if args.command in STAGE_FUNCS:
            STAGE_FUNCS[args.command](cfg)
        elif args.command == "evaluate":
            stage_evaluate(cfg, out_path=args.out)
        elif args.command == "pipeline":
            for name in STAGE_ORDER[:-1]:
                STAGE_FUNCS[name](cfg)
            stage_evaluate(cfg, out_path=args.out)
        return 0
    except HisektError as exc:
        stage = getattr(exc, "stage", args.command)
        print(f"error in stage {stage}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
