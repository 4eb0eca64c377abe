"""
Command-line entry point.

    python -m app train --config run.toml --seed 3 --out runs/seed3
    python -m app compare-merges --seeds 0 1 2 --strategies weighted_ta fixed_ta
"""
import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

from app import crud
from app.core.config import load_run_config, settings
from app.core.errors import EpisodicGCDError
from app.core.numeric import SeededRng
from app.schemas.config import MergeStrategy, RunConfig
from app.schemas.metrics import SweepRow
from app.schemas.run import RunManifest, RunStatusEnum
from app.services import artifacts, orchestrator
from app.services.encoder import embed_batch, init_from_global
from app.services.evaluation import estimate_k

logger = logging.getLogger("app.cli")


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = orchestrator.override(cfg, "training", seed=args.seed)
    return cfg


def _out_dir(args, run_id: str) -> Path:
    return Path(args.out) if args.out else Path(settings.OUTPUT_DIR) / run_id


def _store(manifest: RunManifest, out_dir: Path) -> None:
    from app.db.session import SessionLocal, init_db

    init_db()
    db = SessionLocal()
    try:
        stored = crud.run.create_from_manifest(db, manifest=manifest, out_dir=str(out_dir))
        logger.info(f"Stored run {manifest.run_id} as id {stored.id}")
    finally:
        db.close()


def cmd_train(args) -> int:
    cfg = _config(args)
    run_id = artifacts.make_run_id(cfg, "train")
    out_dir = _out_dir(args, run_id)
    started_at = datetime.now(timezone.utc)
    start = time.perf_counter()
    updates: List[orchestrator.GlobalModelState] = []
    try:
        outcome = orchestrator.run_experiment(cfg, on_update=updates.append)
    except EpisodicGCDError as e:
        state = updates[-1] if updates else orchestrator.initial_state(cfg, cfg.data.dim)
        manifest = artifacts.write_run_outputs(
            out_dir, run_id, "train", cfg, state, None, started_at, time.perf_counter() - start,
            status=RunStatusEnum.FAILED, error=str(e),
        )
        if not args.no_store:
            _store(manifest, out_dir)
        logger.error(f"Run {run_id} failed after {state.global_index} global updates -> {out_dir}")
        raise
    elapsed = time.perf_counter() - start
    manifest = artifacts.write_run_outputs(
        out_dir, run_id, "train", cfg, outcome.state, outcome.report, started_at, elapsed
    )
    if not args.no_store:
        _store(manifest, out_dir)
    report = outcome.report
    print(f"run {run_id}: all={report.mean_all:.4f} old={report.mean_old:.4f} new={report.mean_new:.4f} "
          f"({elapsed:.1f}s) -> {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    params = artifacts.load_checkpoint(args.checkpoint)
    data = orchestrator.build_experiment(cfg)
    report = orchestrator.evaluate_targets(params, data, cfg)
    out_dir = _out_dir(args, artifacts.make_run_id(cfg, "evaluate"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "evaluation.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    print(report.model_dump_json(indent=2))
    return 0


def _write_sweep(args, cfg: RunConfig, name: str, rows: List[SweepRow]) -> int:
    out_dir = _out_dir(args, artifacts.make_run_id(cfg, name))
    artifacts.write_sweep_csv(out_dir / f"{name}.csv", rows)
    for row in rows:
        conflict = "" if row.mean_sign_conflict is None else f" sign_conflict={row.mean_sign_conflict:.4f}"
        print(f"{row.label}={row.value} seed={row.seed} all={row.target.mean_all:.4f}{conflict}")
    print(f"-> {out_dir / f'{name}.csv'}")
    return 0


def cmd_sweep_episodes(args) -> int:
    cfg = _config(args)
    return _write_sweep(args, cfg, "sweep-episodes", orchestrator.sweep_episodes(cfg, args.values))


def cmd_compare_merges(args) -> int:
    cfg = _config(args)
    rows = orchestrator.compare_merges(cfg, args.seeds, args.strategies)
    return _write_sweep(args, cfg, "compare-merges", rows)


def cmd_sweep_margin(args) -> int:
    cfg = _config(args)
    return _write_sweep(args, cfg, "sweep-margin", orchestrator.sweep_margin(cfg, args.values))


def cmd_sweep_splits(args) -> int:
    cfg = _config(args)
    return _write_sweep(args, cfg, "sweep-splits", orchestrator.sweep_splits(cfg, args.values))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    data = orchestrator.build_experiment(cfg)
    out_dir = _out_dir(args, artifacts.make_run_id(cfg, "gen-data"))
    problem = data.problem
    artifacts.export_dataset(out_dir / "source.csv", problem.source)
    artifacts.export_dataset(out_dir / "validation.csv", data.validation.samples)
    for domain, target in zip(problem.target_domains, data.targets):
        artifacts.export_dataset(out_dir / f"{domain.domain_id}.csv", target)
    all_domains = problem.train_domains + problem.validation_domains + problem.target_domains
    (out_dir / "domains.json").write_text(
        json.dumps([artifacts.describe_domain(d) for d in all_domains], indent=2), encoding="utf-8"
    )
    print(f"wrote {len(all_domains)} domains and {2 + len(data.targets)} datasets to {out_dir}")
    return 0


def cmd_estimate_k(args) -> int:
    cfg = _config(args)
    data = orchestrator.build_experiment(cfg)
    if args.checkpoint:
        params = artifacts.load_checkpoint(args.checkpoint)
    else:
        params = orchestrator.initial_state(cfg, data.dim).params
    encoder = init_from_global(params)
    source = data.problem.source
    labeled_z, labeled_valid = embed_batch(encoder, source.features)
    rng = SeededRng(cfg.training.seed).derive("estimate-k")
    for domain, target in zip(data.problem.target_domains, data.targets):
        z, valid = embed_batch(encoder, target.features)
        k_min, k_max = orchestrator.target_k_bounds(
            len(data.problem.source_class_ids), int(valid.sum()) + int(labeled_valid.sum()), cfg.evaluation
        )
        k_min = args.k_min if args.k_min is not None else k_min
        k_max = args.k_max if args.k_max is not None else k_max
        estimate = estimate_k(
            z[valid], labeled_z[labeled_valid], source.labels[labeled_valid], k_min, k_max,
            rng.derive(domain.domain_id), cfg.evaluation.kmeans_max_iters, cfg.evaluation.kmeans_n_init,
        )
        true_k = len(set(target.hidden_labels.tolist()))
        print(f"{domain.domain_id}: k_hat={estimate.k_hat} true={true_k} bounds={estimate.search_bounds}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host, port=args.port, log_level=args.log_level.lower())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m app", description="Episodic training for category discovery")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="Logging level (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="Override training.seed")
        p.add_argument("--out", help="Output directory (default: OUTPUT_DIR/<run id>)")
        p.add_argument("--no-store", action="store_true", help="Do not record the run in the database")
        p.set_defaults(func=func)
        return p

    add("train", cmd_train, "Run episodic training and evaluate on the target domains")
    p = add("evaluate", cmd_evaluate, "Evaluate a checkpoint on the target domains")
    p.add_argument("--checkpoint", required=True, help="Parameter checkpoint (.pvec)")
    p = add("sweep-episodes", cmd_sweep_episodes, "One run per episode count")
    p.add_argument("--values", type=int, nargs="+", default=[1, 2, 4, 6, 8], help="Episode counts")
    p = add("compare-merges", cmd_compare_merges, "Every merge strategy on shared seeds")
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    p.add_argument("--strategies", nargs="+", default=[s.value for s in MergeStrategy],
                   choices=[s.value for s in MergeStrategy])
    p = add("sweep-margin", cmd_sweep_margin, "One run per margin weight")
    p.add_argument("--values", type=float, nargs="+", default=[0.0, 0.1, 0.2, 0.4])
    p = add("sweep-splits", cmd_sweep_splits, "One run per known-class fraction")
    p.add_argument("--values", type=float, nargs="+", default=[3 / 7, 4 / 7, 5 / 7])
    add("gen-data", cmd_gen_data, "Export the synthetic datasets and domain descriptions")
    p = add("estimate-k", cmd_estimate_k, "Estimate the number of target clusters")
    p.add_argument("--checkpoint", help="Parameter checkpoint; default is the initial encoder")
    p.add_argument("--k-min", type=int)
    p.add_argument("--k-max", type=int)
    p = sub.add_parser("serve", help="Serve the stored runs over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)-5.5s [%(name)s] %(message)s")
    try:
        return args.func(args)
    except EpisodicGCDError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
